use patchvae::data::{batches_per_epoch, make_synthetic, Dataset, SynthSpec};
use patchvae::distributions::{temperature_at, ScheduleForm, TemperatureSchedule};
use patchvae::error::Error;
use patchvae::io::ByteWriter;
use patchvae::losses::ReconKind;
use patchvae::model::{ModelConfig, ModelKind};
use patchvae::trainer::checkpoint::{checkpoint_bytes, parse_checkpoint, MAGIC};
use patchvae::trainer::{history_csv, load_checkpoint, train, TrainConfig, TrainState, HISTORY_HEADER};

fn small_model() -> ModelConfig {
    ModelConfig {
        parts: 4,
        part_dim: 3,
        feature_channels: 16,
        stem_channels: 8,
        blocks_per_stage: 1,
        decoder_channels: 16,
        height: 16,
        width: 16,
        ..ModelConfig::default()
    }
}

fn small_data(count: usize) -> Dataset {
    make_synthetic(&SynthSpec {
        count,
        canvas: 16,
        motifs_per_image: 2,
        ..SynthSpec::default()
    })
    .unwrap()
    .dataset
}

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        schedule: TemperatureSchedule {
            rate: 0.05,
            ..TemperatureSchedule::default()
        },
        seed: 5,
        ..TrainConfig::default()
    }
}

fn run(model: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> TrainState<f32> {
    let (m, mut state) = TrainState::<f32>::fresh(model, cfg).unwrap();
    train(&m, &mut state, data, cfg, None).unwrap();
    state
}

fn same_store(a: &TrainState<f32>, b: &TrainState<f32>) -> bool {
    a.store.len() == b.store.len()
        && a.store.iter().zip(b.store.iter()).all(|((na, ea), (nb, eb))| {
            na == nb && ea.value.data().iter().zip(eb.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[test]
fn zero_learning_rate_leaves_learnable_parameters_unchanged() {
    let data = small_data(16);
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 1,
        ..small_train()
    };
    let (_, before) = TrainState::<f32>::fresh(&small_model(), &cfg).unwrap();
    let after = run(&small_model(), &cfg, &data);
    for ((name, a), (_, b)) in before.store.iter().zip(after.store.iter()) {
        if name.ends_with("running_mean") || name.ends_with("running_var") {
            continue;
        }
        assert_eq!(a.value, b.value, "{name} moved");
    }
    assert_eq!(after.step, 2);
}

#[test]
fn fixed_seed_reproduces_history_and_parameters_bitwise() {
    let data = small_data(24);
    for kind in [ModelKind::PatchVae, ModelKind::BetaVae] {
        let model = ModelConfig {
            kind,
            z_dim: 8,
            bottleneck_channels: 8,
            ..small_model()
        };
        let a = run(&model, &small_train(), &data);
        let b = run(&model, &small_train(), &data);
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert!(a.history.iter().zip(&b.history).all(|(x, y)| x.total.to_bits() == y.total.to_bits()));
        assert!(same_store(&a, &b));
        let c = run(&model, &TrainConfig { seed: 6, ..small_train() }, &data);
        assert_ne!(history_csv(&a.history), history_csv(&c.history));
    }
}

#[test]
fn step_count_and_temperature_trace() {
    let data = small_data(20);
    let cfg = TrainConfig {
        epochs: 3,
        ..small_train()
    };
    let state = run(&small_model(), &cfg, &data);
    let per_epoch = batches_per_epoch(20, 8);
    assert_eq!(per_epoch, 3);
    assert_eq!(state.step as usize, cfg.epochs * per_epoch);
    assert_eq!(state.history.len(), 9);
    for (i, r) in state.history.iter().enumerate() {
        assert_eq!(r.step, i as u64);
        assert_eq!(r.epoch, i / per_epoch);
        assert_eq!(r.tau, temperature_at(&cfg.schedule, r.step));
        // f32 training: terms agree to single precision.
        assert!((r.total - (r.recon + 0.3 * r.kl_occ + 0.3 * r.kl_app)).abs() < 1e-5 * r.total.abs());
    }
    assert!(state.history.windows(2).all(|w| w[1].tau <= w[0].tau));
    let text = history_csv(&state.history);
    assert_eq!(text.lines().next(), Some(HISTORY_HEADER));
    assert_eq!(text.lines().count(), 10);
}

#[test]
fn linear_schedule_and_weighted_loss_train() {
    let data = small_data(16);
    let cfg = TrainConfig {
        loss: ReconKind::Weighted,
        schedule: TemperatureSchedule {
            tau0: 2.0,
            rate: 0.5,
            tau_min: 0.5,
            form: ScheduleForm::Linear,
        },
        ..small_train()
    };
    let state = run(&small_model(), &cfg, &data);
    let taus: Vec<f64> = state.history.iter().map(|r| r.tau).collect();
    assert_eq!(taus, vec![2.0, 1.5, 1.0, 0.5]);
    assert!(state.history.iter().all(|r| r.total.is_finite()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = small_data(24);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train();
    let full = run(&small_model(), &cfg, &data);

    // Stop mid-epoch, persist, reload and finish.
    let stop = TrainConfig {
        max_steps: Some(4),
        ..cfg.clone()
    };
    let (m, mut state) = TrainState::<f32>::fresh(&small_model(), &stop).unwrap();
    train(&m, &mut state, &data, &stop, Some(dir.path())).unwrap();
    assert_eq!(state.step, 4);
    let mut resumed = load_checkpoint::<f32>(&dir.path().join("checkpoint.pvae")).unwrap();
    let m = resumed.model().unwrap();
    train(&m, &mut resumed, &data, &cfg, None).unwrap();

    assert_eq!(resumed.step, full.step);
    assert_eq!(resumed.history.len(), full.history.len());
    for (a, b) in resumed.history.iter().zip(&full.history) {
        assert_eq!(a.total.to_bits(), b.total.to_bits(), "step {}", a.step);
        assert_eq!(a.tau.to_bits(), b.tau.to_bits());
    }
    assert!(same_store(&resumed, &full));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let data = small_data(16);
    let state = run(&small_model(), &small_train(), &data);
    let bytes = checkpoint_bytes(&state);
    let back = parse_checkpoint::<f32>(&bytes).unwrap();
    assert!(same_store(&state, &back));
    assert_eq!(back.model_config, state.model_config);
    assert_eq!(back.train_config, state.train_config);
    assert_eq!(back.step, state.step);
    assert_eq!(back.history, state.history);
    assert_eq!(back.adam.t, state.adam.t);
    for (name, m) in &state.adam.m {
        assert_eq!(&back.adam.m[name], m);
        assert_eq!(&back.adam.v[name], &state.adam.v[name]);
    }
    assert_eq!(checkpoint_bytes(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested").join("c.pvae");
    patchvae::trainer::save_checkpoint(&state, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let data = small_data(8);
    let state = run(&small_model(), &TrainConfig { epochs: 1, ..small_train() }, &data);
    let bytes = checkpoint_bytes(&state);

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(parse_checkpoint::<f32>(&wrong_magic), Err(Error::Format(_))));

    let mut w = ByteWriter::new(MAGIC, 99);
    w.u64(0);
    let err = parse_checkpoint::<f32>(&w.finish()).unwrap_err().to_string();
    assert!(err.contains("version 99"), "{err}");

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(parse_checkpoint::<f32>(&flipped).unwrap_err().to_string().contains("checksum"));

    assert!(parse_checkpoint::<f32>(&bytes[..bytes.len() - 9]).is_err());

    let missing = std::path::Path::new("/nonexistent/ckpt.pvae");
    assert!(load_checkpoint::<f32>(missing).unwrap_err().to_string().contains("ckpt.pvae"));
}

#[test]
fn non_finite_loss_leaves_a_diagnostic_checkpoint() {
    let data = small_data(16);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train();
    let (m, mut state) = TrainState::<f32>::fresh(&small_model(), &cfg).unwrap();
    state.store.tensor_mut("decoder.0.weight").unwrap().data_mut()[0] = f32::NAN;
    let err = train(&m, &mut state, &data, &cfg, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("epoch 0") && msg.contains("batch 0"), "{msg}");
    let diag = load_checkpoint::<f32>(&dir.path().join("diagnostic.pvae")).unwrap();
    assert_eq!(diag.step, 0);
    assert!(diag.store.tensor("decoder.0.weight").unwrap().data()[0].is_nan());
}

#[test]
fn resolution_mismatch_is_a_shape_error() {
    let data = small_data(8);
    let model = ModelConfig {
        height: 32,
        width: 32,
        ..small_model()
    };
    let (m, mut state) = TrainState::<f32>::fresh(&model, &small_train()).unwrap();
    assert!(train(&m, &mut state, &data, &small_train(), None).is_err());
}
