//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion 7 needs the CIFAR-100 binary release under `PVAE_CIFAR100_DIR`.
//! Without it the line reads FAIL (data unavailable) and the run continues;
//! every other FAIL fails the test.

mod common;

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{bernoulli_kl_mc, gaussian_kl_mc, image_pair, psnr_reference, ssim_reference};
use patchvae::certify::certification_suite;
use patchvae::data::{load_cifar_binary, make_synthetic, make_synthetic_split, Dataset, Split, SynthData, SynthSpec};
use patchvae::distributions::{kl_bernoulli, kl_gaussian_elementwise, temperature_at, BernoulliParams, GaussianParams};
use patchvae::losses::{l2_recon, laplacian_weight_mask, weighted_recon, ReconKind, WeightMask};
use patchvae::model::{Model, ModelConfig, TRUNK_PREFIX};
use patchvae::nn::{GradCheckConfig, Graph, Mode};
use patchvae::probe::{build_classifier, mean_psnr, psnr, ssim, train_probe, FreezeLevel, ProbeConfig, PSNR_CAP_DB};
use patchvae::trainer::checkpoint::{checkpoint_bytes, parse_checkpoint};
use patchvae::trainer::sweep::{ablation_cells, run_sweep, sweep_csv, SWEEP_HEADER};
use patchvae::trainer::{load_checkpoint, objective_vars, train, TrainConfig, TrainState};
use patchvae::viz::{dataset_occurrences, part_discovery};
use patchvae::{ParamStore32, Tensor, Tensor32, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CIFAR_ENV: &str = "PVAE_CIFAR100_DIR";

enum Verdict {
    Pass(String),
    Fail(String),
    Unavailable(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

// Written to the stdout handle directly so the lines survive test output capture.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn judge(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Verdict::Fail(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    report(&match &v {
        Verdict::Pass(d) => format!("PASS criterion {id:>2} {name}: {d} [{secs:.1}s]"),
        Verdict::Fail(d) => format!("FAIL criterion {id:>2} {name}: {d} [{secs:.1}s]"),
        Verdict::Unavailable(d) => format!("FAIL criterion {id:>2} {name}: data unavailable: {d}"),
    });
    v
}

fn same_bits(a: &ParamStore32, b: &ParamStore32) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, ea), (nb, eb))| {
            na == nb && ea.value.data().iter().zip(eb.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn reconstruct(model: &Model, store: &ParamStore32, x: &Tensor32) -> Tensor32 {
    match model {
        Model::Patch(m) => m.reconstruct(store, x).unwrap().0,
        Model::Beta(m) => m.reconstruct(store, x).unwrap().0,
    }
}

fn synthetic_psnr(model: &Model, store: &ParamStore32, test: &Dataset) -> f64 {
    let x: Tensor32 = test.all_images();
    mean_psnr(&x, &reconstruct(model, store, &x)).unwrap()
}

fn gradient_certification() -> Verdict {
    let start = Instant::now();
    let cases = certification_suite(GradCheckConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let worst = cases
        .iter()
        .map(|c| (c.report.max_rel_error(), c.name.as_str()))
        .fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    let failed: Vec<&str> = cases.iter().filter(|c| !c.report.passed || !(c.report.max_rel_error() < 1e-4)).map(|c| c.name.as_str()).collect();
    verdict(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} cases, worst rel err {:.2e} ({}), failures {failed:?}, {:.1}s < 120s",
            cases.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn kl_monte_carlo() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_g = 0.0f64;
    for _ in 0..20 {
        let (mu, lv) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..1.5));
        let p = GaussianParams::new(Tensor64::scalar(mu), Tensor64::scalar(lv)).unwrap();
        let exact = kl_gaussian_elementwise(&p).data()[0];
        let (est, se) = gaussian_kl_mc(mu, lv, 100_000, &mut rng);
        worst_g = worst_g.max((est - exact).abs() / se);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(122);
    let mut worst_b = 0.0f64;
    for _ in 0..20 {
        let (q, p) = (rng.random_range(0.02..0.98), rng.random_range(0.02..0.98));
        let exact = kl_bernoulli(&BernoulliParams::new(Tensor64::scalar(q)), p).unwrap().data()[0];
        let (est, se) = bernoulli_kl_mc(q, p, 100_000, &mut rng);
        worst_b = worst_b.max((est - exact).abs() / se);
    }
    verdict(
        worst_g <= 3.0 && worst_b <= 3.0,
        format!("20+20 parameterizations, 1e5 samples, worst |mc-exact|/se gaussian {worst_g:.2} bernoulli {worst_b:.2} (<= 3)"),
    )
}

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut img = |h: usize, w: usize| Tensor64::from_fn(&[h, w, 3], |_| rng.random_range(-1.0..1.0));

    let mut uniform_err = 0.0f64;
    for _ in 0..20 {
        let (x, y) = (img(32, 32), img(32, 32));
        let a = weighted_recon(&x, &y, &WeightMask::uniform(4, 4)).unwrap();
        let b = l2_recon(&x, &y).unwrap();
        uniform_err = uniform_err.max((a - b).abs() / b.abs());
    }

    let mut mask_err = 0.0f64;
    for _ in 0..100 {
        let m = laplacian_weight_mask(&img(32, 32)).unwrap();
        mask_err = mask_err.max((m.weights.data().iter().sum::<f64>() - 1.0).abs());
    }
    let constant_uniform = laplacian_weight_mask(&Tensor64::full(&[32, 32, 3], 0.25)).unwrap() == WeightMask::uniform(4, 4);

    let cfg = ModelConfig::miniature();
    let (model, store) = Model::build::<f64>(&cfg, 33).unwrap();
    let mut recomb_err = 0.0f64;
    for kind in [ReconKind::Plain, ReconKind::Weighted] {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = Tensor64::from_fn(&[3, 8, 8, 3], |_| rng.random_range(-1.0..1.0));
        let noise = model.draw_noise::<f64, _>(3, &mut rng);
        let mut g = Graph::new();
        let br = objective_vars(&model, &mut g, &store, &x, Some(&noise), 0.8, Mode::Train, kind).unwrap().breakdown(&g);
        recomb_err = recomb_err.max((br.total - br.recombined()).abs());
    }

    verdict(
        uniform_err <= 1e-9 && mask_err <= 1e-6 && constant_uniform && recomb_err < 1e-9,
        format!(
            "uniform-vs-l2 rel {uniform_err:.1e} (<=1e-9), mask sum err {mask_err:.1e} over 100 (<=1e-6), \
             constant mask uniform {constant_uniform}, recombination {recomb_err:.1e} (<1e-9)"
        ),
    )
}

fn shape_contract() -> Verdict {
    let cfg = ModelConfig::default();
    let (model, store) = Model::build::<f64>(&cfg, 1).unwrap();
    let m = model.as_patch().unwrap();
    let (xhat, _, code) = m.reconstruct(&store, &Tensor64::zeros(&[1, 32, 32, 3])).unwrap();
    let ok32 = code.zhat.shape() == [1, 4, 4, 96] && xhat.shape() == [1, 32, 32, 3];

    let cfg64 = ModelConfig {
        height: 64,
        width: 64,
        ..ModelConfig::default()
    };
    let (model, store) = Model::build::<f64>(&cfg64, 1).unwrap();
    let m = model.as_patch().unwrap();
    let (xhat64, post64, code64) = m.reconstruct(&store, &Tensor64::zeros(&[1, 64, 64, 3])).unwrap();
    let ok64 = cfg64.grid() == (8, 8) && post64.occ_probs.shape() == [1, 8, 8, 16] && code64.zhat.shape() == [1, 8, 8, 96] && xhat64.shape() == [1, 64, 64, 3];
    verdict(
        ok32 && ok64,
        format!(
            "32: zhat {:?} -> {:?}; 64: grid {:?}, zhat {:?} -> {:?}",
            code.zhat.shape(),
            xhat.shape(),
            cfg64.grid(),
            code64.zhat.shape(),
            xhat64.shape()
        ),
    )
}

struct SyntheticRun {
    model: Model,
    state: TrainState<f32>,
    synth: SynthData,
    cfg: TrainConfig,
    elapsed: Duration,
}

fn synthetic_run() -> SyntheticRun {
    let synth = make_synthetic(&SynthSpec::default()).unwrap();
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let (model, mut state) = TrainState::<f32>::fresh(&ModelConfig::default(), &cfg).unwrap();
    train(&model, &mut state, &synth.dataset, &cfg, None).unwrap();
    SyntheticRun {
        model,
        state,
        synth,
        cfg,
        elapsed: start.elapsed(),
    }
}

fn synthetic_discovery(run: &SyntheticRun) -> Verdict {
    let start = Instant::now();
    let m = run.model.as_patch().unwrap();
    let occ: Tensor<f64> = dataset_occurrences(m, &run.state.store, &run.synth.dataset, 256).unwrap().cast();
    let r = part_discovery(&occ, &run.synth, 50).unwrap();
    let elapsed = run.elapsed + start.elapsed();
    let mc = &run.state.model_config;
    verdict(
        r.ratio >= 2.0 && r.best_hits >= 40 && elapsed < Duration::from_secs(20 * 60) && run.cfg.epochs <= 10,
        format!(
            "{} images, {} epochs, N {} prior {}: inside/outside {:.3}/{:.3} = {:.2} (>= 2), part {} hits {}/{} (>= 40), {:.0}s < 1200s",
            run.synth.dataset.len(),
            run.cfg.epochs,
            mc.parts,
            mc.prior(),
            r.inside,
            r.outside,
            r.ratio,
            r.best_part,
            r.best_hits,
            r.k,
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_and_temperature(run: &SyntheticRun) -> Verdict {
    let epochs = run.state.epoch_summaries();
    let (first, last) = (epochs[0].loss.total, epochs[epochs.len() - 1].loss.total);
    let tau_ok = run.state.history.iter().all(|r| r.tau == temperature_at(&run.cfg.schedule, r.step));
    verdict(
        epochs.len() == 10 && last <= 0.7 * first && tau_ok,
        format!(
            "epoch 1 total {first:.5}, epoch {} total {last:.5} ({:.3}x, <= 0.7x); tau trace matches schedule at {} steps: {tau_ok}",
            epochs.len(),
            last / first,
            run.state.history.len()
        ),
    )
}

fn cifar_probe() -> Verdict {
    let Some(dir) = std::env::var_os(CIFAR_ENV) else {
        return Verdict::Unavailable(format!("{CIFAR_ENV} is not set; the probe comparison needs the CIFAR-100 binary release"));
    };
    let dir = Path::new(&dir);
    let train_set = match load_cifar_binary(dir, Split::Train) {
        Ok(d) => d.limit_per_class(50),
        Err(e) => return Verdict::Unavailable(e.to_string()),
    };
    let test_set = match load_cifar_binary(dir, Split::Test) {
        Ok(d) => d,
        Err(e) => return Verdict::Unavailable(e.to_string()),
    };
    let mc = ModelConfig::default();
    let cfg = TrainConfig::default();
    let (model, mut state) = TrainState::<f32>::fresh(&mc, &cfg).unwrap();
    train(&model, &mut state, &train_set, &cfg, None).unwrap();

    let probe = ProbeConfig {
        freeze_level: FreezeLevel::Conv1_5,
        num_classes: train_set.num_classes,
        epochs: 30,
        ..ProbeConfig::default()
    };
    let mut frozen_ok = true;
    let mut run = |pretrained: Option<&ParamStore32>| {
        let (c, mut store) = build_classifier(&mc, pretrained, &probe, 32, 32).unwrap();
        let before = store.clone();
        let report = train_probe(&c, &mut store, &train_set, &test_set).unwrap();
        for (name, e) in store.iter().filter(|(n, _)| n.starts_with(TRUNK_PREFIX)) {
            let b = before.tensor(name).unwrap();
            frozen_ok &= e.value.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
        report.top1
    };
    let pretrained = run(Some(&state.store));
    let random = run(None);
    verdict(
        pretrained - random >= 5.0 && frozen_ok,
        format!(
            "{} train / {} test images: pretrained conv1_5 top-1 {pretrained:.2}% vs random trunk {random:.2}% (gap {:.2} >= 5), frozen bit-identical {frozen_ok}",
            train_set.len(),
            test_set.len(),
            pretrained - random
        ),
    )
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for i in 0..50 {
        let (h, w) = [(32, 32), (16, 24), (8, 8), (40, 16)][i % 4];
        let noise = rng.random_range(0.01..1.0);
        let (a, b) = image_pair(h, w, noise, &mut rng);
        dp = dp.max((psnr(&a, &b).unwrap() - psnr_reference(a.data(), b.data())).abs());
        ds = ds.max((ssim(&a, &b).unwrap() - ssim_reference(a.data(), b.data(), h, w)).abs());
    }
    let (a, _) = image_pair(32, 32, 0.0, &mut rng);
    let self_ssim = ssim(&a, &a).unwrap();
    let self_psnr = psnr(&a, &a).unwrap();
    verdict(
        dp <= 1e-6 && ds <= 1e-6 && (self_ssim - 1.0).abs() < 1e-12 && self_psnr == PSNR_CAP_DB,
        format!("50 pairs: max |psnr diff| {dp:.1e}, max |ssim diff| {ds:.1e} (<= 1e-6); ssim(x,x) {self_ssim}, psnr(x,x) {self_psnr} dB"),
    )
}

fn psnr_trend(run: &SyntheticRun) -> String {
    let test = make_synthetic_split(
        &SynthSpec {
            count: 500,
            ..SynthSpec::default()
        },
        Split::Test,
    )
    .unwrap()
    .dataset;
    let (beta, mut bstate) = TrainState::<f32>::fresh(&ModelConfig::betavae(), &run.cfg).unwrap();
    train(&beta, &mut bstate, &run.synth.dataset, &run.cfg, None).unwrap();
    let p_beta = synthetic_psnr(&beta, &bstate.store, &test);
    let p_patch = synthetic_psnr(&run.model, &run.state.store, &test);
    format!(
        "non-binding trend beta-VAE psnr {p_beta:.2} dB {} PatchVAE {p_patch:.2} dB: {}",
        if p_beta >= p_patch { ">=" } else { "<" },
        if p_beta >= p_patch { "holds" } else { "does not hold" }
    )
}

fn determinism_and_resume() -> Verdict {
    let synth = make_synthetic(&SynthSpec {
        count: 256,
        ..SynthSpec::default()
    })
    .unwrap();
    let data = &synth.dataset;
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let mc = ModelConfig::default();
    let full = |cfg: &TrainConfig| {
        let (m, mut s) = TrainState::<f32>::fresh(&mc, cfg).unwrap();
        train(&m, &mut s, data, cfg, None).unwrap();
        s
    };
    let (a, b) = (full(&cfg), full(&cfg));
    let history_bits = |s: &TrainState<f32>| -> Vec<[u64; 5]> {
        s.history.iter().map(|r| [r.total.to_bits(), r.recon.to_bits(), r.kl_occ.to_bits(), r.kl_app.to_bits(), r.tau.to_bits()]).collect()
    };
    let deterministic = history_bits(&a) == history_bits(&b) && same_bits(&a.store, &b.store);

    let bytes = checkpoint_bytes(&a);
    let back = parse_checkpoint::<f32>(&bytes).unwrap();
    let roundtrip = same_bits(&a.store, &back.store) && checkpoint_bytes(&back) == bytes;

    let dir = tempfile::tempdir().unwrap();
    let stop = TrainConfig {
        max_steps: Some(3),
        ..cfg.clone()
    };
    let (m, mut s) = TrainState::<f32>::fresh(&mc, &stop).unwrap();
    train(&m, &mut s, data, &stop, Some(dir.path())).unwrap();
    let mut resumed = load_checkpoint::<f32>(&dir.path().join("checkpoint.pvae")).unwrap();
    let m = resumed.model().unwrap();
    train(&m, &mut resumed, data, &cfg, None).unwrap();
    let resume_ok = history_bits(&resumed) == history_bits(&a) && same_bits(&resumed.store, &a.store);

    verdict(
        deterministic && roundtrip && resume_ok,
        format!(
            "{} steps: repeat run bitwise {deterministic}, checkpoint round-trip bit-exact {roundtrip}, resume after 3 steps matches per step {resume_ok}",
            a.history.len()
        ),
    )
}

fn ablation_sweep() -> Verdict {
    let synth = make_synthetic(&SynthSpec {
        count: 128,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        max_steps: Some(1),
        ..TrainConfig::default()
    };
    let cells = ablation_cells(&ModelConfig::default());
    let rows = run_sweep(&cells, &cfg, &synth, 50, |_| {}).unwrap();
    let csv = sweep_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    let columns = SWEEP_HEADER.split(',').count();
    let well_formed = lines[0] == SWEEP_HEADER && lines[1..].iter().all(|l| l.split(',').count() == columns);
    let finite = rows.iter().all(|r| r.total.is_finite() && r.steps == 1);
    verdict(
        cells.len() == 14 && lines.len() == 15 && well_formed && finite,
        format!("{} cells -> {} CSV rows, well formed {well_formed}, all finite {finite}", cells.len(), lines.len() - 1),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    results.push(judge(1, "gradient certification", gradient_certification));
    results.push(judge(2, "KL vs Monte Carlo", kl_monte_carlo));
    results.push(judge(3, "loss identities", loss_identities));
    results.push(judge(4, "shape contract", shape_contract));

    let run = catch_unwind(synthetic_run).ok();
    let missing = || Verdict::Fail("synthetic training run failed".into());
    results.push(judge(5, "synthetic part discovery", || run.as_ref().map_or_else(missing, synthetic_discovery)));
    results.push(judge(6, "loss decrease and temperature trace", || run.as_ref().map_or_else(missing, loss_and_temperature)));

    results.push(judge(7, "CIFAR-100 frozen-trunk probe", cifar_probe));
    results.push(judge(8, "metric oracles", || match metric_oracles() {
        Verdict::Pass(d) => Verdict::Pass(match &run {
            Some(run) => format!("{d}; {}", psnr_trend(run)),
            None => d,
        }),
        v => v,
    }));
    results.push(judge(9, "determinism and resume", determinism_and_resume));
    results.push(judge(10, "ablation sweep", ablation_sweep));

    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, v)| matches!(v, Verdict::Fail(_))).map(|(i, _)| i + 1).collect();
    let unavailable: Vec<usize> = results.iter().enumerate().filter(|(_, v)| matches!(v, Verdict::Unavailable(_))).map(|(i, _)| i + 1).collect();
    report(&format!(
        "acceptance: {} PASS, {} FAIL {failed:?}, {} FAIL for missing data {unavailable:?}",
        results.len() - failed.len() - unavailable.len(),
        failed.len(),
        unavailable.len()
    ));
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
