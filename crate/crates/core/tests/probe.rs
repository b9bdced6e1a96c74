mod common;

use common::{image_pair, psnr_reference, ssim_reference};
use patchvae::data::{Dataset, Split};
use patchvae::model::{Model, ModelConfig, TRUNK_PREFIX};
use patchvae::probe::{build_classifier, evaluate, mean_psnr, psnr, ssim, train_probe, FreezeLevel, ProbeConfig, PSNR_CAP_DB};
use patchvae::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn random_dataset(n: usize, classes: usize, seed: u64, split: Split) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * 16 * 16 * 3).map(|_| rng.random::<u8>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(16, 16, pixels, labels, (0..classes).map(|c| format!("c{c}")).collect(), split).unwrap()
}

fn probe_cfg(level: FreezeLevel, classes: usize) -> ProbeConfig {
    ProbeConfig {
        freeze_level: level,
        hidden: 16,
        num_classes: classes,
        epochs: 3,
        batch_size: 32,
        ..ProbeConfig::default()
    }
}

#[test]
fn frozen_parameters_survive_probe_training_bit_for_bit() {
    let (_, pretrained) = Model::build::<f32>(&small_model(), 3).unwrap();
    let train = random_dataset(96, 4, 1, Split::Train);
    let test = random_dataset(32, 4, 2, Split::Test);
    for level in [FreezeLevel::Conv1, FreezeLevel::Conv1_3, FreezeLevel::Conv1_5] {
        let (c, mut store) = build_classifier(&small_model(), Some(&pretrained), &probe_cfg(level, 4), 16, 16).unwrap();
        for (name, e) in store.iter().filter(|(n, _)| n.starts_with(TRUNK_PREFIX)) {
            assert_eq!(&e.value, pretrained.tensor(name).unwrap(), "{name} not copied");
        }
        let before = store.clone();
        let report = train_probe(&c, &mut store, &train, &test).unwrap();
        assert_eq!(report.train_loss.len(), 3);
        let frozen: Vec<String> = c.frozen.clone().map(|i| c.trunk.layer_prefix(i)).collect();
        let mut moved_head = false;
        for ((name, a), (_, b)) in before.iter().zip(store.iter()) {
            let bits_equal = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if frozen.iter().any(|p| name.starts_with(&format!("{p}."))) {
                assert!(bits_equal, "{level:?}: frozen {name} changed");
            } else if name.starts_with("head") {
                moved_head |= !bits_equal;
            }
        }
        assert!(moved_head, "{level:?}: head did not train");
    }
}

#[test]
fn deeper_freezing_leaves_fewer_trainable_parameters() {
    let counts: Vec<usize> = [FreezeLevel::Conv1, FreezeLevel::Conv1_3, FreezeLevel::Conv1_5]
        .into_iter()
        .map(|level| {
            let (_, store) = build_classifier::<f32>(&ModelConfig::default(), None, &probe_cfg(level, 100), 32, 32).unwrap();
            store.trainable_count()
        })
        .collect();
    assert!(counts[0] > counts[1] && counts[1] > counts[2], "{counts:?}");
    // Only the head trains when the whole trunk is frozen.
    assert_eq!(counts[2], 2048 * 16 + 16 + 16 * 100 + 100);
}

#[test]
fn random_labels_stay_at_chance() {
    let classes = 10;
    let train = random_dataset(400, classes, 5, Split::Train);
    let test = random_dataset(600, classes, 6, Split::Test);
    let cfg = ProbeConfig {
        epochs: 5,
        ..probe_cfg(FreezeLevel::Conv1_5, classes)
    };
    let (c, mut store) = build_classifier::<f32>(&small_model(), None, &cfg, 16, 16).unwrap();
    let report = train_probe(&c, &mut store, &train, &test).unwrap();
    let chance = 100.0 / classes as f64;
    let se = 100.0 * (0.1f64 * 0.9 / 600.0).sqrt();
    assert!((report.top1 - chance).abs() < 4.0 * se, "top1 {}", report.top1);
    assert!(report.top5 >= report.top1);
    assert_eq!(report.per_class.len(), classes);
    assert_eq!(report.per_class.iter().map(|p| p.1).sum::<usize>(), 600);
}

#[test]
fn evaluation_rejects_mismatched_label_space() {
    let (c, store) = build_classifier::<f32>(&small_model(), None, &probe_cfg(FreezeLevel::Conv1_5, 4), 16, 16).unwrap();
    assert!(evaluate(&c, &store, &random_dataset(8, 7, 0, Split::Test)).is_err());
    assert!(build_classifier::<f32>(&small_model(), None, &probe_cfg(FreezeLevel::Conv1_5, 4), 32, 32).is_err());
}

#[test]
fn metrics_match_windowed_reference_on_fifty_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for i in 0..50 {
        let (h, w) = [(32, 32), (16, 24), (8, 8), (40, 16)][i % 4];
        let noise = rng.random_range(0.01..1.0);
        let (a, b) = image_pair(h, w, noise, &mut rng);
        let p = psnr(&a, &b).unwrap();
        let s = ssim(&a, &b).unwrap();
        let (pr, sr) = (psnr_reference(a.data(), b.data()), ssim_reference(a.data(), b.data(), h, w));
        assert!((p - pr).abs() < 1e-6, "pair {i}: psnr {p} vs {pr}");
        assert!((s - sr).abs() < 1e-6, "pair {i}: ssim {s} vs {sr}");
    }
}

#[test]
fn identical_images_hit_the_metric_ceilings() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (a, _) = image_pair(32, 32, 0.0, &mut rng);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let x = Tensor64::from_fn(&[3, 16, 16, 3], |_| rng.random_range(-1.0..1.0));
    assert_eq!(mean_psnr(&x, &x).unwrap(), PSNR_CAP_DB);
    let neg = x.map(|v| -v);
    assert!(ssim(&x, &neg).unwrap() < 0.0);
}

#[test]
fn mean_psnr_averages_per_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (a1, b1) = image_pair(16, 16, 0.1, &mut rng);
    let (a2, b2) = image_pair(16, 16, 0.6, &mut rng);
    let x = Tensor64::concat_outer(&[a1.clone(), a2.clone()]).unwrap();
    let y = Tensor64::concat_outer(&[b1.clone(), b2.clone()]).unwrap();
    let expect = (psnr(&a1, &b1).unwrap() + psnr(&a2, &b2).unwrap()) / 2.0;
    assert!((mean_psnr(&x, &y).unwrap() - expect).abs() < 1e-12);
}
