use std::fs;

use image::{Rgb, RgbImage};
use patchvae::config::{DataConfig, Settings};
use patchvae::data::{
    load_cifar_binary, load_image_folder, make_synthetic, minibatches, normalize, CifarLayout, Dataset, Split, SynthData, SynthSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dataset(n: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * 32 * 32 * 3).map(|_| rng.random::<u8>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(32, 32, pixels, labels, (0..classes).map(|c| format!("class_{c}")).collect(), Split::Train).unwrap()
}

#[test]
fn cifar100_write_then_parse_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let train = random_dataset(30, 100, 1);
    let test = Dataset {
        split: Split::Test,
        ..random_dataset(10, 100, 2)
    };
    patchvae::data::write_cifar_binary(&train, &dir.path().join("train.bin"), CifarLayout::CIFAR100).unwrap();
    patchvae::data::write_cifar_binary(&test, &dir.path().join("test.bin"), CifarLayout::CIFAR100).unwrap();
    assert_eq!(fs::metadata(dir.path().join("train.bin")).unwrap().len(), 30 * 3074);
    let back = load_cifar_binary(dir.path(), Split::Train).unwrap();
    assert_eq!(back, train);
    let back = load_cifar_binary(dir.path(), Split::Test).unwrap();
    assert_eq!(back.pixels, test.pixels);
    assert_eq!(back.labels, test.labels);
    assert_eq!(back.split, Split::Test);
}

#[test]
fn cifar10_batches_and_label_names() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("cifar-10-batches-bin");
    fs::create_dir(&root).unwrap();
    let mut all = Vec::new();
    for i in 1..=5 {
        let ds = random_dataset(4, 10, 10 + i);
        patchvae::data::write_cifar_binary(&ds, &root.join(format!("data_batch_{i}.bin")), CifarLayout::CIFAR10).unwrap();
        all.push(ds);
    }
    patchvae::data::write_cifar_binary(&random_dataset(3, 10, 20), &root.join("test_batch.bin"), CifarLayout::CIFAR10).unwrap();
    let names: Vec<String> = (0..10).map(|i| format!("name{i}")).collect();
    fs::write(root.join("batches.meta.txt"), names.join("\n") + "\n").unwrap();
    let ds = load_cifar_binary(dir.path(), Split::Train).unwrap();
    assert_eq!(ds.len(), 20);
    assert_eq!(ds.class_names, names);
    let expected_labels: Vec<usize> = all.iter().flat_map(|d| d.labels.clone()).collect();
    assert_eq!(ds.labels, expected_labels);
    assert_eq!(load_cifar_binary(dir.path(), Split::Test).unwrap().len(), 3);
}

#[test]
fn cifar_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_cifar_binary(dir.path(), Split::Train).unwrap_err().to_string();
    assert!(err.contains(dir.path().to_str().unwrap()), "{err}");
    let odd = dir.path().join("odd.bin");
    fs::write(&odd, vec![0u8; 1000]).unwrap();
    assert!(load_cifar_binary(&odd, Split::Train).unwrap_err().to_string().contains("odd.bin"));
}

#[test]
fn image_folder_loads_sorted_classes_and_skips_junk() {
    let dir = tempfile::tempdir().unwrap();
    for (class, colour) in [("b_dogs", [200u8, 10, 10]), ("a_cats", [10, 200, 10])] {
        let d = dir.path().join(class);
        fs::create_dir(&d).unwrap();
        for j in 0..2 {
            RgbImage::from_pixel(40 + 10 * j, 30, Rgb(colour)).save(d.join(format!("{j}.png"))).unwrap();
        }
    }
    fs::write(dir.path().join("a_cats").join("broken.png"), b"not a png").unwrap();
    let load = load_image_folder(dir.path(), 16, Split::Train).unwrap();
    assert_eq!(load.dataset.class_names, vec!["a_cats", "b_dogs"]);
    assert_eq!(load.dataset.labels, vec![0, 0, 1, 1]);
    assert_eq!((load.dataset.height, load.dataset.width), (16, 16));
    assert_eq!(load.skipped.len(), 1);
    assert_eq!(&load.dataset.image_bytes(0)[..3], &[10, 200, 10]);
    assert_eq!(&load.dataset.image_bytes(3)[..3], &[200, 10, 10]);
}

#[test]
fn data_config_limits_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let ds = random_dataset(200, 5, 3);
    patchvae::data::write_cifar_binary(&ds, &dir.path().join("train.bin"), CifarLayout::CIFAR100).unwrap();
    let mut cfg = DataConfig::default();
    cfg.set("source", &format!("cifar:{}", dir.path().display())).unwrap();
    cfg.set("limit", "7").unwrap();
    let loaded = cfg.load(&SynthSpec::default(), Split::Train).unwrap();
    assert!(loaded.synth.is_none());
    assert!(loaded.dataset.label_histogram().iter().take(5).all(|&c| c <= 7));
}

#[test]
fn synthetic_ground_truth_matches_rendered_pixels() {
    let spec = SynthSpec {
        count: 30,
        noise: 0.2,
        ..SynthSpec::default()
    };
    let synth: SynthData = make_synthetic(&spec).unwrap();
    let g = synth.grid();
    for i in 0..30 {
        let img = synth.dataset.image_bytes(i);
        for y in 0..g {
            for x in 0..g {
                // Background is bounded by the noise level; motifs are saturated.
                let peak = (0..8 * 8)
                    .map(|p| {
                        let (py, px) = (y * 8 + p / 8, x * 8 + p % 8);
                        let o = (py * 32 + px) * 3;
                        img[o..o + 3].iter().map(|&b| normalize::<f64>(b).abs()).fold(0.0, f64::max)
                    })
                    .fold(0.0, f64::max);
                assert_eq!(synth.motif_cell(i, y, x), peak > 0.21, "image {i} cell {y},{x} peak {peak}");
            }
        }
    }
}

proptest! {
    #[test]
    fn minibatches_partition_the_dataset(n in 1usize..300, b in 1usize..64, seed in proptest::option::of(any::<u64>())) {
        let batches = minibatches(n, b, seed).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(b));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|x| x.len() <= b && !x.is_empty()));
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}
