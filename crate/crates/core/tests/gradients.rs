use patchvae::certify::{certification_suite, check_layer, layer_cases};
use patchvae::nn::GradCheckConfig;
use proptest::prelude::*;

#[test]
fn every_layer_kind_and_objective_certifies() {
    let cases = certification_suite(GradCheckConfig::default()).unwrap();
    for c in &cases {
        println!("{:<34} max rel err {:.3e}", c.name, c.report.max_rel_error());
        let w = c.report.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
        println!("   {w:?}");
    }
    let failed: Vec<_> = cases.iter().filter(|c| !c.report.passed).map(|c| (&c.name, c.report.failures())).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn layer_gradients_hold_for_random_seeds(case in 0..layer_cases().len(), seed in 100u64..10_000, batch in 1usize..3) {
        let (name, shape, kind) = layer_cases().swap_remove(case);
        // Batch statistics of a single sample are degenerate for BN.
        let batch = if matches!(name, "batchnorm" | "residual_identity" | "residual_projection") { batch + 1 } else { batch };
        let report = check_layer(&shape, kind, batch, seed, GradCheckConfig::default()).unwrap();
        prop_assert!(report.passed, "{name}: {:?}", report.params);
    }
}
