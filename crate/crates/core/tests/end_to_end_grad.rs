use cpl_core::objective::pipeline_check::{end_to_end_check, TARGETS};

#[test]
fn full_graph_gradients_match_finite_differences() {
    for seed in 0..20 {
        for target in TARGETS {
            let report = end_to_end_check(target, seed).unwrap();
            let err = report.max_relative_error();
            assert!(err < 1e-3, "{target:?} seed {seed}: relative error {err:.3e}");
            assert!(
                report.analytic.iter().any(|g| g.data().iter().any(|&x| x != 0.0)),
                "{target:?} seed {seed}: gradient vanished"
            );
        }
    }
}
