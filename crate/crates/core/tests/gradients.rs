//! Analytic gradients against central finite differences, in double precision.

mod common;
use common::{fgn_gradient_check, statmatch_gradient_check};

#[test]
fn fgn_parameter_gradients() {
    for seed in [1, 2] {
        let worst = fgn_gradient_check(seed);
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn statmatch_pixel_gradients() {
    let (worst, fovea) = statmatch_gradient_check(16, 4);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
    assert_eq!(fovea, 0.0);
}
