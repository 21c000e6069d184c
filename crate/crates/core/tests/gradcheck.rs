mod common;

use common::gradcheck::{run_suite, TOLERANCE};

#[test]
fn every_op_kind_matches_finite_differences() {
    for (kind, worst) in run_suite(100, 2024) {
        assert!(worst < TOLERANCE, "{kind}: max relative error {worst:e}");
    }
}
