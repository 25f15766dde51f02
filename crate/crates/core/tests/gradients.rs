use drgrader_core::gradcheck::{differentiable_op_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};

#[test]
fn every_op_matches_central_differences() {
    let reports = differentiable_op_suite(20, 7, DEFAULT_STEP).unwrap();
    for r in &reports {
        assert!(
            r.passed(DEFAULT_TOLERANCE),
            "{}: worst relative error {:.3e} over {} instances",
            r.op,
            r.worst,
            r.instances
        );
    }
    assert!(reports.len() >= 17);
}
