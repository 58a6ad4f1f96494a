mod support;

use support::grad_suite::{op_reports, variant_reports, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    for (name, r) in op_reports() {
        assert!(r.checked > 0, "{name}");
        assert!(r.max_rel_error < TOLERANCE, "{name}: {} at {}", r.max_rel_error, r.worst);
    }
}

#[test]
fn every_variant_loss_matches_finite_differences() {
    for (name, r) in variant_reports() {
        assert!(r.checked > 1000, "{name}: only {} scalars", r.checked);
        assert!(r.max_rel_error < TOLERANCE, "{name}: {} at {}", r.max_rel_error, r.worst);
    }
}
