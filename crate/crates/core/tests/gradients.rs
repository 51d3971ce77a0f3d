//! Analytic gradients against central finite differences on small graphs.

mod support;

use nmn_core::matching::Aggregation;
use support::{main_checks, matching_checks, pretrain_checks, sampler_check, GradCheck};

fn assert_all(checks: &[GradCheck]) {
    assert!(!checks.is_empty());
    for c in checks {
        assert!(c.ok(), "{c:?}");
    }
}

#[test]
fn matching_objective_gradients() {
    assert_all(&matching_checks());
}

#[test]
fn mean_aggregation_gradients() {
    assert_all(&main_checks(Aggregation::Mean, &["gcn_w_0", "gcn_w_1", "hw_t_1", "hw_b_0"]));
}

#[test]
fn pretraining_gradients() {
    let checks = pretrain_checks();
    assert_eq!(checks.len(), 6);
    assert_all(&checks);
}

#[test]
fn sampler_weight_gradient() {
    assert_all(&[sampler_check()]);
}
