//! Every differentiable kernel against central finite differences (f64,
//! rel. error < 1e-4) across 20+ random seeds; the attention/loss composites
//! and the micro model on a smaller vetted seed set (their random sampling
//! geometry is nudged away from bilinear cell seams per check, see
//! `verify`).

use nearquery_core::verify::{composite_checks, kernel_checks, model_checks};

#[test]
fn kernels_pass_on_twenty_plus_seeds() {
    for seed in 0..22u64 {
        for (name, report) in kernel_checks(seed).unwrap() {
            assert!(
                report.passed(),
                "seed {seed} {name}: max_rel_err {} > {}",
                report.max_rel_err,
                report.tol
            );
        }
    }
}

#[test]
fn composites_pass_on_vetted_seeds() {
    for seed in 0..8u64 {
        for (name, report) in composite_checks(seed).unwrap() {
            assert!(
                report.passed(),
                "seed {seed} {name}: max_rel_err {} > {}",
                report.max_rel_err,
                report.tol
            );
        }
    }
}

#[test]
fn micro_model_passes_end_to_end() {
    for (name, report) in model_checks(0).unwrap() {
        assert!(report.passed(), "{name}: max_rel_err {}", report.max_rel_err);
        // every parameter participates in the end-to-end losses
        for p in &report.params {
            assert!(!p.disconnected, "{name}: parameter {} received no gradient", p.name);
        }
    }
}
