mod common;

use colt::models::Norm;
use common::gradcheck::check_case;

#[test]
fn twenty_random_networks_match_finite_differences() {
    for seed in 0..20 {
        let s = check_case(seed, Norm::None);
        eprintln!("seed {seed}: checked {} skipped {} worst {:.2e}", s.checked, s.skipped, s.worst_rel);
        assert!(s.checked > 0);
        assert!(s.skipped * 4 <= s.checked + s.skipped, "seed {seed}: too many kinks");
        assert!(s.worst_rel < 1e-4, "seed {seed}: worst relative error {:.3e}", s.worst_rel);
    }
}

/// Normalizing over a handful of samples divides by small standard
/// deviations, which amplifies f32 rounding in the analytic gradient to a few
/// parts in 1e4.
#[test]
fn batch_norm_networks_match_finite_differences() {
    for seed in 100..110 {
        let s = check_case(seed, Norm::Batch);
        eprintln!("seed {seed}: checked {} skipped {} worst {:.2e}", s.checked, s.skipped, s.worst_rel);
        assert!(s.skipped * 4 <= s.checked + s.skipped, "seed {seed}: too many kinks");
        assert!(s.worst_rel < 2e-3, "seed {seed}: worst relative error {:.3e}", s.worst_rel);
    }
}
