use hyperlab_core::gradcheck::{check_all, PRIMITIVES};
use hyperlab_core::theoremlab::{self, Budget, CheckReport};

#[test]
fn every_primitive_matches_finite_differences() {
    let checks = check_all(20, 7).unwrap();
    assert_eq!(checks.len(), PRIMITIVES.len());
    for c in checks {
        assert!(c.max_rel_err < 1e-5, "{c:?}");
    }
}

#[test]
fn reduced_theorem_suite_passes() {
    let reports = theoremlab::run_all(3, Budget::QUICK).unwrap();
    assert_eq!(reports.len(), 11);
    for r in &reports {
        assert!(r.pass, "{}", serde_json::to_string_pretty(r).unwrap());
    }
    let json = serde_json::to_string(&reports).unwrap();
    let back: Vec<CheckReport> = serde_json::from_str(&json).unwrap();
    assert_eq!(back.len(), reports.len());
}
