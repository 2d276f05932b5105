//! Central finite-difference checks for every forward kind.

use mstop_numkit::gradcheck::{check_all_kinds, TOL};

#[test]
fn every_kind_matches_central_differences() {
    let reports = check_all_kinds(100);
    assert!(reports.len() >= 25);
    for r in &reports {
        println!("{}: {} probes, worst relative error {:e}", r.kind, r.checked, r.worst);
    }
    for r in &reports {
        assert!(r.passed(), "{} exceeded {TOL}: {:?}", r.kind, r.first_failure);
        assert_eq!(r.trials, 100);
    }
}
