use scibilic_core::gradcheck::{check_all, CheckResult};

fn assert_all_pass(results: &[CheckResult]) {
    for r in results {
        println!(
            "{:<22} trials={} worst={:.3e} tol={:.0e} compared={} skipped={}",
            r.name, r.trials, r.worst, r.tolerance, r.compared, r.skipped
        );
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "gradient checks failed: {failed:#?}");
}

#[test]
fn finite_differences_f64() {
    assert_all_pass(&check_all::<f64>(20, 11).unwrap());
}

#[test]
fn finite_differences_f32() {
    assert_all_pass(&check_all::<f32>(20, 12).unwrap());
}
