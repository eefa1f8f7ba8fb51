use dafss_core::gradcheck::{run_suite, TOLERANCE};

#[test]
fn every_gradient_matches_finite_differences() {
    let results = run_suite(7).unwrap();
    assert!(!results.is_empty());
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<32} checked {:>4}  max rel err {:.3e}", r.name, r.report.checked, r.report.max_rel_error);
        if !r.passed() {
            failed.push(format!("{}: {:?}", r.name, r.report.worst));
        }
    }
    assert!(failed.is_empty(), "failing checks (tolerance {TOLERANCE}):\n{}", failed.join("\n"));
}
