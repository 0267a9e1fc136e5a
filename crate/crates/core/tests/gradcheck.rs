use ghvit::gradcheck::{run_suite, MODEL_TOLERANCE, OP_TOLERANCE};

#[test]
fn every_registered_gradient_matches_finite_differences() {
    let results = run_suite().unwrap();
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<32} worst {:.3e} (tol {:.0e})", r.name, r.worst_rel_error, r.tolerance);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    assert!(failed.is_empty(), "gradient mismatch in {failed:?}");
    assert!(results.iter().any(|r| r.tolerance == MODEL_TOLERANCE));
    assert!(results.iter().any(|r| r.tolerance == OP_TOLERANCE));
}
