//! The fault hook is process-global, so everything lives in one test.

use ghvit::gradcheck::run_suite;
use ghvit::tensor::fault;

#[test]
fn corrupted_backward_is_caught_and_named() {
    for op in ["softmax", "gelu", "layer_norm", "matmul"] {
        fault::inject(op);
        let results = run_suite().unwrap();
        fault::clear();
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&op), "fault in {op} went unnoticed: {failed:?}");
        assert!(failed.iter().any(|n| n.starts_with("model[")), "{op}: end-to-end checks missed the fault");
    }
    assert!(run_suite().unwrap().iter().all(|r| r.passed()));
}
