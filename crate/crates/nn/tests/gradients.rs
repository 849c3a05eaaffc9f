use spinterp_nn::gradsuite::layer_suite;

#[test]
fn every_op_and_layer_matches_finite_differences() {
    let results = layer_suite(10);
    assert!(results.len() > 30);
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
