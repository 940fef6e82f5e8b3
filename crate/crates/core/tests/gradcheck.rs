use backdoor_lab::selftest::{gradient_suite, GRAD_CASES, GRAD_TOLERANCE};

#[test]
fn every_primitive_and_composed_network_pass_finite_differences() {
    let suite = gradient_suite(50, 11).unwrap();
    assert_eq!(suite.len(), GRAD_CASES.len());
    assert!(suite.iter().any(|e| e.name == "network"));
    for e in &suite {
        assert_eq!(e.instances, 50);
        assert!(e.checked > 0, "{}: no coordinates checked", e.name);
        assert!(
            e.excluded * 10 <= e.checked,
            "{}: {} of {} coordinates excluded near kinks",
            e.name,
            e.excluded,
            e.checked
        );
        assert!(e.max_rel_error <= GRAD_TOLERANCE, "{}: {:e}", e.name, e.max_rel_error);
    }
}
