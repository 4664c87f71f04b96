use pacgnet_core::gradcheck::{report, run_all};
use pacgnet_core::OpKind;

#[test]
fn every_component_matches_finite_differences() {
    let checks = run_all(0, 4, 32, None).unwrap();
    println!("{}", report(&checks));
    for c in &checks {
        assert!(c.passed(), "{} worst {:.3e} at {}", c.component, c.worst_rel, c.worst_at);
    }
    for name in ["scg", "pfmg", "end-to-end"] {
        assert!(checks.iter().any(|c| c.component == name));
    }
}

#[test]
fn corrupted_backward_rule_is_caught() {
    for kind in [OpKind::Sigmoid, OpKind::Norm] {
        let checks = run_all(1, 4, 32, Some(kind)).unwrap();
        assert!(checks.iter().any(|c| !c.passed()), "{kind:?} fault went unnoticed");
    }
}
