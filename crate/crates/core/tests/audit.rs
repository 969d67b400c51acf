use crossfuse::gradcheck::{run_gradcheck, GradcheckOptions, Scope};

fn opts(seeds: u64) -> GradcheckOptions {
    GradcheckOptions { seeds, ..Default::default() }
}

#[test]
fn tensor_scope_is_deterministic() {
    let a = run_gradcheck(Scope::Tensor, &opts(3)).unwrap();
    let b = run_gradcheck(Scope::Tensor, &opts(3)).unwrap();
    assert_eq!(a.groups, b.groups);
    assert!(a.passed());
}

#[test]
fn cross_scope_passes_in_both_modes() {
    let r = run_gradcheck(Scope::Cross, &opts(4)).unwrap();
    assert!(r.passed(), "{:?}", r.failures());
    assert!(r.groups.iter().any(|g| g.group.starts_with("continuous")));
    assert!(r.groups.iter().any(|g| g.group.starts_with("discretized")));
}

#[test]
fn model_scope_covers_every_parameter_family() {
    let r = run_gradcheck(Scope::Model, &opts(2)).unwrap();
    assert!(r.passed(), "{:?}", r.failures());
    for family in ["adapter1", "adapter2", "guide", "stem1", "stem2", "branch1", "branch2", "fusion", "head1", "head2", "headf"] {
        assert!(r.groups.iter().any(|g| g.group.starts_with(family)), "no group for {family}");
    }
}

#[test]
fn faulty_rule_is_caught_and_named() {
    let r = run_gradcheck(Scope::Tensor, &GradcheckOptions { inject_faulty_vjp: true, ..opts(2) }).unwrap();
    let bad: Vec<&str> = r.failures().iter().map(|g| g.group.as_str()).collect();
    assert_eq!(bad, ["faulty_square"]);
}
