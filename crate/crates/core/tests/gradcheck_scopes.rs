use agileir::gradcheck::{run, Scope, TOLERANCE};

fn assert_scope(scope: Scope) {
    let outcomes = run(Some(scope), &[], None, 11).unwrap();
    for o in &outcomes {
        println!("{:<20} {:.3e} ({} entries)", o.name, o.max_rel_err, o.perturbed);
        assert!(o.max_rel_err < TOLERANCE, "{} rel err {}", o.name, o.max_rel_err);
    }
}

#[test]
fn layer_targets_match_finite_differences() {
    assert_scope(Scope::Layer);
}

#[test]
fn model_targets_match_finite_differences() {
    assert_scope(Scope::Model);
}

#[test]
fn fault_in_attention_backward_is_caught() {
    let out = run(Some(Scope::Layer), &["gswa".to_string()], Some("window_attention"), 0).unwrap();
    assert!(out.iter().all(|o| !o.passed()));
}
