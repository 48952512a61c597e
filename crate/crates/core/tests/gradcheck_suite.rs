use ddsp_core::gradcheck::{run_suite, Group, FAULT_KINDS};

#[test]
fn every_check_passes() {
    let outcomes = run_suite(&Group::ALL, 7, None).unwrap();
    for o in &outcomes {
        println!("{:<12} {:<20} {:.3e}", o.group.name(), o.name, o.max_rel_error);
    }
    let failing: Vec<_> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name).collect();
    assert!(failing.is_empty(), "failing: {failing:?}");
}

#[test]
fn other_seeds_pass_too() {
    for seed in [1, 2] {
        let outcomes = run_suite(&[Group::Autodiff, Group::Synth, Group::Spectral], seed, None).unwrap();
        assert!(outcomes.iter().all(|o| o.passed()), "{outcomes:?}");
    }
}

#[test]
fn every_injected_fault_is_caught() {
    let outcomes_clean = run_suite(&[Group::Autodiff, Group::Synth, Group::Spectral], 7, None).unwrap();
    assert!(outcomes_clean.iter().all(|o| o.passed()));
    for kind in FAULT_KINDS {
        let outcomes = run_suite(&[Group::Autodiff, Group::Synth, Group::Spectral], 7, Some(kind)).unwrap();
        assert!(outcomes.iter().any(|o| !o.passed()), "fault in {kind} went unnoticed");
        if let Some(direct) = outcomes.iter().find(|o| o.name == kind) {
            assert!(!direct.passed(), "{kind} check passed despite its fault");
        }
    }
}

#[test]
fn group_filter_restricts_checks() {
    let outcomes = run_suite(&[Group::Spectral], 7, None).unwrap();
    assert!(!outcomes.is_empty());
    assert!(outcomes.iter().all(|o| o.group == Group::Spectral));
}
