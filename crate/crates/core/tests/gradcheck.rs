use openmm::harness::{grad_check, grad_check_with, GradCheckConfig, GRAD_CHECK_TOLERANCE};
use openmm::objective::Toggles;
use openmm::Error;

#[test]
fn full_objective_matches_finite_differences() {
    for seed in 0..20 {
        let report = grad_check(&GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        })
        .unwrap();
        let worst = report
            .groups
            .iter()
            .map(|g| format!("{}={:.2e}", g.group, g.max_rel_error))
            .collect::<Vec<_>>()
            .join(" ");
        let skipped: usize = report.groups.iter().map(|g| g.kink_skipped).sum();
        println!("seed {seed}: skipped {skipped}; {worst}");
        assert!(report.passed(GRAD_CHECK_TOLERANCE), "seed {seed}: {worst}");
    }
}

#[test]
fn cross_entropy_only_objective_passes() {
    let report = grad_check(&GradCheckConfig {
        toggles: Toggles::all_off(),
        ..GradCheckConfig::default()
    })
    .unwrap();
    assert!(report.passed(GRAD_CHECK_TOLERANCE));
    // Untouched heads (jigsaw, translators) carry exactly zero gradient.
    for g in &report.groups {
        if g.group.starts_with("translator") || g.group == "jigsaw-head" {
            assert_eq!(g.max_abs_error, 0.0, "{}", g.group);
        }
    }
}

#[test]
fn corrupted_gradient_is_detected() {
    let report = grad_check_with(&GradCheckConfig::default(), |grads, store| {
        let id = store.id("head-joint.0.bias").unwrap();
        let mut g = grads.get(id).unwrap().clone();
        g.as_mut_slice()[0] += 1e-2;
        grads.set(id, g);
    })
    .unwrap();
    assert!(!report.passed(GRAD_CHECK_TOLERANCE));
    let bad = report.groups.iter().find(|g| g.group == "head-joint").unwrap();
    assert!(bad.max_rel_error > 1e-3);
}

#[test]
fn oversized_config_is_rejected() {
    let err = grad_check(&GradCheckConfig {
        input_dims: vec![64, 64],
        embed_dim: 32,
        ..GradCheckConfig::default()
    })
    .unwrap_err();
    assert!(matches!(err, Error::Validation { .. }), "{err}");
}
