mod common;

fn check(suite: common::Suite) {
    if let Err(e) = suite() {
        panic!("{e}");
    }
}

#[test]
fn csdf_positive_and_params_admissible() {
    check(common::positivity);
}

#[test]
fn quaternion_sign_does_not_matter() {
    check(common::double_cover);
}

#[test]
fn runs_are_reproducible() {
    check(common::determinism);
}

#[test]
fn controls_stay_in_bounds() {
    check(common::bound_feasibility);
}

#[test]
fn larger_cutoff_keeps_contacts() {
    check(common::filter_monotonicity);
}

#[test]
fn frictionless_rows_collapse() {
    check(common::mu_zero_collapse);
}

#[test]
fn smooth_max_gap_bound() {
    check(common::smooth_max_bound);
}

#[test]
fn exact_distance_frame_invariant() {
    check(common::frame_invariance);
}

#[test]
fn oracle_feasible_and_free_step_exact() {
    check(common::stepper_limits);
}

#[test]
fn env_keeps_unit_quaternion() {
    check(common::quaternion_stays_normalized);
}
