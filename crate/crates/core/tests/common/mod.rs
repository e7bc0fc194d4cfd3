//! Randomized invariant suites shared by the property tests and the
//! acceptance report. Each case draws a seed and builds its instance from it.

#![allow(dead_code)]

use contactsdf::contact::{detect_contacts, DistanceModel};
use contactsdf::experiments::random_contact_configuration;
use contactsdf::geometry::{csdf, exact_distance, max_approx, random_polytope, random_unit};
use contactsdf::learning::{prediction_loss, Optimizer, ParamVector, Transition};
use contactsdf::mpc::{objective, solve_mpc, terminal_cost, MpcConfig};
use contactsdf::scenes::{scene_by_name, Env, SceneSpec};
use contactsdf::state::{axis_angle, orientation_error};
use contactsdf::stepper::{FrozenStep, OracleMode};
use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 128;

pub type Suite = fn() -> Result<(), String>;

fn run(check: impl Fn(&mut ChaCha8Rng) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&any::<u64>(), |seed| {
            check(&mut ChaCha8Rng::seed_from_u64(seed))
        })
        .map_err(|e| e.to_string())
}

fn ok<T, E: std::fmt::Debug>(r: std::result::Result<T, E>) -> Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(format!("{e:?}")))
}

fn cube() -> SceneSpec {
    scene_by_name("three-ball-cube").unwrap()
}

/// Smoothed distance is strictly positive and decoded parameters are
/// always admissible, including after arbitrary update sequences.
pub fn positivity() -> Result<(), String> {
    let scene = cube();
    run(|rng| {
        let n = rng.random_range(4..50);
        let planes = random_polytope(rng, n, 0.05);
        let x = random_unit(rng) * rng.random_range(0.0..0.2);
        let sigma = rng.random_range(10.0..2000.0);
        prop_assert!(csdf(&planes, &x, sigma) > 0.0);

        let n = ok(ParamVector::encode(&scene.model_params))?.len();
        let mut theta = ParamVector {
            values: DVector::from_fn(n, |_, _| rng.random_range(-12.0..6.0)),
        };
        let mut opt = Optimizer::new(n, rng.random_range(1e-3..1.0), 0.9);
        for _ in 0..5 {
            let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            theta = opt.apply(&theta, &g);
            ok(theta.decode(&scene.model_params).validate())?;
        }
        Ok(())
    })
}

/// Negating any quaternion leaves costs and losses bitwise unchanged.
pub fn double_cover() -> Result<(), String> {
    let scene = cube();
    run(|rng| {
        let (state, u) = ok(random_contact_configuration(&scene, rng))?;
        let target = axis_angle(random_unit(rng), rng.random_range(-3.0..3.0));
        let cfg = scene
            .mpc
            .clone()
            .with_target(Vector3::new(0.05, -0.05, 0.03), &target);
        let neg = scene
            .mpc
            .clone()
            .with_target(Vector3::new(0.05, -0.05, 0.03), &(-target));
        prop_assert_eq!(terminal_cost(&state, &cfg), terminal_cost(&state, &neg));
        prop_assert_eq!(
            orientation_error(&state.object_quaternion, &target),
            orientation_error(&state.object_quaternion, &(-target))
        );
        let contacts = ok(scene.detect(&state, DistanceModel::Smooth { sigma: 1000.0 }))?;
        let model = ok(FrozenStep::new(&scene.model_params, &contacts))?;
        let controls = DMatrix::from_fn(2, u.len(), |_, k| u[k]);
        prop_assert_eq!(
            ok(objective(&state, &model, &cfg, &controls))?,
            ok(objective(&state, &model, &neg, &controls))?
        );

        let mut next = state.clone();
        next.object_position.x += 1e-3;
        next.object_quaternion = axis_angle(Vector3::z(), 0.05) * state.object_quaternion;
        let t = Transition {
            state: state.clone(),
            control: u.clone(),
            next,
        };
        let mut flipped = t.clone();
        flipped.next.object_quaternion = -flipped.next.object_quaternion;
        let theta = ok(ParamVector::encode(&scene.model_params))?;
        prop_assert_eq!(
            ok(prediction_loss(&theta, &scene.model_params, &[t], &scene))?,
            ok(prediction_loss(
                &theta,
                &scene.model_params,
                &[flipped],
                &scene
            ))?
        );
        Ok(())
    })
}

/// Same seed and controls give bitwise-identical environment trajectories
/// and controller solutions.
pub fn determinism() -> Result<(), String> {
    let mut scene = cube();
    scene.control_noise = 1e-3;
    run(|rng| {
        let seed = rng.random::<u64>();
        let controls: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_fn(9, |_, _| rng.random_range(-0.009..0.009)))
            .collect();
        let mut a = ok(Env::new(scene.clone(), seed))?;
        let mut b = ok(Env::new(scene.clone(), seed))?;
        for u in &controls {
            prop_assert_eq!(ok(a.step(u))?, ok(b.step(u))?);
        }
        let state = a.state().clone();
        let contacts = ok(scene.detect(&state, DistanceModel::Smooth { sigma: 1000.0 }))?;
        let model = ok(FrozenStep::new(&scene.model_params, &contacts))?;
        let mut cfg = scene.mpc.clone();
        cfg.max_iters = 5;
        let s1 = ok(solve_mpc(&state, &model, &cfg, None))?;
        let s2 = ok(solve_mpc(&state, &model, &cfg, None))?;
        prop_assert_eq!(s1.controls, s2.controls);
        prop_assert_eq!(s1.objective.to_bits(), s2.objective.to_bits());
        Ok(())
    })
}

/// Controller output lies inside the box for random bounds and warm starts.
pub fn bound_feasibility() -> Result<(), String> {
    let scene = cube();
    run(|rng| {
        let (state, _) = ok(random_contact_configuration(&scene, rng))?;
        let contacts = ok(scene.detect(&state, DistanceModel::Smooth { sigma: 1000.0 }))?;
        let model = ok(FrozenStep::new(&scene.model_params, &contacts))?;
        let mut cfg: MpcConfig = scene.mpc.clone();
        cfg.horizon = rng.random_range(1..4);
        cfg.max_iters = 8;
        cfg.u_lb = (0..9).map(|_| -rng.random_range(0.0..0.02)).collect();
        cfg.u_ub = (0..9).map(|_| rng.random_range(0.0..0.02)).collect();
        let target = axis_angle(Vector3::z(), rng.random_range(-1.5..1.5));
        let cfg = cfg.with_target(Vector3::new(0.05, 0.05, 0.03), &target);
        let warm = DMatrix::from_fn(cfg.horizon, 9, |_, _| rng.random_range(-0.05..0.05));
        let sol = ok(solve_mpc(&state, &model, &cfg, Some(&warm)))?;
        for t in 0..cfg.horizon {
            for k in 0..9 {
                let u = sol.controls[(t, k)];
                prop_assert!(u >= cfg.u_lb[k] && u <= cfg.u_ub[k], "u[{t},{k}] = {u}");
            }
        }
        prop_assert!(sol.history.windows(2).all(|w| w[1] <= w[0]));
        Ok(())
    })
}

/// A larger cutoff keeps every contact found with a smaller one.
pub fn filter_monotonicity() -> Result<(), String> {
    let scene = cube();
    run(|rng| {
        let (mut state, _) = ok(random_contact_configuration(&scene, rng))?;
        for x in state.robot_config.iter_mut() {
            *x += rng.random_range(-0.03..0.03);
        }
        let queries = scene.query_points(&state);
        let c1 = rng.random_range(1e-3..0.08);
        let c2 = c1 + rng.random_range(0.0..0.08);
        let model = if rng.random_bool(0.5) {
            DistanceModel::Exact
        } else {
            DistanceModel::Smooth {
                sigma: rng.random_range(50.0..2000.0),
            }
        };
        let large = detect_contacts(&state, &scene.object, &queries, model, c2, 4);
        // a ball at the centre has no normal under smoothing
        prop_assume!(!matches!(
            large,
            Err(contactsdf::error::Error::DegenerateNormal { .. })
        ));
        let large = ok(large)?;
        let small = ok(detect_contacts(
            &state,
            &scene.object,
            &queries,
            model,
            c1,
            4,
        ))?;
        let kept: Vec<usize> = large.contacts.iter().map(|c| c.source).collect();
        for c in &small.contacts {
            prop_assert!(kept.contains(&c.source), "query {} dropped", c.source);
        }
        Ok(())
    })
}

/// Without friction every direction row of a contact equals its normal row.
pub fn mu_zero_collapse() -> Result<(), String> {
    let scene = cube();
    run(|rng| {
        let (state, _) = ok(random_contact_configuration(&scene, rng))?;
        let n_d = 2 * rng.random_range(1..5);
        let model = DistanceModel::Smooth {
            sigma: rng.random_range(50.0..2000.0),
        };
        let set = ok(detect_contacts(
            &state,
            &scene.object,
            &scene.query_points(&state),
            model,
            0.05,
            n_d,
        ))?;
        let rows = set.jacobian_rows(0.0);
        for (i, c) in set.contacts.iter().enumerate() {
            for j in 0..n_d {
                let r = rows.row(i * n_d + j).transpose();
                prop_assert_eq!(&r, &c.normal_row);
            }
        }
        Ok(())
    })
}

/// `|csdf - max| <= ln(I+1)/σ` and the gap shrinks as σ grows.
pub fn smooth_max_bound() -> Result<(), String> {
    run(|rng| {
        let n = rng.random_range(4..50);
        let planes = random_polytope(rng, n, 0.05);
        let x = random_unit(rng) * rng.random_range(0.06..0.3);
        let m = max_approx(&planes, &x);
        let mut last = f64::INFINITY;
        for sigma in [10.0, 50.0, 100.0, 500.0, 1000.0] {
            let gap = (csdf(&planes, &x, sigma) - m).abs();
            prop_assert!(gap <= ((n + 1) as f64).ln() / sigma + 1e-12);
            prop_assert!(gap <= last + 1e-15);
            last = gap;
        }
        Ok(())
    })
}

/// Exact distance is unchanged by a rigid motion of planes and query.
pub fn frame_invariance() -> Result<(), String> {
    run(|rng| {
        let n = rng.random_range(4..30);
        let planes = random_polytope(rng, n, 0.05);
        let x = random_unit(rng) * rng.random_range(0.0..0.3);
        let rot = Rotation3::from_scaled_axis(random_unit(rng) * rng.random_range(0.0..3.0));
        let t = random_unit(rng) * rng.random_range(0.0..1.0);
        let d0 = ok(exact_distance(&planes, &x))?.distance;
        let d1 = ok(exact_distance(
            &planes.transformed(&rot, &t),
            &(rot * x + t),
        ))?
        .distance;
        prop_assert!((d0 - d1).abs() < 1e-9, "{d0} vs {d1}");
        Ok(())
    })
}

/// Far from every constraint the smoothed step is the free step; the oracle
/// always satisfies its rows.
pub fn stepper_limits() -> Result<(), String> {
    let scene = cube();
    run(|rng| {
        let (state, u) = ok(random_contact_configuration(&scene, rng))?;
        let contacts = ok(scene.detect(&state, DistanceModel::Exact))?;
        let step = ok(FrozenStep::new(&scene.true_params, &contacts))?;
        let oracle = ok(step.oracle(&u, OracleMode::Exact))?;
        let slack = step.cone.scores(&oracle.z).max();
        prop_assert!(slack <= 1e-8, "violation {slack}");

        let sigma = step.params.sigma;
        let zq = step.query(&u);
        if step.cone.is_empty() || step.cone.scores(&zq).max() < -10.0 / sigma {
            let free = step.free_velocity(&u);
            let v = ok(step.velocity(&u))?;
            prop_assert!((&v - &free).norm() < 1e-6 * free.norm() + 1e-9);
        }
        Ok(())
    })
}

pub fn quaternion_stays_normalized() -> Result<(), String> {
    let scene = cube();
    run(|rng| {
        let mut env = ok(Env::new(scene.clone(), 0))?;
        let (state, _) = ok(random_contact_configuration(&scene, rng))?;
        ok(env.reset_to(state))?;
        for _ in 0..2 {
            let u = DVector::from_fn(9, |_, _| rng.random_range(-0.01..0.01));
            let s = ok(env.step(&u))?;
            prop_assert!((s.object_quaternion.norm() - 1.0).abs() < 1e-12);
        }
        Ok(())
    })
}

/// The families reported by the acceptance run.
pub fn acceptance_suites() -> Vec<(&'static str, Suite)> {
    vec![
        ("positivity", positivity as Suite),
        ("double-cover", double_cover),
        ("determinism", determinism),
        ("bound feasibility", bound_feasibility),
        ("filter monotonicity", filter_monotonicity),
        ("mu=0 row collapse", mu_zero_collapse),
    ]
}
