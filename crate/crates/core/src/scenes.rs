//! Desk-scale manipulation scenes and a ground-truth environment.
//!
//! The environment detects contacts exactly and steps with the exact
//! one-step QP, so it is the unsmoothed counterpart of the planning model.

use std::sync::Arc;

use nalgebra::{DVector, Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contact::{detect_contacts, ContactSet, DistanceModel, GroundGrid, QueryPoint};
use crate::error::{Error, Result};
use crate::geometry::{exact_distance, SupportPlaneSet};
use crate::mpc::{CostWeights, MpcConfig};
use crate::state::{axis_angle, integrate, rotation_matrix, SystemState};
use crate::stepper::{qp_oracle_step, ModelParams, OracleMode};

const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSet {
    pub positions: Vec<[f64; 3]>,
    /// `[w, x, y, z]`
    pub rotations: Vec<[f64; 4]>,
    /// Replace each sampled height by the resting height of the rotated object.
    #[serde(default = "default_true")]
    pub rest_on_ground: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub object: SupportPlaneSet,
    /// Parameters the environment steps with.
    pub true_params: ModelParams,
    /// Planning parameters, fitted offline to scripted pushes in this scene.
    pub model_params: ModelParams,
    /// Starting point for learning.
    pub learning_init: ModelParams,
    pub ball_radius: f64,
    #[serde(default)]
    pub ground: Option<GroundGrid>,
    pub cutoff: f64,
    pub n_d: usize,
    pub targets: TargetSet,
    pub initial_state: SystemState,
    pub mpc: MpcConfig,
    /// Default receding-horizon length.
    pub rollout_steps: usize,
    /// Uniform control noise amplitude in the environment.
    #[serde(default)]
    pub control_noise: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("scene {}: {m}", self.name)));
        self.true_params.validate()?;
        self.model_params.validate()?;
        self.learning_init.validate()?;
        let n_r = self.initial_state.n_robot();
        if [&self.true_params, &self.model_params, &self.learning_init]
            .iter()
            .any(|p| p.n_robot() != n_r)
        {
            return bad("parameter and state robot dimensions differ".into());
        }
        self.mpc.validate(n_r)?;
        if !(self.ball_radius >= 0.0) || !(self.cutoff > 0.0) {
            return bad("ball radius and cutoff must be non-negative and positive".into());
        }
        if self.n_d < 2 || self.n_d % 2 != 0 {
            return bad("n_d must be even and at least 2".into());
        }
        if self.targets.positions.is_empty() || self.targets.rotations.is_empty() {
            return bad("target list is empty".into());
        }
        for q in &self.targets.rotations {
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return bad(format!("target quaternion norm {n}"));
            }
        }
        if let Some(g) = &self.ground {
            if !(g.pitch > 0.0) {
                return bad("ground pitch must be positive".into());
            }
        }
        let pen = self.penetration(&self.initial_state)?;
        if pen < -1e-6 {
            return bad(format!("initial state penetrates by {:.3e}", -pen));
        }
        Ok(())
    }

    pub fn n_robot(&self) -> usize {
        self.initial_state.n_robot()
    }

    pub fn vertices(&self) -> Vec<Vector3<f64>> {
        self.object.vertices()
    }

    /// Smallest signed clearance of balls and ground against the object.
    pub fn penetration(&self, state: &SystemState) -> Result<f64> {
        let mut min = f64::INFINITY;
        for k in 0..state.n_robot() / 3 {
            let x = state.to_object(&state.robot_point(k));
            let d = exact_distance(&self.object, &x)?.distance;
            let depth = if d > 0.0 {
                d
            } else {
                self.object
                    .scores(&x)
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            min = min.min(depth - self.ball_radius);
        }
        if let Some(g) = &self.ground {
            let lowest = self
                .vertices()
                .iter()
                .map(|v| state.to_world(v).z)
                .fold(f64::INFINITY, f64::min);
            min = min.min(lowest - g.height);
        }
        Ok(min)
    }

    /// Ball spheres followed by the ground lattice under the object.
    pub fn query_points(&self, state: &SystemState) -> Vec<QueryPoint> {
        let mut q: Vec<QueryPoint> = (0..state.n_robot() / 3)
            .map(|k| QueryPoint::robot_sphere(k, self.ball_radius))
            .collect();
        if let Some(g) = &self.ground {
            q.extend(g.points(state, &self.object, &self.vertices()));
        }
        q
    }

    pub fn detect(&self, state: &SystemState, model: DistanceModel) -> Result<ContactSet> {
        detect_contacts(
            state,
            &self.object,
            &self.query_points(state),
            model,
            self.cutoff,
            self.n_d,
        )
    }

    /// Height of the object origin when resting on the ground in orientation `q`.
    pub fn rest_height(&self, q: &Quaternion<f64>) -> f64 {
        let r = rotation_matrix(q);
        let ground = self.ground.map_or(0.0, |g| g.height);
        ground
            - self
                .vertices()
                .iter()
                .map(|v| (r * v).z)
                .fold(f64::INFINITY, f64::min)
    }

    /// Every target pose, position-major.
    pub fn enumerate_targets(&self) -> Vec<(Vector3<f64>, Quaternion<f64>)> {
        let mut out = Vec::new();
        for p in &self.targets.positions {
            for q in &self.targets.rotations {
                out.push(self.compose_target(p, q));
            }
        }
        out
    }

    fn compose_target(&self, p: &[f64; 3], q: &[f64; 4]) -> (Vector3<f64>, Quaternion<f64>) {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let mut pos = Vector3::from(*p);
        if self.targets.rest_on_ground && self.ground.is_some() {
            pos.z = self.rest_height(&quat);
        }
        (pos, quat)
    }

    /// Default controller configuration aimed at `target`.
    pub fn config_for(&self, target: &(Vector3<f64>, Quaternion<f64>)) -> MpcConfig {
        self.mpc.clone().with_target(target.0, &target.1)
    }
}

/// Uniform position and, independently, uniform rotation from the scene's lists.
pub fn sample_target<R: Rng>(scene: &SceneSpec, rng: &mut R) -> (Vector3<f64>, Quaternion<f64>) {
    let p = &scene.targets.positions[rng.random_range(0..scene.targets.positions.len())];
    let q = &scene.targets.rotations[rng.random_range(0..scene.targets.rotations.len())];
    scene.compose_target(p, q)
}

/// Ground-truth environment.
#[derive(Debug, Clone)]
pub struct Env {
    scene: Arc<SceneSpec>,
    state: SystemState,
    steps: usize,
    seed: u64,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(scene: SceneSpec, seed: u64) -> Result<Self> {
        Self::shared(Arc::new(scene), seed)
    }

    pub fn shared(scene: Arc<SceneSpec>, seed: u64) -> Result<Self> {
        scene.validate()?;
        Ok(Env {
            state: scene.initial_state.clone(),
            scene,
            steps: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn reset(&mut self) {
        self.state = self.scene.initial_state.clone();
        self.steps = 0;
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    pub fn reset_to(&mut self, state: SystemState) -> Result<()> {
        state.validate()?;
        if state.n_robot() != self.scene.n_robot() {
            return Err(Error::InvalidInput(
                "state robot dimension differs from the scene".into(),
            ));
        }
        self.state = state;
        Ok(())
    }

    /// Apply `u` for one step and return the new state.
    pub fn step(&mut self, u: &DVector<f64>) -> Result<SystemState> {
        let cfg = &self.scene.mpc;
        if u.len() != self.scene.n_robot() {
            return Err(Error::InvalidInput(format!(
                "control must have length {}",
                self.scene.n_robot()
            )));
        }
        for (k, x) in u.iter().enumerate() {
            if !(x.is_finite()
                && *x >= cfg.u_lb[k] - BOUND_SLACK
                && *x <= cfg.u_ub[k] + BOUND_SLACK)
            {
                return Err(Error::InvalidInput(format!(
                    "control {k} = {x} outside actuator bounds"
                )));
            }
        }
        let mut u = u.clone();
        if self.scene.control_noise > 0.0 {
            let a = self.scene.control_noise;
            for x in u.iter_mut() {
                *x += self.rng.random_range(-a..=a);
            }
        }
        let contacts = self.scene.detect(&self.state, DistanceModel::Exact)?;
        let step = qp_oracle_step(
            &self.state,
            &u,
            &self.scene.true_params,
            &contacts,
            OracleMode::Exact,
        )?;
        self.state = integrate(&self.state, &step.velocity, self.scene.true_params.h);
        self.steps += 1;
        Ok(self.state.clone())
    }
}

fn cuboid_scene(
    name: &str,
    description: &str,
    half: Vector3<f64>,
    weights: CostWeights,
    flips: &[f64],
    rollout_steps: usize,
    fitted: Fitted,
) -> SceneSpec {
    let object = SupportPlaneSet::cuboid(half);
    let n_r = 9;
    let mut true_params = ModelParams::unit(n_r, 0.3, 1000.0, 0.1);
    let m = 0.1;
    true_params.object_mass = m;
    true_params.mass_matrix = nalgebra::DMatrix::from_diagonal(&DVector::from_vec(vec![
        m,
        m,
        m,
        m * (half.y * half.y + half.z * half.z) / 3.0,
        m * (half.x * half.x + half.z * half.z) / 3.0,
        m * (half.x * half.x + half.y * half.y) / 3.0,
    ]));
    true_params.stiffness = DVector::from_element(n_r, 100.0);
    let model_params = fitted.apply(&true_params);
    let learning_init = misspecified(&true_params);

    let reach = half.x.max(half.y) + 0.03;
    let mut robot = Vec::with_capacity(n_r);
    for k in 0..3 {
        let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0 + std::f64::consts::FRAC_PI_6;
        robot.extend([reach * a.cos(), reach * a.sin(), half.z]);
    }
    let initial_state = SystemState::new(
        Vector3::new(0.0, 0.0, half.z),
        Quaternion::identity(),
        DVector::from_vec(robot),
    )
    .expect("unit quaternion");

    let quarter = std::f64::consts::FRAC_PI_4;
    let mut rotations: Vec<[f64; 4]> = [0.0, quarter, -quarter, 2.0 * quarter, -2.0 * quarter]
        .iter()
        .map(|a| quat_array(&axis_angle(Vector3::z(), *a)))
        .collect();
    rotations.extend(
        flips
            .iter()
            .map(|a| quat_array(&axis_angle(Vector3::y(), *a))),
    );
    let positions = [(0.05, 0.05), (0.05, -0.05), (-0.05, 0.05), (-0.05, -0.05)]
        .iter()
        .map(|(x, y)| [*x, *y, half.z])
        .collect();

    let mpc = MpcConfig {
        horizon: 4,
        u_lb: vec![-0.01; n_r],
        u_ub: vec![0.01; n_r],
        weights,
        target_position: [0.0, 0.0, half.z],
        target_quaternion: [1.0, 0.0, 0.0, 0.0],
        max_iters: 50,
        step_tolerance: 1e-6,
        grasp_cost_enabled: true,
    };
    SceneSpec {
        name: name.into(),
        description: description.into(),
        object,
        true_params,
        model_params,
        learning_init,
        ball_radius: 0.01,
        ground: Some(GroundGrid::default()),
        cutoff: 0.05,
        n_d: 4,
        targets: TargetSet {
            positions,
            rotations,
            rest_on_ground: true,
        },
        initial_state,
        mpc,
        rollout_steps,
        control_noise: 0.0,
    }
}

/// Learned values of the parameters the learner can change.
struct Fitted {
    mass_diagonal: [f64; 6],
    stiffness: [f64; 9],
    object_mass: f64,
    mu: f64,
    sigma: f64,
}

impl Fitted {
    fn apply(&self, base: &ModelParams) -> ModelParams {
        let mut p = base.clone();
        p.mass_matrix =
            nalgebra::DMatrix::from_diagonal(&DVector::from_row_slice(&self.mass_diagonal));
        p.stiffness = DVector::from_row_slice(&self.stiffness);
        p.object_mass = self.object_mass;
        p.mu = self.mu;
        p.sigma = self.sigma;
        p
    }
}

/// Twice the mass and inertia and an overestimated friction coefficient.
fn misspecified(truth: &ModelParams) -> ModelParams {
    let mut p = truth.clone();
    p.object_mass *= 2.0;
    p.mass_matrix *= 2.0;
    p.mu = 0.5;
    p
}

fn quat_array(q: &Quaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

fn planar_push() -> SceneSpec {
    let half = Vector3::new(0.05, 0.05, 0.02);
    let object = SupportPlaneSet::cuboid(half);
    let mut true_params = ModelParams::unit(3, 0.3, 1000.0, 0.1);
    true_params.gravity = Vector3::zeros();
    true_params.object_mass = 0.1;
    true_params.mass_matrix = nalgebra::DMatrix::from_diagonal(&DVector::from_vec(vec![
        0.1, 0.1, 0.1, 1.7e-4, 1.7e-4, 1.7e-4,
    ]));
    true_params.stiffness = DVector::from_element(3, 100.0);
    let initial_state = SystemState::new(
        Vector3::zeros(),
        Quaternion::identity(),
        DVector::from_vec(vec![-0.065, 0.0, 0.0]),
    )
    .expect("unit quaternion");
    SceneSpec {
        name: "planar-push".into(),
        description: "one ball pushing a square slab in the plane, no gravity".into(),
        object,
        model_params: true_params.clone(),
        learning_init: misspecified(&true_params),
        true_params,
        ball_radius: 0.01,
        ground: None,
        cutoff: 0.05,
        n_d: 4,
        targets: TargetSet {
            positions: vec![[0.05, 0.0, 0.0]],
            rotations: vec![[1.0, 0.0, 0.0, 0.0]],
            rest_on_ground: false,
        },
        initial_state,
        mpc: MpcConfig {
            horizon: 4,
            u_lb: vec![-0.01; 3],
            u_ub: vec![0.01; 3],
            weights: CostWeights {
                contact: 1.0,
                grasp: 0.0,
                control: 1.0,
                position: 10000.0,
                orientation: 0.0,
            },
            target_position: [0.05, 0.0, 0.0],
            target_quaternion: [1.0, 0.0, 0.0, 0.0],
            max_iters: 50,
            step_tolerance: 1e-6,
            grasp_cost_enabled: false,
        },
        rollout_steps: 50,
        control_noise: 0.0,
    }
}

/// Shipped scenes.
pub fn builtin_scenes() -> Vec<SceneSpec> {
    let w = |p: f64, q: f64| CostWeights {
        contact: 1.0,
        grasp: 0.1,
        control: 1.0,
        position: p,
        orientation: q,
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let pi = std::f64::consts::PI;
    vec![
        planar_push(),
        cuboid_scene(
            "three-ball-cube",
            "three balls moving a cube on the ground",
            Vector3::repeat(0.03),
            w(10000.0, 1000.0),
            &[half_pi, -half_pi],
            200,
            Fitted {
                mass_diagonal: [0.06029, 0.08274, 0.1399, 1.557e-4, 2.513e-4, 1.158e-4],
                stiffness: [
                    99.24, 99.97, 99.92, 98.65, 100.0, 99.76, 99.89, 96.83, 98.46,
                ],
                object_mass: 0.005555,
                mu: 0.3858,
                sigma: 572.2,
            },
        ),
        cuboid_scene(
            "three-ball-box",
            "three balls moving a flat box on the ground",
            Vector3::new(0.04, 0.03, 0.02),
            w(10000.0, 5000.0),
            &[half_pi, -half_pi],
            300,
            Fitted {
                mass_diagonal: [0.0658, 0.07262, 0.1623, 1.466e-4, 2.664e-4, 1.203e-4],
                stiffness: [
                    99.94, 100.2, 99.88, 98.92, 100.1, 99.81, 100.1, 93.79, 98.75,
                ],
                object_mass: 0.005196,
                mu: 0.4146,
                sigma: 521.4,
            },
        ),
        cuboid_scene(
            "three-ball-stick",
            "three balls moving a 4:1:1 stick on the ground",
            Vector3::new(0.06, 0.015, 0.015),
            w(500.0, 100.0),
            &[0.75 * pi, pi],
            300,
            Fitted {
                mass_diagonal: [0.1518, 0.184, 0.2179, 5.855e-5, 1.047e-4, 1.711e-4],
                stiffness: [
                    99.85, 98.16, 99.26, 99.86, 99.61, 99.11, 99.99, 93.56, 94.34,
                ],
                object_mass: 0.004319,
                mu: 0.196,
                sigma: 974.1,
            },
        ),
    ]
}

pub fn scene_by_name(name: &str) -> Result<SceneSpec> {
    builtin_scenes()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownScene(name.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_ships_required_scenes() {
        let all = builtin_scenes();
        assert!(all.len() >= 4);
        for s in &all {
            s.validate().unwrap();
            assert_eq!(s.true_params.h, 0.1);
            assert_eq!(s.mpc.horizon, 4);
            assert!(s.mpc.u_lb.iter().all(|x| *x == -0.01));
            assert!(s.mpc.u_ub.iter().all(|x| *x == 0.01));
        }
        let cube = scene_by_name("three-ball-cube").unwrap();
        let w = cube.mpc.weights;
        assert_eq!(
            [w.contact, w.grasp, w.control, w.position, w.orientation],
            [1.0, 0.1, 1.0, 10000.0, 1000.0]
        );
        assert!(matches!(scene_by_name("nope"), Err(Error::UnknownScene(n)) if n == "nope"));
    }

    #[test]
    fn cube_targets_enumerate_the_grid() {
        let cube = scene_by_name("three-ball-cube").unwrap();
        let t = cube.enumerate_targets();
        assert_eq!(t.len(), 4 * 7);
        for (p, q) in &t {
            assert!((p.x.abs() - 0.05).abs() < 1e-15 && (p.y.abs() - 0.05).abs() < 1e-15);
            assert!((p.z - 0.03).abs() < 1e-12);
            assert!((q.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_target_is_always_returned() {
        let s = scene_by_name("planar-push").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (p, q) = sample_target(&s, &mut rng);
            assert_eq!(p, Vector3::new(0.05, 0.0, 0.0));
            assert_eq!(q, Quaternion::identity());
        }
    }

    #[test]
    fn scene_json_roundtrip() {
        let s = scene_by_name("three-ball-stick").unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.name, s.name);
        assert_eq!(back.targets, s.targets);
        assert_eq!(back.object, s.object);
        let bad = text.replacen("\"cutoff\"", "\"cut_off\"", 1);
        assert!(serde_json::from_str::<SceneSpec>(&bad).is_err());
    }

    #[test]
    fn resting_cube_stays_put() {
        let mut env = Env::new(scene_by_name("three-ball-cube").unwrap(), 0).unwrap();
        let p0 = env.state().object_position;
        let zero = DVector::zeros(9);
        let s = env.step(&zero).unwrap();
        assert!((s.object_position - p0).norm() < 1e-4);
        for _ in 0..99 {
            env.step(&zero).unwrap();
        }
        assert!((env.state().object_position - p0).norm() < 1e-3);
        assert!((env.state().object_quaternion.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn free_object_falls() {
        let mut scene = scene_by_name("three-ball-cube").unwrap();
        scene.ground = None;
        scene.initial_state.robot_config.add_scalar_mut(1.0);
        let mut env = Env::new(scene, 0).unwrap();
        let z0 = env.state().object_position.z;
        let s = env.step(&DVector::zeros(9)).unwrap();
        // one step of h·g velocity, integrated over h
        assert!((z0 - s.object_position.z - 0.1 * 0.1 * 9.81).abs() < 1e-9);
    }

    #[test]
    fn pushing_a_face_moves_the_object_that_way() {
        let mut env = Env::new(scene_by_name("planar-push").unwrap(), 0).unwrap();
        let u = DVector::from_vec(vec![0.01, 0.0, 0.0]);
        for _ in 0..5 {
            env.step(&u).unwrap();
        }
        assert!(env.state().object_position.x > 0.01);
        assert!(env.state().object_position.y.abs() < 1e-9);
    }

    #[test]
    fn controls_outside_bounds_are_rejected() {
        let mut env = Env::new(scene_by_name("planar-push").unwrap(), 0).unwrap();
        assert!(env.step(&DVector::from_vec(vec![0.02, 0.0, 0.0])).is_err());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let mut scene = scene_by_name("three-ball-cube").unwrap();
        scene.control_noise = 0.002;
        let run = |seed| {
            let mut env = Env::new(scene.clone(), seed).unwrap();
            let u = DVector::from_fn(9, |k, _| if k % 3 == 0 { -0.01 } else { 0.0 });
            for _ in 0..10 {
                env.step(&u).unwrap();
            }
            env.state().clone()
        };
        assert_eq!(run(5), run(5));
    }
}
