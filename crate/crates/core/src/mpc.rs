//! Receding-horizon control through an explicit step model.
//!
//! The contact cone is frozen at the initial state of each horizon, so the
//! velocity at stage `t` depends only on `u_t`. The objective is minimized by
//! single shooting with analytic gradients, a Barzilai-Borwein projected
//! gradient step and monotone backtracking under the box bounds.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::contact::{detect_contacts, DistanceModel};
use crate::error::{Error, Result};
use crate::scenes::Env;
use crate::state::{compose_exp, orientation_error, quat_to_vec, SystemState, OBJECT_DOF};
use crate::stepper::{FrozenStep, ModelParams};

/// Fingers closer than this to the object origin drop out of the grasp term.
pub const GRASP_GUARD: f64 = 1e-6;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub contact: f64,
    pub grasp: f64,
    pub control: f64,
    pub position: f64,
    pub orientation: f64,
}

impl CostWeights {
    fn validate(&self) -> Result<()> {
        let all = [
            self.contact,
            self.grasp,
            self.control,
            self.position,
            self.orientation,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidInput(
                "cost weights must be finite and non-negative".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub u_lb: Vec<f64>,
    pub u_ub: Vec<f64>,
    pub weights: CostWeights,
    pub target_position: [f64; 3],
    /// `[w, x, y, z]`
    pub target_quaternion: [f64; 4],
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop once the projected gradient's largest entry falls below this.
    #[serde(default = "default_tolerance")]
    pub step_tolerance: f64,
    #[serde(default = "default_true")]
    pub grasp_cost_enabled: bool,
}

fn default_max_iters() -> usize {
    50
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_true() -> bool {
    true
}

impl MpcConfig {
    pub fn validate(&self, n_robot: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.u_lb.len() != n_robot || self.u_ub.len() != n_robot {
            return bad(format!("control bounds must have length {n_robot}"));
        }
        if self.u_lb.iter().zip(&self.u_ub).any(|(l, u)| !(l <= u)) {
            return bad("u_lb must not exceed u_ub".into());
        }
        let qn = Vector4::from(self.target_quaternion).norm();
        if (qn - 1.0).abs() > 1e-9 {
            return bad(format!("target quaternion norm {qn} is not 1"));
        }
        if !(self.step_tolerance >= 0.0) {
            return bad("step_tolerance must be non-negative".into());
        }
        self.weights.validate()
    }

    pub fn target_quat(&self) -> Quaternion<f64> {
        let [w, x, y, z] = self.target_quaternion;
        Quaternion::new(w, x, y, z)
    }

    pub fn with_target(mut self, position: Vector3<f64>, quaternion: &Quaternion<f64>) -> Self {
        self.target_position = position.into();
        self.target_quaternion = [quaternion.w, quaternion.i, quaternion.j, quaternion.k];
        self
    }

    fn clamp(&self, controls: &mut DMatrix<f64>) {
        for t in 0..controls.nrows() {
            for k in 0..controls.ncols() {
                controls[(t, k)] = controls[(t, k)].clamp(self.u_lb[k], self.u_ub[k]);
            }
        }
    }
}

fn ball(state: &SystemState, k: usize) -> Vector3<f64> {
    state.robot_point(k)
}

/// Contact, grasp and effort terms at one stage.
pub fn path_cost(state: &SystemState, u: &DVector<f64>, config: &MpcConfig) -> f64 {
    let w = &config.weights;
    let p = state.object_position;
    let n_balls = state.n_robot() / 3;
    let mut contact = 0.0;
    let mut closure = Vector3::zeros();
    for k in 0..n_balls {
        let d = ball(state, k) - p;
        contact += d.norm_squared();
        let n = d.norm();
        if n >= GRASP_GUARD {
            closure += d / n;
        }
    }
    // the object rotation leaves ‖Σ Rᵀdₖ‖ unchanged
    let grasp = if config.grasp_cost_enabled {
        closure.norm_squared()
    } else {
        0.0
    };
    w.contact * contact + w.grasp * grasp + w.control * u.norm_squared()
}

pub fn terminal_cost(state: &SystemState, config: &MpcConfig) -> f64 {
    let w = &config.weights;
    let dp = state.object_position - Vector3::from(config.target_position);
    let c = quat_to_vec(&state.object_quaternion).dot(&Vector4::from(config.target_quaternion));
    w.position * dp.norm_squared() + w.orientation * (1.0 - c * c)
}

/// Gradient of one stage's state terms: `(∂/∂p, ∂/∂q, ∂/∂r)`.
fn path_cost_state_gradient(
    state: &SystemState,
    config: &MpcConfig,
) -> (Vector3<f64>, DVector<f64>) {
    let w = &config.weights;
    let p = state.object_position;
    let n_balls = state.n_robot() / 3;
    let mut gp = Vector3::zeros();
    let mut gr = DVector::zeros(state.n_robot());
    let mut closure = Vector3::zeros();
    for k in 0..n_balls {
        let d = ball(state, k) - p;
        let n = d.norm();
        if n >= GRASP_GUARD {
            closure += d / n;
        }
    }
    for k in 0..n_balls {
        let d = ball(state, k) - p;
        let mut g = d * (2.0 * w.contact);
        let n = d.norm();
        if config.grasp_cost_enabled && n >= GRASP_GUARD {
            let e = d / n;
            g += (Matrix3::identity() - e * e.transpose()) * closure * (2.0 * w.grasp / n);
        }
        gp -= g;
        gr.rows_mut(3 * k, 3).copy_from(&g);
    }
    (gp, gr)
}

fn terminal_cost_gradient(state: &SystemState, config: &MpcConfig) -> (Vector3<f64>, Vector4<f64>) {
    let w = &config.weights;
    let qt = Vector4::from(config.target_quaternion);
    let c = quat_to_vec(&state.object_quaternion).dot(&qt);
    (
        (state.object_position - Vector3::from(config.target_position)) * (2.0 * w.position),
        qt * (-2.0 * w.orientation * c),
    )
}

/// A one-step velocity map `u ↦ v⁺` with its control Jacobian.
pub trait StepModel: Sync {
    fn h(&self) -> f64;
    fn velocity(&self, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn velocity_and_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

impl StepModel for FrozenStep {
    fn h(&self) -> f64 {
        self.params.h
    }

    fn velocity(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        FrozenStep::velocity(self, u)
    }

    fn velocity_and_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        FrozenStep::velocity_and_jacobian(self, u)
    }
}

/// Baseline model: relaxed-complementarity solve of the one-step QP.
#[derive(Debug, Clone)]
pub struct RelaxedQpStep {
    pub step: FrozenStep,
    pub eps: f64,
}

impl StepModel for RelaxedQpStep {
    fn h(&self) -> f64 {
        self.step.params.h
    }

    fn velocity(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.step.relaxed_velocity_and_jacobian(u, self.eps)?.0)
    }

    fn velocity_and_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.step.relaxed_velocity_and_jacobian(u, self.eps)
    }
}

/// Advance `state` by `v`, also returning `∂q⁺/∂q` and `∂q⁺/∂(hω)`.
fn advance(
    state: &SystemState,
    v: &DVector<f64>,
    h: f64,
) -> (
    SystemState,
    nalgebra::Matrix4<f64>,
    nalgebra::Matrix4x3<f64>,
) {
    let omega = Vector3::new(v[3], v[4], v[5]) * h;
    let (q, dq, dphi) = compose_exp(&state.object_quaternion, &omega);
    let next = SystemState {
        object_position: state.object_position + Vector3::new(v[0], v[1], v[2]) * h,
        object_quaternion: q,
        robot_config: &state.robot_config + v.rows(OBJECT_DOF, state.n_robot()) * h,
    };
    (next, dq, dphi)
}

/// Predicted states `q_0..q_T` under a control sequence (rows are stages).
pub fn predict(
    q0: &SystemState,
    model: &dyn StepModel,
    controls: &DMatrix<f64>,
) -> Result<Vec<SystemState>> {
    let mut states = vec![q0.clone()];
    for t in 0..controls.nrows() {
        let u = controls.row(t).transpose();
        let v = model.velocity(&u)?;
        let next = advance(&states[t], &v, model.h()).0;
        states.push(next);
    }
    Ok(states)
}

pub fn objective(
    q0: &SystemState,
    model: &dyn StepModel,
    config: &MpcConfig,
    controls: &DMatrix<f64>,
) -> Result<f64> {
    let states = predict(q0, model, controls)?;
    let mut total = 0.0;
    for t in 0..controls.nrows() {
        total += path_cost(&states[t], &controls.row(t).transpose(), config);
    }
    total += terminal_cost(&states[controls.nrows()], config);
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::NonFiniteObjective)
    }
}

/// Objective and its gradient with respect to every control entry.
pub fn objective_and_gradient(
    q0: &SystemState,
    model: &dyn StepModel,
    config: &MpcConfig,
    controls: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>)> {
    let t_len = controls.nrows();
    let n_r = controls.ncols();
    let h = model.h();
    let mut states = vec![q0.clone()];
    let mut jacs = Vec::with_capacity(t_len);
    let mut quat_jacs = Vec::with_capacity(t_len);
    let mut total = 0.0;
    for t in 0..t_len {
        let u = controls.row(t).transpose();
        let (v, dv) = model.velocity_and_jacobian(&u)?;
        total += path_cost(&states[t], &u, config);
        let (next, dq, dphi) = advance(&states[t], &v, h);
        states.push(next);
        jacs.push(dv);
        quat_jacs.push((dq, dphi));
    }
    total += terminal_cost(&states[t_len], config);
    if !total.is_finite() {
        return Err(Error::NonFiniteObjective);
    }

    let (mut lp, lq4) = terminal_cost_gradient(&states[t_len], config);
    let mut lq = lq4;
    let mut lr = DVector::zeros(n_r);
    let mut grad = DMatrix::zeros(t_len, n_r);
    for t in (0..t_len).rev() {
        let (dq, dphi) = &quat_jacs[t];
        // adjoint of v_t
        let mut lv = DVector::zeros(jacs[t].nrows());
        lv.rows_mut(0, 3).copy_from(&(lp * h));
        lv.rows_mut(3, 3).copy_from(&(dphi.transpose() * lq * h));
        lv.rows_mut(OBJECT_DOF, n_r).copy_from(&(&lr * h));
        let gu = jacs[t].tr_mul(&lv) + controls.row(t).transpose() * (2.0 * config.weights.control);
        grad.row_mut(t).copy_from(&gu.transpose());
        let (gp, gr) = path_cost_state_gradient(&states[t], config);
        lp += gp;
        lq = dq.transpose() * lq;
        lr += gr;
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Best iterate after `max_iters`.
    IterationLimit,
    /// No decrease found along the projected gradient path.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// `T × n_r`, one stage per row.
    pub controls: DMatrix<f64>,
    pub predicted_states: Vec<SystemState>,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub solve_time: f64,
    pub status: SolveStatus,
    /// Objective of every accepted iterate, starting with the initial guess.
    pub history: Vec<f64>,
}

impl MpcSolution {
    pub fn first_control(&self) -> DVector<f64> {
        self.controls.row(0).transpose()
    }

    /// Controls shifted by one stage with the last repeated.
    pub fn shifted(&self) -> DMatrix<f64> {
        shift_controls(&self.controls)
    }
}

pub fn shift_controls(controls: &DMatrix<f64>) -> DMatrix<f64> {
    let t = controls.nrows();
    DMatrix::from_fn(t, controls.ncols(), |i, k| {
        controls[((i + 1).min(t - 1), k)]
    })
}

fn projected_gradient_norm(
    controls: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    config: &MpcConfig,
) -> f64 {
    let mut trial = controls - grad;
    config.clamp(&mut trial);
    (trial - controls).amax()
}

/// Minimize the horizon objective over box-bounded controls.
pub fn solve_mpc(
    q0: &SystemState,
    model: &dyn StepModel,
    config: &MpcConfig,
    warm_start: Option<&DMatrix<f64>>,
) -> Result<MpcSolution> {
    let start = Instant::now();
    let n_r = q0.n_robot();
    config.validate(n_r)?;
    let mut u = match warm_start {
        Some(w) => {
            if w.shape() != (config.horizon, n_r) {
                return Err(Error::InvalidInput(format!(
                    "warm start must be {}x{n_r}",
                    config.horizon
                )));
            }
            w.clone()
        }
        None => DMatrix::zeros(config.horizon, n_r),
    };
    config.clamp(&mut u);
    let (mut f, mut g) = objective_and_gradient(q0, model, config, &u)?;
    let initial = f;
    let mut history = vec![f];
    let span = config
        .u_lb
        .iter()
        .zip(&config.u_ub)
        .map(|(l, h)| h - l)
        .fold(0.0, f64::max);
    let mut alpha = if g.amax() > 0.0 {
        0.1 * span.max(1e-12) / g.amax()
    } else {
        1.0
    };
    let mut status = SolveStatus::IterationLimit;
    let mut iterations = 0;
    while iterations < config.max_iters {
        if projected_gradient_norm(&u, &g, config) < config.step_tolerance {
            status = SolveStatus::Converged;
            break;
        }
        let mut accepted = None;
        let mut a = alpha;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial = &u - &g * a;
            config.clamp(&mut trial);
            let step = &trial - &u;
            let decrease = step.norm_squared() / a;
            if decrease == 0.0 {
                break;
            }
            match objective(q0, model, config, &trial) {
                Ok(ft) if ft <= f - ARMIJO * decrease => {
                    accepted = Some((trial, ft));
                    break;
                }
                Ok(_) | Err(Error::NonFiniteObjective) | Err(Error::NonFiniteResult(_)) => a *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((trial, ft)) = accepted else {
            status = if projected_gradient_norm(&u, &g, config) < config.step_tolerance {
                SolveStatus::Converged
            } else {
                SolveStatus::Stalled
            };
            break;
        };
        iterations += 1;
        let (_, gt) = objective_and_gradient(q0, model, config, &trial)?;
        let s = &trial - &u;
        let y = &gt - &g;
        let sy = s.dot(&y);
        alpha = if sy > 0.0 {
            s.norm_squared() / sy
        } else {
            a * 2.0
        };
        u = trial;
        f = ft;
        g = gt;
        history.push(f);
    }
    if status == SolveStatus::IterationLimit
        && projected_gradient_norm(&u, &g, config) < config.step_tolerance
    {
        status = SolveStatus::Converged;
    }
    let predicted_states = predict(q0, model, &u)?;
    Ok(MpcSolution {
        controls: u,
        predicted_states,
        objective: f,
        initial_objective: initial,
        iterations,
        solve_time: start.elapsed().as_secs_f64(),
        status,
        history,
    })
}

/// Which step model the controller plans with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ControllerKind {
    /// Smoothed dual-cone step.
    ContactSdf,
    /// Relaxed-complementarity QP step.
    RelaxedQp { eps: f64 },
}

/// Per-step log of a receding-horizon rollout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub solve_ms: f64,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    /// Terminal cost of the real state against the goal.
    pub cost_to_goal: f64,
    pub position_error: f64,
    pub orientation_error: f64,
    pub control_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub steps: usize,
    pub terminal_position_error: f64,
    pub terminal_orientation_error: f64,
    pub mean_solve_ms: f64,
    pub initial_cost_to_goal: f64,
    pub final_cost_to_goal: f64,
    /// Sum of the per-step cost-to-goal.
    pub accumulated_cost: f64,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// `H + 1` real states.
    pub states: Vec<SystemState>,
    pub controls: Vec<DVector<f64>>,
    pub records: Vec<RolloutRecord>,
    pub metrics: RolloutMetrics,
}

fn pose_errors(state: &SystemState, config: &MpcConfig) -> (f64, f64) {
    (
        (state.object_position - Vector3::from(config.target_position)).norm(),
        orientation_error(&state.object_quaternion, &config.target_quat()),
    )
}

/// Planning model at `state`: smoothed detection, then the chosen stepper.
pub fn controller_model(
    env: &Env,
    state: &SystemState,
    params: &ModelParams,
    kind: ControllerKind,
) -> Result<Box<dyn StepModel>> {
    let scene = env.scene();
    let queries = scene.query_points(state);
    let contacts = detect_contacts(
        state,
        &scene.object,
        &queries,
        DistanceModel::Smooth {
            sigma: params.sigma,
        },
        scene.cutoff,
        scene.n_d,
    )?;
    let step = FrozenStep::new(params, &contacts)?;
    Ok(match kind {
        ControllerKind::ContactSdf => Box::new(step),
        ControllerKind::RelaxedQp { eps } => Box::new(RelaxedQpStep { step, eps }),
    })
}

/// Run `steps` rounds of plan, apply the first control, observe.
pub fn receding_horizon_rollout(
    env: &mut Env,
    params: &ModelParams,
    config: &MpcConfig,
    steps: usize,
    kind: ControllerKind,
) -> Result<Rollout> {
    config.validate(params.n_robot())?;
    let mut states = vec![env.state().clone()];
    let mut controls = Vec::with_capacity(steps);
    let mut records = Vec::with_capacity(steps);
    let mut warm: Option<DMatrix<f64>> = None;
    let initial_cost = terminal_cost(env.state(), config);
    let mut accumulated = 0.0;
    for k in 0..steps {
        let state = env.state().clone();
        let sol = controller_model(env, &state, params, kind)
            .and_then(|model| solve_mpc(&state, model.as_ref(), config, warm.as_ref()))
            .map_err(|e| e.at_step(k))?;
        if let Some(w) = &warm {
            log::trace!(
                "step {k}: warm-start objective {} ({} rows)",
                sol.initial_objective,
                w.nrows()
            );
        }
        let u = sol.first_control();
        let next = env.step(&u).map_err(|e| e.at_step(k))?;
        let (pe, oe) = pose_errors(&next, config);
        let ctg = terminal_cost(&next, config);
        accumulated += ctg;
        records.push(RolloutRecord {
            step: k,
            solve_ms: sol.solve_time * 1e3,
            objective: sol.objective,
            initial_objective: sol.initial_objective,
            iterations: sol.iterations,
            cost_to_goal: ctg,
            position_error: pe,
            orientation_error: oe,
            control_norm: u.norm(),
        });
        warm = Some(sol.shifted());
        controls.push(u);
        states.push(next);
    }
    let last = states.last().expect("rollout keeps the initial state");
    let (pe, oe) = pose_errors(last, config);
    let metrics = RolloutMetrics {
        steps,
        terminal_position_error: pe,
        terminal_orientation_error: oe,
        mean_solve_ms: if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.solve_ms).sum::<f64>() / records.len() as f64
        },
        initial_cost_to_goal: initial_cost,
        final_cost_to_goal: terminal_cost(last, config),
        accumulated_cost: accumulated,
    };
    Ok(Rollout {
        states,
        controls,
        records,
        metrics,
    })
}

/// Rollout log as CSV: step, solve_ms, objective, pose errors, control norm.
pub fn write_rollout_csv<W: Write>(out: W, records: &[RolloutRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record([
        "step",
        "solve_ms",
        "objective",
        "iterations",
        "cost_to_goal",
        "position_error",
        "orientation_error",
        "control_norm",
    ])
    .map_err(io)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.solve_ms.to_string(),
            r.objective.to_string(),
            r.iterations.to_string(),
            r.cost_to_goal.to_string(),
            r.position_error.to_string(),
            r.orientation_error.to_string(),
            r.control_norm.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
