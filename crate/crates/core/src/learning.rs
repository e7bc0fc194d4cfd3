//! Fitting model parameters to observed transitions.
//!
//! Parameters live in an unconstrained vector: logs of the mass and
//! stiffness diagonals and of the object mass, the inverse softplus of the
//! friction coefficient, and `log(σ - 10)`. The prediction loss is
//! differentiated by forward tangents through detection, the smoothed step
//! and integration, one tangent per parameter.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::{contact_sigma_tangents, DistanceModel};
use crate::error::{Error, Result};
use crate::mpc::{receding_horizon_rollout, ControllerKind, Rollout};
use crate::scenes::{sample_target, Env, SceneSpec};
use crate::state::{compose_exp, quat_to_vec, SystemState, OBJECT_DOF};
use crate::stepper::{velocity_tangents, ModelParams, StepPerturbation};

/// Lower limit of σ enforced by the parameterization.
/// Coordinates are clamped to ±this before decoding.
pub const LOG_BOUND: f64 = 20.0;
pub const SIGMA_FLOOR: f64 = 10.0;
pub const DEFAULT_BUFFER_CAPACITY: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: SystemState,
    #[serde(with = "dvector_serde")]
    pub control: DVector<f64>,
    pub next: SystemState,
}

mod dvector_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct TransitionBuffer {
    entries: VecDeque<Transition>,
    capacity: usize,
}

impl TransitionBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        TransitionBuffer {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
    }

    pub fn extend_from_rollout(&mut self, rollout: &Rollout) {
        for (k, u) in rollout.controls.iter().enumerate() {
            self.push(Transition {
                state: rollout.states[k].clone(),
                control: u.clone(),
                next: rollout.states[k + 1].clone(),
            });
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    pub fn to_vec(&self) -> Vec<Transition> {
        self.entries.iter().cloned().collect()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unconstrained coordinates of the learnable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    #[serde(with = "dvector_serde")]
    pub values: DVector<f64>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn n_robot(&self) -> usize {
        self.values.len() - OBJECT_DOF - 3
    }

    /// Encode the diagonal of the mass matrix with the other learnable fields.
    pub fn encode(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        if !(params.sigma > SIGMA_FLOOR) {
            return Err(Error::InvalidParams(format!(
                "sigma must exceed {SIGMA_FLOOR} to be learned"
            )));
        }
        if params.mu <= 0.0 {
            return Err(Error::InvalidParams(
                "mu must be positive to be learned".into(),
            ));
        }
        let n_r = params.n_robot();
        let mut v = DVector::zeros(OBJECT_DOF + n_r + 3);
        for j in 0..OBJECT_DOF {
            v[j] = params.mass_matrix[(j, j)].ln();
        }
        for k in 0..n_r {
            v[OBJECT_DOF + k] = params.stiffness[k].ln();
        }
        let base = OBJECT_DOF + n_r;
        v[base] = params.object_mass.ln();
        v[base + 1] = softplus_inv(params.mu);
        v[base + 2] = (params.sigma - SIGMA_FLOOR).ln();
        Ok(ParamVector { values: v })
    }

    /// Parameters with the learnable fields replaced; `h`, `τ_r` and gravity
    /// come from `base`, and the mass matrix is diagonal.
    pub fn decode(&self, base: &ModelParams) -> ModelParams {
        let n_r = self.n_robot();
        let mut p = base.clone();
        let e = |k: usize| self.values[k].clamp(-LOG_BOUND, LOG_BOUND).exp();
        p.mass_matrix = DMatrix::from_diagonal(&DVector::from_fn(OBJECT_DOF, |j, _| e(j)));
        p.stiffness = DVector::from_fn(n_r, |k, _| e(OBJECT_DOF + k));
        let b = OBJECT_DOF + n_r;
        p.object_mass = e(b);
        p.mu = softplus(self.values[b + 1].clamp(-LOG_BOUND, LOG_BOUND));
        p.sigma = SIGMA_FLOOR + e(b + 2);
        p
    }
}

fn check_batch(batch: &[Transition]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::InvalidInput("batch must not be empty".into()))
    } else {
        Ok(())
    }
}

/// Squared pose error between a predicted and an observed state.
pub fn transition_error(pred: &SystemState, real: &SystemState) -> f64 {
    let c = quat_to_vec(&pred.object_quaternion).dot(&quat_to_vec(&real.object_quaternion));
    (pred.object_position - real.object_position).norm_squared()
        + (&pred.robot_config - &real.robot_config).norm_squared()
        + (1.0 - c * c)
}

/// One-step prediction with smoothed detection and the smoothed step.
pub fn predict_next(
    scene: &SceneSpec,
    params: &ModelParams,
    state: &SystemState,
    u: &DVector<f64>,
) -> Result<SystemState> {
    let contacts = scene.detect(
        state,
        DistanceModel::Smooth {
            sigma: params.sigma,
        },
    )?;
    let rows = contacts.jacobian_rows(params.mu);
    let (v, _) = velocity_tangents(
        &params.inv_sqrt_q()?,
        &params.force(u),
        &rows,
        &contacts.row_phis(),
        params.sigma,
        params.h,
        &[],
    )?;
    Ok(crate::state::integrate(state, &v, params.h))
}

fn transition_loss(scene: &SceneSpec, params: &ModelParams, t: &Transition) -> Result<f64> {
    Ok(transition_error(
        &predict_next(scene, params, &t.state, &t.control)?,
        &t.next,
    ))
}

fn mean_ordered(values: Vec<f64>) -> f64 {
    let n = values.len() as f64;
    values.into_iter().sum::<f64>() / n
}

/// Mean one-step prediction error over `batch`.
pub fn prediction_loss(
    theta: &ParamVector,
    base: &ModelParams,
    batch: &[Transition],
    scene: &SceneSpec,
) -> Result<f64> {
    check_batch(batch)?;
    let params = theta.decode(base);
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|t| transition_loss(scene, &params, t))
        .collect::<Result<_>>()?;
    let loss = mean_ordered(losses);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss)
    }
}

/// Loss of one transition and its gradient in parameter-vector coordinates.
fn transition_loss_gradient(
    scene: &SceneSpec,
    theta: &ParamVector,
    params: &ModelParams,
    t: &Transition,
) -> Result<(f64, DVector<f64>)> {
    let n_r = params.n_robot();
    let dim = params.dim();
    let np = theta.len();
    let state = &t.state;
    let u = &t.control;
    let queries = scene.query_points(state);
    let contacts = crate::contact::detect_contacts(
        state,
        &scene.object,
        &queries,
        DistanceModel::Smooth {
            sigma: params.sigma,
        },
        scene.cutoff,
        scene.n_d,
    )?;
    let rows = contacts.jacobian_rows(params.mu);
    let phis = contacts.row_phis();
    let sq = params.inv_sqrt_q()?;
    let force = params.force(u);
    let n_rows = rows.nrows();

    let mut dirs = Vec::with_capacity(np);
    for j in 0..OBJECT_DOF {
        let mut d = StepPerturbation::zeros(n_rows, dim);
        // only diagonal mass matrices are learned, so Q^{-1/2} is diagonal
        d.inv_sqrt_q[(j, j)] = -0.5 * sq[(j, j)];
        dirs.push(d);
    }
    for k in 0..n_r {
        let mut d = StepPerturbation::zeros(n_rows, dim);
        let i = OBJECT_DOF + k;
        d.inv_sqrt_q[(i, i)] = -0.5 * sq[(i, i)];
        d.force[i] = params.stiffness[k] * u[k];
        dirs.push(d);
    }
    let b = OBJECT_DOF + n_r;
    let mut d = StepPerturbation::zeros(n_rows, dim);
    for k in 0..3 {
        d.force[k] = params.object_mass * params.gravity[k];
    }
    dirs.push(d);
    let mut d = StepPerturbation::zeros(n_rows, dim);
    d.rows =
        (contacts.jacobian_rows(1.0) - contacts.jacobian_rows(0.0)) * sigmoid(theta.values[b + 1]);
    dirs.push(d);
    let dsigma = theta.values[b + 2].exp();
    let mut d = StepPerturbation::zeros(n_rows, dim);
    d.sigma = dsigma;
    let tang = contact_sigma_tangents(state, &scene.object, &queries, &contacts, params.sigma);
    for (i, ct) in tang.iter().enumerate() {
        for j in 0..contacts.n_d {
            let r = i * contacts.n_d + j;
            let drow = (&ct.dnormal_row - &ct.dtangent_rows[j] * params.mu) * dsigma;
            d.rows.row_mut(r).copy_from(&drow.transpose());
            d.row_phis[r] = ct.dphi * dsigma;
        }
    }
    dirs.push(d);

    let (v, dv) = velocity_tangents(&sq, &force, &rows, &phis, params.sigma, params.h, &dirs)?;
    let h = params.h;
    let omega = Vector3::new(v[3], v[4], v[5]) * h;
    let (q, _, dphi) = compose_exp(&state.object_quaternion, &omega);
    let p = state.object_position + Vector3::new(v[0], v[1], v[2]) * h;
    let r = &state.robot_config + v.rows(OBJECT_DOF, n_r) * h;
    let ep = p - t.next.object_position;
    let er = &r - &t.next.robot_config;
    let qr: Vector4<f64> = quat_to_vec(&t.next.object_quaternion);
    let c = quat_to_vec(&q).dot(&qr);
    let loss = ep.norm_squared() + er.norm_squared() + (1.0 - c * c);
    let gq = dphi.transpose() * qr * (-2.0 * c);
    let mut grad = DVector::zeros(np);
    for (k, dvk) in dv.iter().enumerate() {
        let lin = Vector3::new(dvk[0], dvk[1], dvk[2]);
        let ang = Vector3::new(dvk[3], dvk[4], dvk[5]);
        grad[k] =
            h * (2.0 * ep.dot(&lin) + 2.0 * er.dot(&dvk.rows(OBJECT_DOF, n_r)) + gq.dot(&ang));
    }
    Ok((loss, grad))
}

/// Loss and analytic gradient with respect to the parameter vector.
pub fn loss_gradient(
    theta: &ParamVector,
    base: &ModelParams,
    batch: &[Transition],
    scene: &SceneSpec,
) -> Result<(f64, DVector<f64>)> {
    check_batch(batch)?;
    let params = theta.decode(base);
    let parts: Vec<(f64, DVector<f64>)> = batch
        .par_iter()
        .map(|t| transition_loss_gradient(scene, theta, &params, t))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = DVector::zeros(theta.len());
    for (l, g) in parts {
        loss += l;
        grad += g;
    }
    loss /= n;
    grad /= n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok((loss, grad))
}

/// Central finite-difference gradient of [`prediction_loss`].
pub fn loss_gradient_fd(
    theta: &ParamVector,
    base: &ModelParams,
    batch: &[Transition],
    scene: &SceneSpec,
    step: f64,
) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(theta.len());
    for k in 0..theta.len() {
        let mut plus = theta.clone();
        plus.values[k] += step;
        let mut minus = theta.clone();
        minus.values[k] -= step;
        g[k] = (prediction_loss(&plus, base, batch, scene)?
            - prediction_loss(&minus, base, batch, scene)?)
            / (2.0 * step);
    }
    if g.iter().all(|x| x.is_finite()) {
        Ok(g)
    } else {
        Err(Error::NonFiniteGradient)
    }
}

/// Heavy-ball gradient descent state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: DVector<f64>,
}

impl Optimizer {
    pub fn new(n: usize, learning_rate: f64, momentum: f64) -> Self {
        Optimizer {
            learning_rate,
            momentum,
            velocity: DVector::zeros(n),
        }
    }

    pub fn reset(&mut self) {
        self.velocity.fill(0.0);
    }

    /// One update from a precomputed gradient.
    pub fn apply(&mut self, theta: &ParamVector, grad: &DVector<f64>) -> ParamVector {
        self.velocity = &self.velocity * self.momentum - grad * self.learning_rate;
        ParamVector {
            values: &theta.values + &self.velocity,
        }
    }
}

/// One momentum step on the batch loss. Returns the new vector and the loss
/// at `theta`.
pub fn update_step(
    theta: &ParamVector,
    base: &ModelParams,
    batch: &[Transition],
    scene: &SceneSpec,
    optimizer: &mut Optimizer,
) -> Result<(ParamVector, f64)> {
    if !(optimizer.learning_rate > 0.0) {
        return Err(Error::InvalidInput("learning rate must be positive".into()));
    }
    let (loss, grad) = loss_gradient(theta, base, batch, scene)?;
    Ok((optimizer.apply(theta, &grad), loss))
}

/// Transitions from a scripted controller that drives every ball toward a
/// randomly offset point of the object, with bounded noise.
pub fn scripted_push_batch(
    env: &mut Env,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<Transition>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lb, ub) = (env.scene().mpc.u_lb.clone(), env.scene().mpc.u_ub.clone());
    let mut batch = Vec::with_capacity(episodes * steps);
    for _ in 0..episodes {
        env.reset();
        let offset = Vector3::new(
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            0.0,
        );
        for _ in 0..steps {
            let s = env.state().clone();
            let aim = s.object_position + offset;
            let mut u = DVector::zeros(s.n_robot());
            for k in 0..s.n_robot() / 3 {
                let d = aim - s.robot_point(k);
                for a in 0..3 {
                    let i = 3 * k + a;
                    u[i] = (0.5 * d[a] + rng.random_range(-0.005..0.005)).clamp(lb[i], ub[i]);
                }
            }
            let next = env.step(&u)?;
            batch.push(Transition {
                state: s,
                control: u,
                next,
            });
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnConfig {
    pub rollouts: usize,
    pub rollout_steps: usize,
    #[serde(default = "default_update_every")]
    pub update_every: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    /// Divide the loss by its value at the initial parameters before
    /// differentiating, so the learning rate is scale-free.
    #[serde(default = "default_true")]
    pub normalize_loss: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_update_every() -> usize {
    4
}

fn default_epochs() -> usize {
    50
}

fn default_momentum() -> f64 {
    0.9
}

fn default_capacity() -> usize {
    DEFAULT_BUFFER_CAPACITY
}

fn default_true() -> bool {
    true
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_every == 0 || self.buffer_capacity == 0 {
            return Err(Error::InvalidInput(
                "update_every and buffer_capacity must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput(
                "learning_rate must be positive and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LearningCurves {
    /// Buffer loss after each update round, over the loss at the initial
    /// parameters on the same buffer.
    pub loss: Vec<f64>,
    /// Accumulated cost-to-goal per rollout, over the first rollout's.
    pub cost: Vec<f64>,
    /// Raw loss before and after each round.
    pub raw_loss: Vec<(f64, f64)>,
    pub env_steps: usize,
}

impl LearningCurves {
    pub fn write_loss_csv<W: Write>(&self, out: W) -> Result<()> {
        write_curve(out, "update_idx", "loss_norm", &self.loss)
    }

    pub fn write_cost_csv<W: Write>(&self, out: W) -> Result<()> {
        write_curve(out, "rollout_idx", "cost_norm", &self.cost)
    }
}

fn write_curve<W: Write>(out: W, index: &str, value: &str, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record([index, value]).map_err(io)?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub params: ModelParams,
    pub theta: ParamVector,
    pub curves: LearningCurves,
    pub buffer: TransitionBuffer,
}

/// Alternate controller rollouts with the current parameters and update
/// rounds on the transition buffer.
pub fn on_mpc_training(
    env: &mut Env,
    initial: &ModelParams,
    config: &LearnConfig,
) -> Result<TrainingResult> {
    config.validate()?;
    let mut theta = ParamVector::encode(initial)?;
    let mut params = initial.clone();
    let mut buffer = TransitionBuffer::new(config.buffer_capacity);
    let mut curves = LearningCurves::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(theta.len(), config.learning_rate, config.momentum);
    let mut first_cost = None;
    let initial_theta = theta.clone();
    let scene = env.scene().clone();
    for r in 0..config.rollouts {
        env.reset();
        let target = sample_target(&scene, &mut rng);
        let cfg = scene.config_for(&target);
        let rollout = receding_horizon_rollout(
            env,
            &params,
            &cfg,
            config.rollout_steps,
            ControllerKind::ContactSdf,
        )
        .map_err(|e| e.at_step(curves.env_steps))?;
        curves.env_steps += rollout.controls.len();
        let cost = rollout.metrics.accumulated_cost;
        let norm = *first_cost.get_or_insert(if cost > 0.0 { cost } else { 1.0 });
        curves.cost.push(cost / norm);
        buffer.extend_from_rollout(&rollout);

        if (r + 1) % config.update_every != 0 || buffer.is_empty() {
            continue;
        }
        let batch = buffer.to_vec();
        let reference = prediction_loss(&initial_theta, initial, &batch, &scene)?;
        let start = prediction_loss(&theta, initial, &batch, &scene)?;
        let scale = if config.normalize_loss && reference > 0.0 {
            1.0 / reference
        } else {
            1.0
        };
        optimizer.reset();
        let mut best = (start, theta.clone());
        for _ in 0..config.epochs {
            let (loss, grad) = loss_gradient(&theta, initial, &batch, &scene)?;
            if loss < best.0 {
                best = (loss, theta.clone());
            }
            theta = optimizer.apply(&theta, &(grad * scale));
        }
        let end = prediction_loss(&theta, initial, &batch, &scene)?;
        if end < best.0 {
            best = (end, theta.clone());
        }
        theta = best.1;
        params = theta.decode(initial);
        curves.raw_loss.push((start, best.0));
        curves.loss.push(if reference > 0.0 {
            best.0 / reference
        } else {
            0.0
        });
        log::info!(
            "round {}: loss {:.3e} -> {:.3e} (initial params {:.3e}), mu {:.3}, sigma {:.1}",
            curves.loss.len(),
            start,
            best.0,
            reference,
            params.mu,
            params.sigma
        );
    }
    Ok(TrainingResult {
        params,
        theta,
        curves,
        buffer,
    })
}

/// Fit parameters on a fixed batch; returns the best vector and per-epoch losses.
pub fn fit_batch(
    theta: &ParamVector,
    base: &ModelParams,
    batch: &[Transition],
    scene: &SceneSpec,
    epochs: usize,
    learning_rate: f64,
    momentum: f64,
) -> Result<(ParamVector, Vec<f64>)> {
    let reference = prediction_loss(theta, base, batch, scene)?;
    let scale = if reference > 0.0 {
        1.0 / reference
    } else {
        1.0
    };
    let mut opt = Optimizer::new(theta.len(), learning_rate, momentum);
    let mut current = theta.clone();
    let mut best = (reference, theta.clone());
    let mut history = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        let (loss, grad) = loss_gradient(&current, base, batch, scene)?;
        history.push(loss);
        if loss < best.0 {
            best = (loss, current.clone());
        }
        current = opt.apply(&current, &(grad * scale));
    }
    let end = prediction_loss(&current, base, batch, scene)?;
    history.push(end);
    if end < best.0 {
        best = (end, current);
    }
    Ok((best.1, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::scene_by_name;
    use nalgebra::Quaternion;

    fn fixture() -> (SceneSpec, Vec<Transition>) {
        let scene = scene_by_name("three-ball-cube").unwrap();
        let mut env = Env::new(scene.clone(), 1).unwrap();
        let mut batch = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        for _ in 0..6 {
            let s = env.state().clone();
            let u = DVector::from_fn(9, |_, _| rng.random_range(-0.01..0.01));
            let next = env.step(&u).unwrap();
            batch.push(Transition {
                state: s,
                control: u,
                next,
            });
        }
        (scene, batch)
    }

    #[test]
    fn encode_decode_roundtrip() {
        let scene = scene_by_name("three-ball-cube").unwrap();
        let p = &scene.model_params;
        let back = ParamVector::encode(p).unwrap().decode(p);
        assert!((&back.mass_matrix - &p.mass_matrix).amax() < 1e-10);
        assert!((&back.stiffness - &p.stiffness).amax() < 1e-10);
        assert!((back.mu - p.mu).abs() < 1e-10);
        assert!((back.sigma - p.sigma).abs() < 1e-10);
        assert!((back.object_mass - p.object_mass).abs() < 1e-10);
    }

    #[test]
    fn any_vector_decodes_to_valid_params() {
        let scene = scene_by_name("three-ball-cube").unwrap();
        let mut theta = ParamVector::encode(&scene.model_params).unwrap();
        theta.values.fill(-15.0);
        theta.decode(&scene.model_params).validate().unwrap();
        theta.values.fill(3.0);
        theta.decode(&scene.model_params).validate().unwrap();
    }

    #[test]
    fn self_generated_batch_has_zero_loss() {
        let (scene, batch) = fixture();
        let p = &scene.model_params;
        let own: Vec<Transition> = batch
            .iter()
            .map(|t| Transition {
                next: predict_next(&scene, p, &t.state, &t.control).unwrap(),
                ..t.clone()
            })
            .collect();
        let theta = ParamVector::encode(p).unwrap();
        assert!(prediction_loss(&theta, p, &own, &scene).unwrap() < 1e-12);
        let still: Vec<Transition> = batch
            .iter()
            .map(|t| Transition {
                next: t.state.clone(),
                ..t.clone()
            })
            .collect();
        assert!(prediction_loss(&theta, p, &still, &scene).unwrap() > 0.0);
        assert!(prediction_loss(&theta, p, &[], &scene).is_err());
    }

    #[test]
    fn loss_is_sign_invariant_in_quaternions() {
        let (scene, batch) = fixture();
        let p = &scene.model_params;
        let theta = ParamVector::encode(p).unwrap();
        let flipped: Vec<Transition> = batch
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.next.object_quaternion = -t.next.object_quaternion;
                t.state.object_quaternion = -t.state.object_quaternion;
                t
            })
            .collect();
        let a = prediction_loss(&theta, p, &batch, &scene).unwrap();
        let b = prediction_loss(&theta, p, &flipped, &scene).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (scene, batch) = fixture();
        let mut p = scene.model_params.clone();
        p.sigma = 300.0;
        p.object_mass = 0.03;
        let theta = ParamVector::encode(&p).unwrap();
        let (_, g) = loss_gradient(&theta, &p, &batch, &scene).unwrap();
        let fd = loss_gradient_fd(&theta, &p, &batch, &scene, 1e-5).unwrap();
        let err = (&g - &fd).amax() / fd.amax();
        assert!(err < 1e-3, "{err}\n{g}\n{fd}");
    }

    #[test]
    fn buffer_evicts_oldest() {
        let s =
            SystemState::new(Vector3::zeros(), Quaternion::identity(), DVector::zeros(0)).unwrap();
        let mut b = TransitionBuffer::new(3);
        for k in 0..5 {
            let mut t = Transition {
                state: s.clone(),
                control: DVector::from_element(1, k as f64),
                next: s.clone(),
            };
            t.control[0] = k as f64;
            b.push(t);
        }
        assert_eq!(b.len(), 3);
        let first = b.iter().next().unwrap();
        assert_eq!(first.control[0], 2.0);
    }

    #[test]
    fn zero_rollouts_keep_initial_params() {
        let scene = scene_by_name("three-ball-cube").unwrap();
        let mut env = Env::new(scene.clone(), 0).unwrap();
        let cfg = LearnConfig {
            rollouts: 0,
            rollout_steps: 10,
            update_every: 4,
            epochs: 5,
            learning_rate: 0.1,
            momentum: 0.9,
            buffer_capacity: 400,
            normalize_loss: true,
            seed: 0,
        };
        let r = on_mpc_training(&mut env, &scene.model_params, &cfg).unwrap();
        assert_eq!(r.params, scene.model_params);
        assert!(r.curves.loss.is_empty() && r.curves.cost.is_empty());
    }
}
