//! Quasi-dynamic time stepping.
//!
//! The one-step problem `min ½h²vᵀQv - h bᵀv  s.t.  J v + φ/h >= 0` becomes a
//! Euclidean projection of `z_q = Q^{-1/2} b` onto the dual cone
//! `{z : nᵀz + b <= 0}` under `z = h Q^{1/2} v`. [`step_velocity`] replaces
//! that projection by the smoothed step `z_q - f ∇f`, and
//! [`qp_oracle_step`] solves it exactly or with relaxed complementarity.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::contact::ContactSet;
use crate::error::{Error, Result};
use crate::projection::{kkt_residuals, project, project_relaxed, KktResiduals};
use crate::smooth::SmoothMax;
use crate::state::{SystemState, OBJECT_DOF};

pub use crate::state::integrate;

/// Rows whose scaled Jacobian norm falls below this are dropped.
pub const DEGENERATE_ROW_TOL: f64 = 1e-10;
const EIGEN_TOL: f64 = 1e-10;
const ORACLE_MAX_ITER: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsDoc", into = "ParamsDoc")]
pub struct ModelParams {
    /// Regularized object mass matrix over the 6-dim twist.
    pub mass_matrix: DMatrix<f64>,
    /// Diagonal of the robot stiffness `K_r`.
    pub stiffness: DVector<f64>,
    pub object_mass: f64,
    pub mu: f64,
    pub sigma: f64,
    pub h: f64,
    pub tau_r: DVector<f64>,
    pub gravity: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    mass_matrix: Vec<Vec<f64>>,
    stiffness: Vec<f64>,
    object_mass: f64,
    mu: f64,
    sigma: f64,
    h: f64,
    #[serde(default)]
    tau_r: Option<Vec<f64>>,
    #[serde(default = "default_gravity")]
    gravity: [f64; 3],
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

impl TryFrom<ParamsDoc> for ModelParams {
    type Error = Error;
    fn try_from(d: ParamsDoc) -> Result<Self> {
        if d.mass_matrix.len() != OBJECT_DOF || d.mass_matrix.iter().any(|r| r.len() != OBJECT_DOF)
        {
            return Err(Error::InvalidParams("mass_matrix must be 6x6".into()));
        }
        let n_r = d.stiffness.len();
        let p = ModelParams {
            mass_matrix: DMatrix::from_fn(OBJECT_DOF, OBJECT_DOF, |i, j| d.mass_matrix[i][j]),
            stiffness: DVector::from_vec(d.stiffness),
            object_mass: d.object_mass,
            mu: d.mu,
            sigma: d.sigma,
            h: d.h,
            tau_r: d
                .tau_r
                .map(DVector::from_vec)
                .unwrap_or_else(|| DVector::zeros(n_r)),
            gravity: Vector3::from(d.gravity),
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<ModelParams> for ParamsDoc {
    fn from(p: ModelParams) -> Self {
        ParamsDoc {
            mass_matrix: (0..OBJECT_DOF)
                .map(|i| (0..OBJECT_DOF).map(|j| p.mass_matrix[(i, j)]).collect())
                .collect(),
            stiffness: p.stiffness.iter().copied().collect(),
            object_mass: p.object_mass,
            mu: p.mu,
            sigma: p.sigma,
            h: p.h,
            tau_r: Some(p.tau_r.iter().copied().collect()),
            gravity: [p.gravity.x, p.gravity.y, p.gravity.z],
        }
    }
}

impl ModelParams {
    /// Identity mass matrix and stiffness, unit object mass.
    pub fn unit(n_robot: usize, mu: f64, sigma: f64, h: f64) -> Self {
        ModelParams {
            mass_matrix: DMatrix::identity(OBJECT_DOF, OBJECT_DOF),
            stiffness: DVector::from_element(n_robot, 1.0),
            object_mass: 1.0,
            mu,
            sigma,
            h,
            tau_r: DVector::zeros(n_robot),
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }

    pub fn n_robot(&self) -> usize {
        self.stiffness.len()
    }

    pub fn dim(&self) -> usize {
        OBJECT_DOF + self.n_robot()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.into()));
        if self.mass_matrix.shape() != (OBJECT_DOF, OBJECT_DOF) {
            return bad("mass_matrix must be 6x6");
        }
        if (&self.mass_matrix - self.mass_matrix.transpose()).amax()
            > 1e-9 * self.mass_matrix.amax().max(1.0)
        {
            return bad("mass_matrix must be symmetric");
        }
        if !self.mass_matrix.iter().all(|x| x.is_finite()) {
            return bad("mass_matrix must be finite");
        }
        let min_eig = self.mass_matrix.clone().symmetric_eigenvalues().min();
        if !(min_eig > EIGEN_TOL) {
            return bad("mass_matrix must be positive definite");
        }
        if !self.stiffness.iter().all(|k| k.is_finite() && *k > 0.0) {
            return bad("stiffness entries must be positive");
        }
        if self.tau_r.len() != self.n_robot() {
            return bad("tau_r length must match stiffness");
        }
        if !(self.object_mass > 0.0 && self.object_mass.is_finite()) {
            return bad("object_mass must be positive");
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be non-negative");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad("h must be positive");
        }
        if !self.gravity.iter().all(|g| g.is_finite()) || !self.tau_r.iter().all(|t| t.is_finite())
        {
            return bad("gravity and tau_r must be finite");
        }
        Ok(())
    }

    /// `b(u) = [m_o g, 0, K_r u + τ_r]`.
    pub fn force(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut b = DVector::zeros(self.dim());
        for k in 0..3 {
            b[k] = self.object_mass * self.gravity[k];
        }
        for k in 0..self.n_robot() {
            b[OBJECT_DOF + k] = self.stiffness[k] * u[k] + self.tau_r[k];
        }
        b
    }

    /// `Q^{-1/2}`, computed blockwise.
    pub fn inv_sqrt_q(&self) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let mut s = DMatrix::zeros(n, n);
        let obj = inv_sqrt_spd(&self.mass_matrix)? * self.h;
        s.view_mut((0, 0), (OBJECT_DOF, OBJECT_DOF)).copy_from(&obj);
        for k in 0..self.n_robot() {
            s[(OBJECT_DOF + k, OBJECT_DOF + k)] = 1.0 / self.stiffness[k].sqrt();
        }
        Ok(s)
    }
}

/// `A^{-1/2}` of a symmetric positive-definite matrix.
pub fn inv_sqrt_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = a.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| !(*l > EIGEN_TOL)) {
        return Err(Error::InvalidParams(
            "matrix is not positive definite".into(),
        ));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `Q = diag(M_o/h², K_r)` and `b(u)`.
pub fn assemble_q_b(params: &ModelParams, u: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = params.dim();
    let mut q = DMatrix::zeros(n, n);
    q.view_mut((0, 0), (OBJECT_DOF, OBJECT_DOF))
        .copy_from(&(&params.mass_matrix / (params.h * params.h)));
    for k in 0..params.n_robot() {
        q[(OBJECT_DOF + k, OBJECT_DOF + k)] = params.stiffness[k];
    }
    (q, params.force(u))
}

/// Admissible scaled velocities `{z : nᵀz + b <= 0}`, one row per
/// contact and friction direction.
#[derive(Debug, Clone)]
pub struct DualCone {
    /// Unit row normals, `rows × dim`.
    pub normals: DMatrix<f64>,
    pub offsets: DVector<f64>,
    /// Index of each kept row in the contact set's row order.
    pub source_rows: Vec<usize>,
}

impl DualCone {
    pub fn empty(dim: usize) -> Self {
        DualCone {
            normals: DMatrix::zeros(0, dim),
            offsets: DVector::zeros(0),
            source_rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn scores(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.normals * z + &self.offsets
    }
}

/// Cone from raw constraint rows `J v + φ/h >= 0`:
/// `n = -Q^{-1/2}Jᵀ/‖·‖`, `b = -φ/‖·‖`.
pub fn dual_cone_from_rows(
    rows: &DMatrix<f64>,
    phis: &DVector<f64>,
    inv_sqrt_q: &DMatrix<f64>,
) -> DualCone {
    let dim = inv_sqrt_q.nrows();
    let scaled = -(inv_sqrt_q * rows.transpose());
    let mut keep = Vec::new();
    for i in 0..rows.nrows() {
        let norm = scaled.column(i).norm();
        if norm < DEGENERATE_ROW_TOL {
            log::warn!("dropping degenerate contact row {i} (scaled norm {norm:.3e})");
        } else {
            keep.push((i, norm));
        }
    }
    let mut normals = DMatrix::zeros(keep.len(), dim);
    let mut offsets = DVector::zeros(keep.len());
    for (r, &(i, norm)) in keep.iter().enumerate() {
        normals
            .row_mut(r)
            .copy_from(&(scaled.column(i) / norm).transpose());
        offsets[r] = -phis[i] / norm;
    }
    DualCone {
        normals,
        offsets,
        source_rows: keep.into_iter().map(|(i, _)| i).collect(),
    }
}

pub fn build_dual_cone(contacts: &ContactSet, inv_sqrt_q: &DMatrix<f64>, mu: f64) -> DualCone {
    dual_cone_from_rows(
        &contacts.jacobian_rows(mu),
        &contacts.row_phis(),
        inv_sqrt_q,
    )
}

/// Smoothed distance to the dual cone with its derivatives.
#[derive(Debug, Clone)]
pub struct DsdfEval {
    pub scores: Vec<f64>,
    pub smooth: Option<SmoothMax>,
    pub gradient: DVector<f64>,
}

impl DsdfEval {
    pub fn new(cone: &DualCone, z: &DVector<f64>, sigma: f64) -> Self {
        if cone.is_empty() {
            return DsdfEval {
                scores: Vec::new(),
                smooth: None,
                gradient: DVector::zeros(z.len()),
            };
        }
        let scores: Vec<f64> = cone.scores(z).iter().copied().collect();
        let smooth = SmoothMax::new(&scores, sigma);
        let w = DVector::from_column_slice(&smooth.weights);
        let gradient = cone.normals.tr_mul(&w);
        DsdfEval {
            scores,
            smooth: Some(smooth),
            gradient,
        }
    }

    pub fn value(&self) -> f64 {
        self.smooth.as_ref().map_or(0.0, |s| s.value)
    }

    /// `σ (Σ wᵢ nᵢnᵢᵀ - ∇f ∇fᵀ)`.
    pub fn hessian(&self, cone: &DualCone) -> DMatrix<f64> {
        let n = self.gradient.len();
        let Some(sm) = &self.smooth else {
            return DMatrix::zeros(n, n);
        };
        let mut h = -&self.gradient * self.gradient.transpose();
        for (i, w) in sm.weights.iter().enumerate() {
            let r = cone.normals.row(i).transpose();
            h.ger(*w, &r, &r, 1.0);
        }
        h * sm.sigma
    }

    /// `z - f ∇f`.
    pub fn corrected(&self, z: &DVector<f64>) -> DVector<f64> {
        z - &self.gradient * self.value()
    }
}

/// Smoothed distance from `z` to the cone; exactly 0 for an empty cone.
pub fn dsdf(cone: &DualCone, z: &DVector<f64>, sigma: f64) -> f64 {
    DsdfEval::new(cone, z, sigma).value()
}

pub fn dsdf_gradient(cone: &DualCone, z: &DVector<f64>, sigma: f64) -> DVector<f64> {
    DsdfEval::new(cone, z, sigma).gradient
}

fn check_finite(v: DVector<f64>) -> Result<DVector<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFiniteResult("step velocity"))
    }
}

/// Smoothed step with the cone frozen; reusable for many controls.
#[derive(Debug, Clone)]
pub struct FrozenStep {
    pub params: ModelParams,
    pub inv_sqrt_q: DMatrix<f64>,
    pub cone: DualCone,
}

impl FrozenStep {
    pub fn new(params: &ModelParams, contacts: &ContactSet) -> Result<Self> {
        params.validate()?;
        if contacts.dim != params.dim() {
            return Err(Error::InvalidInput(format!(
                "contact rows span {} velocities, params {}",
                contacts.dim,
                params.dim()
            )));
        }
        let inv_sqrt_q = params.inv_sqrt_q()?;
        let cone = build_dual_cone(contacts, &inv_sqrt_q, params.mu);
        Ok(FrozenStep {
            params: params.clone(),
            inv_sqrt_q,
            cone,
        })
    }

    pub fn with_cone(params: &ModelParams, cone: DualCone) -> Result<Self> {
        params.validate()?;
        Ok(FrozenStep {
            params: params.clone(),
            inv_sqrt_q: params.inv_sqrt_q()?,
            cone,
        })
    }

    pub fn query(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.inv_sqrt_q * self.params.force(u)
    }

    /// Unconstrained `Q⁻¹b/h`.
    pub fn free_velocity(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.inv_sqrt_q * self.query(u) / self.params.h
    }

    pub fn velocity(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.query(u);
        let eval = DsdfEval::new(&self.cone, &z, self.params.sigma);
        check_finite(&self.inv_sqrt_q * eval.corrected(&z) / self.params.h)
    }

    /// `v⁺` and `∂v⁺/∂u`.
    pub fn velocity_and_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let h = self.params.h;
        let z = self.query(u);
        let eval = DsdfEval::new(&self.cone, &z, self.params.sigma);
        let v = check_finite(&self.inv_sqrt_q * eval.corrected(&z) / h)?;
        let n = z.len();
        let g = &eval.gradient;
        let dz =
            DMatrix::identity(n, n) - g * g.transpose() - eval.hessian(&self.cone) * eval.value();
        let jac = &self.inv_sqrt_q * dz * self.query_jacobian() / h;
        if !jac.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteResult("step velocity jacobian"));
        }
        Ok((v, jac))
    }

    /// `∂z_q/∂u = Q^{-1/2} ∂b/∂u`.
    pub fn query_jacobian(&self) -> DMatrix<f64> {
        let n_r = self.params.n_robot();
        let mut db = DMatrix::zeros(self.params.dim(), n_r);
        for k in 0..n_r {
            db[(OBJECT_DOF + k, k)] = self.params.stiffness[k];
        }
        &self.inv_sqrt_q * db
    }
}

/// Next velocity under the smoothed contact model.
pub fn step_velocity(
    state: &SystemState,
    u: &DVector<f64>,
    params: &ModelParams,
    contacts: &ContactSet,
) -> Result<DVector<f64>> {
    check_control(state, u, params)?;
    FrozenStep::new(params, contacts)?.velocity(u)
}

/// `∂v⁺/∂u` of [`step_velocity`].
pub fn step_velocity_jacobian(
    state: &SystemState,
    u: &DVector<f64>,
    params: &ModelParams,
    contacts: &ContactSet,
) -> Result<DMatrix<f64>> {
    check_control(state, u, params)?;
    Ok(FrozenStep::new(params, contacts)?
        .velocity_and_jacobian(u)?
        .1)
}

fn check_control(state: &SystemState, u: &DVector<f64>, params: &ModelParams) -> Result<()> {
    if state.n_robot() != params.n_robot() || u.len() != params.n_robot() {
        return Err(Error::InvalidInput(format!(
            "robot dimension mismatch: state {}, params {}, control {}",
            state.n_robot(),
            params.n_robot(),
            u.len()
        )));
    }
    if !u.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput("control must be finite".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMode {
    Exact,
    /// Complementarity relaxed to `λ s = eps` in the scaled space.
    Relaxed {
        eps: f64,
    },
}

#[derive(Debug, Clone)]
pub struct OracleStep {
    pub velocity: DVector<f64>,
    /// Solution in the scaled space.
    pub z: DVector<f64>,
    pub multipliers: DVector<f64>,
    /// Residuals of the scaled-space projection conditions.
    pub kkt: KktResiduals,
    pub iterations: usize,
}

impl FrozenStep {
    pub fn oracle(&self, u: &DVector<f64>, mode: OracleMode) -> Result<OracleStep> {
        let zq = self.query(u);
        let (z, lambda, iterations) = match mode {
            OracleMode::Exact => {
                let p = project(&self.cone.normals, &self.cone.offsets, &zq, ORACLE_MAX_ITER)
                    .map_err(internal_infeasible)?;
                (p.point, p.multipliers, p.iterations)
            }
            OracleMode::Relaxed { eps } => {
                let p = project_relaxed(
                    &self.cone.normals,
                    &self.cone.offsets,
                    &zq,
                    eps,
                    ORACLE_MAX_ITER,
                )
                .map_err(internal_infeasible)?;
                (p.point, p.multipliers, p.iterations)
            }
        };
        let kkt = kkt_residuals(&self.cone.normals, &self.cone.offsets, &zq, &z, &lambda);
        Ok(OracleStep {
            velocity: check_finite(&self.inv_sqrt_q * &z / self.params.h)?,
            z,
            multipliers: lambda,
            kkt,
            iterations,
        })
    }

    /// Relaxed solve with `∂v⁺/∂u` from the relaxed KKT system.
    pub fn relaxed_velocity_and_jacobian(
        &self,
        u: &DVector<f64>,
        eps: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let zq = self.query(u);
        let p = project_relaxed(
            &self.cone.normals,
            &self.cone.offsets,
            &zq,
            eps,
            ORACLE_MAX_ITER,
        )
        .map_err(internal_infeasible)?;
        let h = self.params.h;
        let v = check_finite(&self.inv_sqrt_q * &p.point / h)?;
        let jac =
            &self.inv_sqrt_q * p.jacobian_wrt_query(&self.cone.normals) * self.query_jacobian() / h;
        Ok((v, jac))
    }
}

fn internal_infeasible(e: Error) -> Error {
    match e {
        Error::InfeasibleConstraints => Error::SolverFailure(
            "contact cone reported infeasible; this indicates corrupted rows".into(),
        ),
        e => e,
    }
}

/// Reference step: exact (or relaxed) solution of the one-step QP.
pub fn qp_oracle_step(
    state: &SystemState,
    u: &DVector<f64>,
    params: &ModelParams,
    contacts: &ContactSet,
    mode: OracleMode,
) -> Result<OracleStep> {
    check_control(state, u, params)?;
    FrozenStep::new(params, contacts)?.oracle(u, mode)
}

/// Parameter perturbation for [`velocity_tangents`].
#[derive(Debug, Clone)]
pub struct StepPerturbation {
    pub inv_sqrt_q: DMatrix<f64>,
    pub force: DVector<f64>,
    /// Perturbation of the raw constraint rows `J_{i,j}`.
    pub rows: DMatrix<f64>,
    pub row_phis: DVector<f64>,
    pub sigma: f64,
}

impl StepPerturbation {
    pub fn zeros(n_rows: usize, dim: usize) -> Self {
        StepPerturbation {
            inv_sqrt_q: DMatrix::zeros(dim, dim),
            force: DVector::zeros(dim),
            rows: DMatrix::zeros(n_rows, dim),
            row_phis: DVector::zeros(n_rows),
            sigma: 0.0,
        }
    }
}

/// Smoothed step from raw rows, and its directional derivatives along each
/// perturbation. Degenerate rows are treated as absent in both.
#[allow(clippy::too_many_arguments)]
pub fn velocity_tangents(
    inv_sqrt_q: &DMatrix<f64>,
    force: &DVector<f64>,
    rows: &DMatrix<f64>,
    row_phis: &DVector<f64>,
    sigma: f64,
    h: f64,
    directions: &[StepPerturbation],
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    let cone = dual_cone_from_rows(rows, row_phis, inv_sqrt_q);
    let zq = inv_sqrt_q * force;
    let eval = DsdfEval::new(&cone, &zq, sigma);
    let zplus = eval.corrected(&zq);
    let v = check_finite(inv_sqrt_q * &zplus / h)?;
    let f = eval.value();
    let mut out = Vec::with_capacity(directions.len());
    for d in directions {
        let dzq = &d.inv_sqrt_q * force + inv_sqrt_q * &d.force;
        let mut dzplus = dzq.clone();
        if let Some(sm) = &eval.smooth {
            let m = cone.len();
            let mut dn = DMatrix::zeros(m, zq.len());
            let mut ds = vec![0.0; m];
            for (r, &i) in cone.source_rows.iter().enumerate() {
                let a = -(inv_sqrt_q * rows.row(i).transpose());
                let da = -(&d.inv_sqrt_q * rows.row(i).transpose()
                    + inv_sqrt_q * d.rows.row(i).transpose());
                let nu = a.norm();
                let n = &a / nu;
                let dnu = n.dot(&da);
                let dni = (&da - &n * dnu) / nu;
                let db = -d.row_phis[i] / nu + row_phis[i] * dnu / (nu * nu);
                ds[r] = dni.dot(&zq) + n.dot(&dzq) + db;
                dn.row_mut(r).copy_from(&dni.transpose());
            }
            let df = sm.value_tangent(&eval.scores, &ds, d.sigma);
            let dw = DVector::from_vec(sm.weight_tangent(&eval.scores, &ds, d.sigma));
            let w = DVector::from_column_slice(&sm.weights);
            let dg = cone.normals.tr_mul(&dw) + dn.tr_mul(&w);
            dzplus -= &eval.gradient * df + dg * f;
        }
        out.push((&d.inv_sqrt_q * &zplus + inv_sqrt_q * dzplus) / h);
    }
    Ok((v, out))
}

/// One row of a step trace log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTraceRow {
    pub step: usize,
    pub position: [f64; 3],
    pub quaternion: [f64; 4],
    pub robot: Vec<f64>,
    pub control: Vec<f64>,
    pub n_contacts: usize,
    pub min_phi: f64,
    pub velocity: Vec<f64>,
    pub seconds: f64,
}

impl StepTraceRow {
    pub fn new(
        step: usize,
        state: &SystemState,
        u: &DVector<f64>,
        contacts: &ContactSet,
        velocity: &DVector<f64>,
        seconds: f64,
    ) -> Self {
        let q = state.object_quaternion;
        StepTraceRow {
            step,
            position: state.object_position.into(),
            quaternion: [q.w, q.i, q.j, q.k],
            robot: state.robot_config.iter().copied().collect(),
            control: u.iter().copied().collect(),
            n_contacts: contacts.len(),
            min_phi: contacts.phis().into_iter().fold(f64::INFINITY, f64::min),
            velocity: velocity.iter().copied().collect(),
            seconds,
        }
    }

    fn header(n_robot: usize, dim: usize) -> Vec<String> {
        let mut h: Vec<String> = ["step", "px", "py", "pz", "qw", "qx", "qy", "qz"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..n_robot).map(|k| format!("r{k}")));
        h.extend((0..n_robot).map(|k| format!("u{k}")));
        h.push("n_contacts".into());
        h.push("min_phi".into());
        h.extend((0..dim).map(|k| format!("v{k}")));
        h.push("seconds".into());
        h
    }

    fn fields(&self) -> Vec<String> {
        let mut f = vec![self.step.to_string()];
        f.extend(
            self.position
                .iter()
                .chain(&self.quaternion)
                .map(|x| x.to_string()),
        );
        f.extend(
            self.robot
                .iter()
                .chain(&self.control)
                .map(|x| x.to_string()),
        );
        f.push(self.n_contacts.to_string());
        f.push(self.min_phi.to_string());
        f.extend(self.velocity.iter().map(|x| x.to_string()));
        f.push(self.seconds.to_string());
        f
    }
}

/// Writes rows to a CSV sink; the header is emitted only when `with_header`.
pub fn write_step_trace<W: Write>(out: W, rows: &[StepTraceRow], with_header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let (true, Some(first)) = (with_header, rows.first()) {
        w.write_record(StepTraceRow::header(
            first.robot.len(),
            first.velocity.len(),
        ))
        .map_err(csv_error)?;
    }
    for r in rows {
        w.write_record(r.fields()).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends to a trace file, writing the header if the file is new or empty.
pub fn append_step_trace(path: &std::path::Path, rows: &[StepTraceRow]) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    write_step_trace(file, rows, fresh)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Wall time of `f` in seconds, with its output.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{detect_contacts, DistanceModel, GroundGrid, QueryPoint};
    use crate::geometry::SupportPlaneSet;
    use nalgebra::Quaternion;

    fn resting_cube(height: f64) -> (SystemState, SupportPlaneSet, Vec<QueryPoint>) {
        let planes = SupportPlaneSet::cuboid(Vector3::repeat(0.05));
        let s = SystemState::new(
            Vector3::new(0.0, 0.0, 0.05 + height),
            Quaternion::identity(),
            DVector::from_vec(vec![0.5, 0.5, 0.5]),
        )
        .unwrap();
        let grid = GroundGrid {
            pitch: 0.05,
            ..GroundGrid::default()
        };
        let q = grid.points(&s, &planes, &planes.vertices());
        (s, planes, q)
    }

    #[test]
    fn q_and_b_blocks() {
        let p = ModelParams::unit(3, 0.5, 100.0, 0.1);
        let (q, b) = assemble_q_b(&p, &DVector::zeros(3));
        let mut expect = DMatrix::identity(9, 9) * 100.0;
        for k in 6..9 {
            expect[(k, k)] = 1.0;
        }
        assert!((q - expect).amax() < 1e-12);
        assert_eq!(
            b.as_slice(),
            &[0.0, 0.0, -9.81, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        let mut p2 = p.clone();
        p2.stiffness *= 2.0;
        let u = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let (q1, b1) = assemble_q_b(&p, &u);
        let (q2, b2) = assemble_q_b(&p2, &u);
        assert_eq!(q2[(7, 7)], 2.0 * q1[(7, 7)]);
        assert_eq!(b2[7], 2.0 * b1[7]);
    }

    #[test]
    fn inv_sqrt_matches_blocks() {
        let mut p = ModelParams::unit(3, 0.5, 100.0, 0.1);
        p.mass_matrix[(0, 1)] = 0.3;
        p.mass_matrix[(1, 0)] = 0.3;
        p.stiffness[1] = 4.0;
        let (q, _) = assemble_q_b(&p, &DVector::zeros(3));
        let s = p.inv_sqrt_q().unwrap();
        let id = &s * q * &s;
        assert!((id - DMatrix::identity(9, 9)).amax() < 1e-10);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = ModelParams::unit(3, 0.5, 100.0, 0.1);
        p.mass_matrix[(2, 2)] = -1.0;
        assert!(matches!(p.validate(), Err(Error::InvalidParams(_))));
        let mut p = ModelParams::unit(3, -0.1, 100.0, 0.1);
        assert!(p.validate().is_err());
        p.mu = 0.1;
        p.stiffness[0] = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn params_json_roundtrip() {
        let p = ModelParams::unit(3, 0.4, 250.0, 0.1);
        let text = serde_json::to_string(&p).unwrap();
        let back: ModelParams = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
        let bad = text.replace("\"mu\"", "\"friction\"");
        assert!(serde_json::from_str::<ModelParams>(&bad).is_err());
    }

    #[test]
    fn dual_cone_examples() {
        let mut rows = DMatrix::zeros(1, 4);
        rows[(0, 0)] = 1.0;
        let phis = DVector::from_vec(vec![0.2]);
        let c = dual_cone_from_rows(&rows, &phis, &DMatrix::identity(4, 4));
        assert_eq!(
            c.normals.row(0).transpose(),
            DVector::from_vec(vec![-1.0, 0.0, 0.0, 0.0])
        );
        assert!((c.offsets[0] + 0.2).abs() < 1e-15);
        let s = inv_sqrt_spd(&(DMatrix::identity(4, 4) * 4.0)).unwrap();
        let c = dual_cone_from_rows(&rows, &phis, &s);
        assert!((c.normals[(0, 0)] + 1.0).abs() < 1e-15);
        assert!((c.offsets[0] + 0.4).abs() < 1e-12);
        let empty = dual_cone_from_rows(&DMatrix::zeros(0, 4), &DVector::zeros(0), &s);
        assert!(empty.is_empty());
        let zero = dual_cone_from_rows(&DMatrix::zeros(1, 4), &phis, &s);
        assert!(zero.is_empty());
    }

    #[test]
    fn dsdf_examples() {
        let z = DVector::from_vec(vec![-1.0, 0.0]);
        assert_eq!(dsdf(&DualCone::empty(2), &z, 10.0), 0.0);
        let cone = DualCone {
            normals: DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]),
            offsets: DVector::from_vec(vec![-0.2]),
            source_rows: vec![0],
        };
        assert!((dsdf(&cone, &z, 500.0) - 0.8).abs() < 1e-3);
    }

    #[test]
    fn free_fall_and_free_robot() {
        let p = ModelParams::unit(3, 0.5, 1000.0, 0.1);
        let s =
            SystemState::new(Vector3::zeros(), Quaternion::identity(), DVector::zeros(3)).unwrap();
        let none = ContactSet::empty(9, 4);
        let v = step_velocity(&s, &DVector::zeros(3), &p, &none).unwrap();
        let expect = [0.0, 0.0, -0.981, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let u = DVector::from_vec(vec![0.01, 0.0, 0.0]);
        let v = step_velocity(&s, &u, &p, &none).unwrap();
        assert!((v[6] - 0.1).abs() < 1e-12);
        let o = qp_oracle_step(&s, &u, &p, &none, OracleMode::Exact).unwrap();
        assert!((o.velocity - v).amax() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = ModelParams::unit(3, 0.5, 1000.0, 0.1);
        let s =
            SystemState::new(Vector3::zeros(), Quaternion::identity(), DVector::zeros(3)).unwrap();
        let none = ContactSet::empty(9, 4);
        assert!(step_velocity(&s, &DVector::zeros(2), &p, &none).is_err());
    }

    #[test]
    fn nan_params_surface_as_errors() {
        let mut p = ModelParams::unit(3, 0.5, 1000.0, 0.1);
        p.gravity.z = f64::NAN;
        let s =
            SystemState::new(Vector3::zeros(), Quaternion::identity(), DVector::zeros(3)).unwrap();
        assert!(step_velocity(&s, &DVector::zeros(3), &p, &ContactSet::empty(9, 4)).is_err());
    }

    #[test]
    fn single_halfspace_oracle_matches_closed_form() {
        let mut rows = DMatrix::zeros(1, 9);
        rows[(0, 2)] = 1.0;
        let phis = DVector::from_vec(vec![0.01]);
        let p = ModelParams::unit(3, 0.0, 1000.0, 0.1);
        let s = p.inv_sqrt_q().unwrap();
        let step = FrozenStep::with_cone(&p, dual_cone_from_rows(&rows, &phis, &s)).unwrap();
        let o = step.oracle(&DVector::zeros(3), OracleMode::Exact).unwrap();
        // object may fall only by φ within the step: v_z = -φ/h
        assert!((o.velocity[2] + 0.1).abs() < 1e-12);
        assert!(o.kkt.max() < 1e-12);
    }

    #[test]
    fn falling_cube_on_ground() {
        let (s, planes, q) = resting_cube(0.0);
        let p = ModelParams::unit(3, 0.5, 1000.0, 0.1);
        let c = detect_contacts(&s, &planes, &q, DistanceModel::Exact, 0.05, 4).unwrap();
        assert_eq!(c.len(), 4);
        let o = qp_oracle_step(&s, &DVector::zeros(3), &p, &c, OracleMode::Exact).unwrap();
        assert!(o.velocity.rows(0, 6).amax() < 1e-9, "{}", o.velocity);
        assert!(o.kkt.max() < 1e-8);
        let v = step_velocity(&s, &DVector::zeros(3), &p, &c).unwrap();
        // the smoothed step removes most but not all of the fall
        assert!(v[2] > -0.981 && v[2] < 0.0);
    }

    #[test]
    fn velocity_jacobian_matches_finite_differences() {
        let (s, planes, mut q) = resting_cube(0.002);
        q.push(QueryPoint::robot_sphere(0, 0.01));
        let mut s = s;
        s.robot_config = DVector::from_vec(vec![0.062, 0.01, 0.05]);
        let p = ModelParams::unit(3, 0.4, 300.0, 0.1);
        let c = detect_contacts(
            &s,
            &planes,
            &q,
            DistanceModel::Smooth { sigma: 300.0 },
            0.05,
            4,
        )
        .unwrap();
        let fs = FrozenStep::new(&p, &c).unwrap();
        let u = DVector::from_vec(vec![-0.004, 0.002, 0.001]);
        let (_, jac) = fs.velocity_and_jacobian(&u).unwrap();
        let eps = 1e-6;
        for k in 0..3 {
            let mut up = u.clone();
            up[k] += eps;
            let mut um = u.clone();
            um[k] -= eps;
            let fd = (fs.velocity(&up).unwrap() - fs.velocity(&um).unwrap()) / (2.0 * eps);
            let err = (&fd - jac.column(k)).amax() / fd.amax().max(1e-8);
            assert!(err < 1e-4, "column {k}: {err}");
        }
    }

    #[test]
    fn relaxed_oracle_approaches_exact() {
        let (s, planes, mut q) = resting_cube(0.001);
        q.push(QueryPoint::robot_sphere(0, 0.01));
        let mut s = s;
        s.robot_config = DVector::from_vec(vec![0.065, 0.0, 0.05]);
        let p = ModelParams::unit(3, 0.5, 1000.0, 0.1);
        let c = detect_contacts(&s, &planes, &q, DistanceModel::Exact, 0.05, 4).unwrap();
        let fs = FrozenStep::new(&p, &c).unwrap();
        let u = DVector::from_vec(vec![-0.01, 0.0, 0.0]);
        let exact = fs.oracle(&u, OracleMode::Exact).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1e-2, 1e-3, 1e-4] {
            let r = fs.oracle(&u, OracleMode::Relaxed { eps }).unwrap();
            let err = (&r.velocity - &exact.velocity).amax();
            assert!(err < last, "eps {eps}: {err} >= {last}");
            last = err;
        }
    }

    #[test]
    fn tangents_match_finite_differences() {
        let (s, planes, mut q) = resting_cube(0.003);
        q.push(QueryPoint::robot_sphere(0, 0.01));
        let mut s = s;
        s.robot_config = DVector::from_vec(vec![0.063, 0.01, 0.04]);
        let p = ModelParams::unit(3, 0.4, 200.0, 0.1);
        let c = detect_contacts(
            &s,
            &planes,
            &q,
            DistanceModel::Smooth { sigma: 200.0 },
            0.05,
            4,
        )
        .unwrap();
        let u = DVector::from_vec(vec![-0.005, 0.001, 0.0]);
        let rows = c.jacobian_rows(p.mu);
        let phis = c.row_phis();
        let sq = p.inv_sqrt_q().unwrap();
        let b = p.force(&u);

        let mut dir = StepPerturbation::zeros(rows.nrows(), 9);
        dir.inv_sqrt_q[(0, 0)] = 0.3;
        dir.inv_sqrt_q[(7, 7)] = -0.2;
        dir.force[2] = 0.5;
        dir.rows = c.jacobian_rows(1.0) - c.jacobian_rows(0.0);
        dir.row_phis = DVector::from_fn(rows.nrows(), |i, _| 0.01 * (i as f64).sin());
        dir.sigma = 20.0;
        let (_, dv) = velocity_tangents(
            &sq,
            &b,
            &rows,
            &phis,
            p.sigma,
            p.h,
            std::slice::from_ref(&dir),
        )
        .unwrap();
        let eps = 1e-6;
        let eval = |t: f64| {
            velocity_tangents(
                &(&sq + &dir.inv_sqrt_q * t),
                &(&b + &dir.force * t),
                &(&rows + &dir.rows * t),
                &(&phis + &dir.row_phis * t),
                p.sigma + dir.sigma * t,
                p.h,
                &[],
            )
            .unwrap()
            .0
        };
        let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let err = (&fd - &dv[0]).amax() / fd.amax();
        assert!(err < 1e-5, "{err}\n{fd}\n{}", dv[0]);
    }

    #[test]
    fn trace_csv_has_header_once() {
        let dir = std::env::temp_dir().join(format!("trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        let _ = std::fs::remove_file(&path);
        let s =
            SystemState::new(Vector3::zeros(), Quaternion::identity(), DVector::zeros(3)).unwrap();
        let row = StepTraceRow::new(
            0,
            &s,
            &DVector::zeros(3),
            &ContactSet::empty(9, 4),
            &DVector::zeros(9),
            0.0,
        );
        append_step_trace(&path, std::slice::from_ref(&row)).unwrap();
        append_step_trace(&path, &[row]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("step,px"));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
