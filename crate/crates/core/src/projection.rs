//! Euclidean projection onto a polyhedron `{y : A y + b <= 0}` in any dimension.
//!
//! [`project`] is the exact dual active-set method (Goldfarb-Idnani with an
//! identity Hessian). It starts from the unconstrained minimizer `y = x`,
//! so it needs no feasible starting point and detects empty polyhedra.
//! [`project_relaxed`] solves the same problem with the complementarity
//! conditions relaxed to `λ_i s_i = ε`, by primal-dual Newton iterations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Projection {
    pub point: DVector<f64>,
    /// One multiplier per row; zero for rows outside the final active set.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

impl Projection {
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        (x - &self.point).norm()
    }
}

/// Residuals of the projection KKT system
/// `y - x + Aᵀλ = 0, A y + b <= 0, λ >= 0, λ ∘ (A y + b) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(
    normals: &DMatrix<f64>,
    offsets: &DVector<f64>,
    x: &DVector<f64>,
    point: &DVector<f64>,
    multipliers: &DVector<f64>,
) -> KktResiduals {
    let stat = point - x + normals.transpose() * multipliers;
    let g = normals * point + offsets;
    KktResiduals {
        stationarity: stat.amax(),
        primal: g.iter().copied().fold(0.0, f64::max),
        dual: multipliers.iter().map(|l| -l).fold(0.0, f64::max),
        complementarity: g
            .iter()
            .zip(multipliers.iter())
            .map(|(g, l)| (g * l).abs())
            .fold(0.0, f64::max),
    }
}

const FEAS_TOL: f64 = 1e-12;

/// Exact projection of `x` onto `{y : normals * y + offsets <= 0}`.
///
/// `max_iter` bounds the number of add/drop steps.
pub fn project(
    normals: &DMatrix<f64>,
    offsets: &DVector<f64>,
    x: &DVector<f64>,
    max_iter: usize,
) -> Result<Projection> {
    let (m, n) = normals.shape();
    assert_eq!(offsets.len(), m, "offsets must match the number of rows");
    assert_eq!(x.len(), n, "query dimension must match the row dimension");

    let row_norms: Vec<f64> = (0..m).map(|i| normals.row(i).norm()).collect();
    let scale = 1.0 + x.amax() + offsets.amax();

    let mut y = x.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;

    loop {
        // most violated inactive constraint, measured as a distance
        let mut best: Option<(usize, f64)> = None;
        for i in 0..m {
            if row_norms[i] == 0.0 || active.contains(&i) {
                continue;
            }
            let viol = (normals.row(i).dot(&y.transpose()) + offsets[i]) / row_norms[i];
            if viol > FEAS_TOL * scale && best.is_none_or(|(_, v)| viol > v) {
                best = Some((i, viol));
            }
        }
        let Some((p, _)) = best else {
            break;
        };

        let c_p: DVector<f64> = -normals.row(p).transpose();
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::IterationLimit(max_iter));
            }
            let (z, r) = step_directions(normals, &active, &c_p);

            // partial (dual) step: first active multiplier to reach zero
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, (&uj, &rj)) in u.iter().zip(r.iter()).enumerate() {
                if rj > 1e-14 {
                    let t = uj / rj;
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            // full (primal) step: makes constraint p active
            let zc = z.dot(&c_p);
            let t2 = if z.norm_squared() > 1e-24 * c_p.norm_squared().max(1.0) && zc > 0.0 {
                let s_p = normals.row(p).dot(&y.transpose()) + offsets[p];
                (s_p / zc).max(0.0)
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                return Err(Error::InfeasibleConstraints);
            }
            let t = t1.min(t2);
            for (uj, rj) in u.iter_mut().zip(r.iter()) {
                *uj -= t * rj;
            }
            u_p += t;
            if t2.is_finite() {
                y += &z * t;
            }
            if t2 <= t1 {
                active.push(p);
                u.push(u_p);
                break;
            }
            let k = drop.expect("finite partial step has a blocking index");
            active.remove(k);
            u.remove(k);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (&i, &ui) in active.iter().zip(&u) {
        multipliers[i] = ui.max(0.0);
    }
    Ok(Projection {
        point: y,
        multipliers,
        active,
        iterations,
    })
}

/// Primal direction `z = (I - N N⁺) c` and dual direction `r = N⁺ c`
/// for the active constraint columns `N = [-a_j]`.
fn step_directions(
    normals: &DMatrix<f64>,
    active: &[usize],
    c: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    if active.is_empty() {
        return (c.clone(), DVector::zeros(0));
    }
    let n = normals.ncols();
    let cols = DMatrix::from_fn(n, active.len(), |r, k| -normals[(active[k], r)]);
    let qr = cols.qr();
    let q = qr.q();
    let qtc = q.transpose() * c;
    let z = c - &q * &qtc;
    let r = qr
        .r()
        .solve_upper_triangular(&qtc)
        .unwrap_or_else(|| DVector::zeros(active.len()));
    (z, r)
}

#[derive(Debug, Clone)]
pub struct RelaxedProjection {
    pub point: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub slacks: DVector<f64>,
    pub iterations: usize,
}

impl RelaxedProjection {
    /// `∂point/∂x = (I + Aᵀ diag(λ/s) A)⁻¹` at the relaxed solution.
    pub fn jacobian_wrt_query(&self, normals: &DMatrix<f64>) -> DMatrix<f64> {
        let n = normals.ncols();
        let h = reduced_matrix(normals, &self.multipliers, &self.slacks);
        h.cholesky()
            .map(|c| c.inverse())
            .unwrap_or_else(|| DMatrix::identity(n, n))
    }
}

fn reduced_matrix(normals: &DMatrix<f64>, lambda: &DVector<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let n = normals.ncols();
    let mut h = DMatrix::identity(n, n);
    for i in 0..normals.nrows() {
        let w = lambda[i] / s[i];
        let a = normals.row(i);
        h.ger(w, &a.transpose(), &a.transpose(), 1.0);
    }
    h
}

/// Projection with complementarity relaxed to `λ_i s_i = eps`, where
/// `s = -(A y + b)` is the constraint slack.
pub fn project_relaxed(
    normals: &DMatrix<f64>,
    offsets: &DVector<f64>,
    x: &DVector<f64>,
    eps: f64,
    max_iter: usize,
) -> Result<RelaxedProjection> {
    assert!(eps > 0.0, "relaxation must be positive");
    let (m, _) = normals.shape();
    let mut y = x.clone();
    if m == 0 {
        return Ok(RelaxedProjection {
            point: y,
            multipliers: DVector::zeros(0),
            slacks: DVector::zeros(0),
            iterations: 0,
        });
    }
    let g0 = normals * &y + offsets;
    let mut s = g0.map(|g| (-g).max(1.0));
    let mut lambda = DVector::from_element(m, 1.0);
    let at = normals.transpose();

    for it in 1..=max_iter {
        let r_d = &y - x + &at * &lambda;
        let r_p = normals * &y + offsets + &s;
        let mu = lambda.dot(&s) / m as f64;
        let tau = if mu < 2.0 * eps {
            eps
        } else {
            eps.max(0.1 * mu)
        };
        let r_c = lambda.component_mul(&s).add_scalar(-tau);

        let comp_err = lambda
            .component_mul(&s)
            .iter()
            .map(|v| (v - eps).abs())
            .fold(0.0, f64::max);
        if r_d.amax() < 1e-12 && r_p.amax() < 1e-12 && comp_err < 1e-9 * eps {
            return Ok(RelaxedProjection {
                point: y,
                multipliers: lambda,
                slacks: s,
                iterations: it - 1,
            });
        }

        // reduced Newton system (I + Aᵀ D⁻¹ A) dy = -r_d - Aᵀ D⁻¹ (r_p - r_c/λ), D⁻¹ = λ/s
        let dinv = lambda.component_div(&s);
        let h = reduced_matrix(normals, &lambda, &s);
        let inner = (&r_p - r_c.component_div(&lambda)).component_mul(&dinv);
        let rhs = -&r_d - &at * inner;
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::SolverFailure("relaxed Newton matrix not PD".into()))?;
        let dy = chol.solve(&rhs);
        let dlambda = (normals * &dy + &r_p - r_c.component_div(&lambda)).component_mul(&dinv);
        let ds = -(&r_c + s.component_mul(&dlambda)).component_div(&lambda);

        let mut alpha: f64 = 1.0;
        for i in 0..m {
            if dlambda[i] < 0.0 {
                alpha = alpha.min(-0.995 * lambda[i] / dlambda[i]);
            }
            if ds[i] < 0.0 {
                alpha = alpha.min(-0.995 * s[i] / ds[i]);
            }
        }
        y += &dy * alpha;
        lambda += &dlambda * alpha;
        s += &ds * alpha;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteResult("relaxed projection"));
        }
    }
    Err(Error::IterationLimit(max_iter))
}
