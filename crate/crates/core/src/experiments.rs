//! Workflows shared by the command-line runner and the acceptance checks:
//! distance grids, stepper-versus-oracle sweeps and multi-trial benchmarks.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::DistanceModel;
use crate::error::{Error, Result};
use crate::geometry::{csdf, exact_distance, max_approx, random_unit, SupportPlaneSet};
use crate::mpc::{receding_horizon_rollout, ControllerKind, RolloutMetrics};
use crate::scenes::{sample_target, Env, SceneSpec};
use crate::state::{axis_angle, SystemState};
use crate::stepper::{timed, DsdfEval, FrozenStep, ModelParams, OracleMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridRow {
    pub point: [f64; 3],
    pub exact: f64,
    pub max_approx: f64,
    pub csdf: f64,
}

/// Regular grid over a 2D (`z` fixed) or 3D box, `resolution` points per axis.
pub fn sdf_grid(
    planes: &SupportPlaneSet,
    lower: &[f64],
    upper: &[f64],
    resolution: usize,
    sigma: f64,
    z: f64,
) -> Result<Vec<GridRow>> {
    if resolution == 0 {
        return Err(Error::InvalidInput("resolution must be positive".into()));
    }
    if lower.len() != upper.len() || !(2..=3).contains(&lower.len()) {
        return Err(Error::InvalidInput(
            "bounding box must have 2 or 3 axes".into(),
        ));
    }
    if lower
        .iter()
        .zip(upper)
        .any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b))
    {
        return Err(Error::InvalidInput(
            "bounding box must satisfy lower <= upper".into(),
        ));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput("sigma must be positive".into()));
    }
    let axis = |k: usize, i: usize| {
        if resolution == 1 {
            0.5 * (lower[k] + upper[k])
        } else {
            lower[k] + (upper[k] - lower[k]) * i as f64 / (resolution - 1) as f64
        }
    };
    let nz = if lower.len() == 3 { resolution } else { 1 };
    let mut rows = Vec::with_capacity(resolution * resolution * nz);
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..nz {
                let p = Vector3::new(axis(0, i), axis(1, j), if nz == 1 { z } else { axis(2, k) });
                rows.push(GridRow {
                    point: p.into(),
                    exact: exact_distance(planes, &p)?.distance,
                    max_approx: max_approx(planes, &p),
                    csdf: csdf(planes, &p, sigma),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_grid_csv<W: Write>(
    mut out: W,
    rows: &[GridRow],
    three_d: bool,
    sigma: f64,
) -> Result<()> {
    writeln!(out, "# sigma={sigma}")?;
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    let mut header = vec!["x", "y"];
    if three_d {
        header.push("z");
    }
    header.extend(["exact", "max_approx", "csdf"]);
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut f: Vec<String> = r.point[..if three_d { 3 } else { 2 }]
            .iter()
            .map(|x| x.to_string())
            .collect();
        f.extend(
            [r.exact, r.max_approx, r.csdf]
                .iter()
                .map(|x| x.to_string()),
        );
        w.write_record(&f).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Object near its rest pose with every ball placed just outside the surface
/// along a random ray, and a random admissible control.
pub fn random_contact_configuration<R: Rng>(
    scene: &SceneSpec,
    rng: &mut R,
) -> Result<(SystemState, DVector<f64>)> {
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let q = axis_angle(Vector3::z(), yaw);
    let mut p = scene.initial_state.object_position;
    p.x += rng.random_range(-0.02..0.02);
    p.y += rng.random_range(-0.02..0.02);
    if scene.ground.is_some() {
        p.z = scene.rest_height(&q);
    }
    let mut state = SystemState::new(p, q, scene.initial_state.robot_config.clone())?;
    for k in 0..state.n_robot() / 3 {
        let mut d = random_unit(rng);
        if scene.ground.is_some() {
            d.z = d.z.abs();
        }
        let clearance = scene.ball_radius + rng.random_range(0.0..0.004);
        // walk out along the ray until the Euclidean gap clears the ball
        let mut t = ray_exit(&scene.object, &d) + clearance;
        for _ in 0..100 {
            let short = clearance - exact_distance(&scene.object, &(d * t))?.distance;
            if short <= 1e-12 {
                break;
            }
            t += short;
        }
        let local = d * t;
        let world = state.to_world(&local);
        state
            .robot_config
            .fixed_rows_mut::<3>(3 * k)
            .copy_from(&world);
    }
    let u = DVector::from_fn(state.n_robot(), |k, _| {
        rng.random_range(scene.mpc.u_lb[k]..=scene.mpc.u_ub[k])
    });
    Ok((state, u))
}

/// Distance from the object origin to the boundary along unit `d`.
fn ray_exit(planes: &SupportPlaneSet, d: &Vector3<f64>) -> f64 {
    planes
        .normals()
        .iter()
        .zip(planes.offsets())
        .filter(|(n, _)| n.dot(d) > 1e-12)
        .map(|(n, b)| -b / n.dot(d))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaStats {
    pub sigma: f64,
    pub mean_error: f64,
    pub max_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingStats {
    pub dsdf_ms_median: f64,
    pub qp_ms_median: f64,
    pub relaxed_ms_median: f64,
    /// Relaxed solve time over smoothed step time.
    pub relaxed_over_dsdf: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepCompareReport {
    pub samples: usize,
    pub contacts_mean: f64,
    pub eps: f64,
    pub per_sigma: Vec<SigmaStats>,
    pub max_kkt_residual: f64,
    pub timing: TimingStats,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const TIMING_REPS: usize = 20;

/// Smoothed step against the exact QP on shared exact-detection cones.
/// Errors are `∞`-norms in the scaled coordinates `h Q^{1/2} v`.
pub fn step_compare(
    scene: &SceneSpec,
    params: &ModelParams,
    samples: usize,
    sigmas: &[f64],
    eps: f64,
    seed: u64,
) -> Result<StepCompareReport> {
    if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) || !(eps > 0.0) {
        return Err(Error::InvalidInput(
            "sigmas and eps must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = vec![Vec::with_capacity(samples); sigmas.len()];
    let (mut dsdf_t, mut qp_t, mut rel_t) = (Vec::new(), Vec::new(), Vec::new());
    let mut kkt = 0.0f64;
    let mut n_contacts = 0usize;
    for _ in 0..samples {
        let (state, u) = random_contact_configuration(scene, &mut rng)?;
        let contacts = scene.detect(&state, DistanceModel::Exact)?;
        n_contacts += contacts.len();
        let step = FrozenStep::new(params, &contacts)?;
        let zq = step.query(&u);
        let oracle = step.oracle(&u, OracleMode::Exact)?;
        kkt = kkt.max(oracle.kkt.max());
        for (s, sigma) in sigmas.iter().enumerate() {
            let z = DsdfEval::new(&step.cone, &zq, *sigma).corrected(&zq);
            errors[s].push((z - &oracle.z).amax());
        }
        let (r, t) = timed(|| {
            (0..TIMING_REPS)
                .map(|_| step.velocity_and_jacobian(&u))
                .collect::<Result<Vec<_>>>()
        });
        r?;
        dsdf_t.push(t * 1e3 / TIMING_REPS as f64);
        let (r, t) = timed(|| {
            (0..TIMING_REPS)
                .map(|_| step.oracle(&u, OracleMode::Exact))
                .collect::<Result<Vec<_>>>()
        });
        r?;
        qp_t.push(t * 1e3 / TIMING_REPS as f64);
        let (r, t) = timed(|| {
            (0..TIMING_REPS)
                .map(|_| step.relaxed_velocity_and_jacobian(&u, eps))
                .collect::<Result<Vec<_>>>()
        });
        r?;
        rel_t.push(t * 1e3 / TIMING_REPS as f64);
    }
    let per_sigma = sigmas
        .iter()
        .zip(&errors)
        .map(|(sigma, e)| SigmaStats {
            sigma: *sigma,
            mean_error: if e.is_empty() {
                0.0
            } else {
                e.iter().sum::<f64>() / e.len() as f64
            },
            max_error: e.iter().copied().fold(0.0, f64::max),
        })
        .collect();
    let dsdf_ms_median = median(dsdf_t);
    let relaxed_ms_median = median(rel_t);
    Ok(StepCompareReport {
        samples,
        contacts_mean: if samples == 0 {
            0.0
        } else {
            n_contacts as f64 / samples as f64
        },
        eps,
        per_sigma,
        max_kkt_residual: kkt,
        timing: TimingStats {
            dsdf_ms_median,
            qp_ms_median: median(qp_t),
            relaxed_ms_median,
            relaxed_over_dsdf: if dsdf_ms_median > 0.0 {
                relaxed_ms_median / dsdf_ms_median
            } else {
                0.0
            },
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub target_position: [f64; 3],
    pub target_quaternion: [f64; 4],
    pub metrics: RolloutMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd {
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }

    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*} ± {:.*}", decimals, self.mean, decimals, self.std)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSummary {
    pub trials: usize,
    pub position_error_mm: MeanStd,
    pub orientation_error_rad: MeanStd,
    pub solve_ms: MeanStd,
    /// Table-style strings for the three metrics.
    pub formatted: [String; 3],
    pub results: Vec<TrialResult>,
}

impl BenchSummary {
    pub fn from_results(results: Vec<TrialResult>) -> Self {
        let pick = |f: fn(&RolloutMetrics) -> f64| {
            results.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>()
        };
        let position_error_mm = MeanStd::of(&pick(|m| m.terminal_position_error * 1e3));
        let orientation_error_rad = MeanStd::of(&pick(|m| m.terminal_orientation_error));
        let solve_ms = MeanStd::of(&pick(|m| m.mean_solve_ms));
        BenchSummary {
            trials: results.len(),
            formatted: [
                position_error_mm.format(2),
                orientation_error_rad.format(2),
                solve_ms.format(2),
            ],
            position_error_mm,
            orientation_error_rad,
            solve_ms,
            results,
        }
    }

    pub fn successes(&self, position_tol: f64, orientation_tol: f64) -> usize {
        self.results
            .iter()
            .filter(|r| {
                r.metrics.terminal_position_error < position_tol
                    && r.metrics.terminal_orientation_error < orientation_tol
            })
            .count()
    }
}

/// Independent rollouts towards sampled targets, one environment per trial.
pub fn run_trials(
    scene: &SceneSpec,
    params: &ModelParams,
    trials: usize,
    steps: usize,
    kind: ControllerKind,
    seed: u64,
) -> Result<Vec<TrialResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<_> = (0..trials)
        .map(|_| sample_target(scene, &mut rng))
        .collect();
    let shared = Arc::new(scene.clone());
    targets
        .into_par_iter()
        .enumerate()
        .map(|(i, target)| {
            let mut env = Env::shared(shared.clone(), seed.wrapping_add(i as u64))?;
            let cfg = scene.config_for(&target);
            let r = receding_horizon_rollout(&mut env, params, &cfg, steps, kind)?;
            let q = target.1;
            Ok(TrialResult {
                trial: i,
                target_position: target.0.into(),
                target_quaternion: [q.w, q.i, q.j, q.k],
                metrics: r.metrics,
            })
        })
        .collect()
}
