//! Query points, collision detection and contact Jacobian rows.
//!
//! Rows are laid out over the system velocity `[v_o (6), v_r]` where the
//! object twist is world-frame linear and body-frame angular velocity, and
//! the robot velocity stacks the velocities of its actuated points.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exact_distance, CsdfEval, SupportPlaneSet};
use crate::state::{SystemState, OBJECT_DOF};

/// Default distance beyond which queries are dropped.
pub const DEFAULT_CUTOFF: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryBody {
    /// Attached to actuated robot point `k` (coordinates `3k..3k+3`).
    Robot(usize),
    /// Fixed in the world.
    Ground,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryPoint {
    pub body: QueryBody,
    /// Offset from the robot point, or world position for ground points.
    pub local_position: Vector3<f64>,
    #[serde(default)]
    pub radius: f64,
}

impl QueryPoint {
    pub fn robot_sphere(index: usize, radius: f64) -> Self {
        QueryPoint {
            body: QueryBody::Robot(index),
            local_position: Vector3::zeros(),
            radius,
        }
    }

    pub fn ground(position: Vector3<f64>) -> Self {
        QueryPoint {
            body: QueryBody::Ground,
            local_position: position,
            radius: 0.0,
        }
    }

    pub fn world_position(&self, state: &SystemState) -> Vector3<f64> {
        match self.body {
            QueryBody::Robot(k) => state.robot_point(k) + self.local_position,
            QueryBody::Ground => self.local_position,
        }
    }

    pub fn validate(&self, state: &SystemState) -> Result<()> {
        if !(self.radius >= 0.0) {
            return Err(Error::InvalidInput(
                "query radius must be non-negative".into(),
            ));
        }
        if let QueryBody::Robot(k) = self.body {
            if 3 * k + 3 > state.n_robot() {
                return Err(Error::InvalidInput(format!(
                    "query references robot point {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Ground query points on a world-aligned lattice, restricted to the
/// vertical projection of the object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundGrid {
    pub pitch: f64,
    #[serde(default)]
    pub height: f64,
    /// Slack when testing whether a lattice column hits the object; negative
    /// values skip columns through the boundary.
    #[serde(default = "default_grid_margin")]
    pub margin: f64,
}

fn default_grid_margin() -> f64 {
    -1e-6
}

impl Default for GroundGrid {
    fn default() -> Self {
        GroundGrid {
            pitch: 0.02,
            height: 0.0,
            margin: -1e-6,
        }
    }
}

impl GroundGrid {
    /// `vertices` are the object's vertices in its own frame.
    pub fn points(
        &self,
        state: &SystemState,
        planes: &SupportPlaneSet,
        vertices: &[Vector3<f64>],
    ) -> Vec<QueryPoint> {
        let world: Vec<Vector3<f64>> = vertices.iter().map(|v| state.to_world(v)).collect();
        let (mut lo, mut hi) = (
            Vector3::repeat(f64::INFINITY),
            Vector3::repeat(f64::NEG_INFINITY),
        );
        for v in &world {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let r = state.rotation();
        let world_normals: Vec<Vector3<f64>> = planes.normals().iter().map(|n| r * n).collect();
        let world_offsets: Vec<f64> = world_normals
            .iter()
            .zip(planes.offsets())
            .map(|(n, b)| b - n.dot(&state.object_position))
            .collect();
        let lattice = |lo: f64, hi: f64| {
            let start = ((lo - self.margin) / self.pitch - 0.5).ceil() as i64;
            let end = ((hi + self.margin) / self.pitch - 0.5).floor() as i64;
            (start..=end).map(move |i| (i as f64 + 0.5) * self.pitch)
        };
        let mut out = Vec::new();
        for x in lattice(lo.x, hi.x) {
            for y in lattice(lo.y, hi.y) {
                if self.column_hits(&world_normals, &world_offsets, x, y) {
                    out.push(QueryPoint::ground(Vector3::new(x, y, self.height)));
                }
            }
        }
        out
    }

    /// Whether the vertical line through `(x, y)` meets the object.
    fn column_hits(&self, normals: &[Vector3<f64>], offsets: &[f64], x: f64, y: f64) -> bool {
        let (mut zlo, mut zhi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (n, b) in normals.iter().zip(offsets) {
            let rest = n.x * x + n.y * y + b - self.margin;
            if n.z.abs() < 1e-12 {
                if rest > 0.0 {
                    return false;
                }
            } else if n.z > 0.0 {
                zhi = zhi.min(-rest / n.z);
            } else {
                zlo = zlo.max(-rest / n.z);
            }
        }
        zlo <= zhi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistanceModel {
    /// Log-sum-exp smoothed field with closest point `x - f ∇f`.
    Smooth { sigma: f64 },
    /// Euclidean projection onto the polytope.
    Exact,
}

#[derive(Debug, Clone)]
pub struct Contact {
    pub phi: f64,
    /// World-frame witness point on the object.
    pub witness: Vector3<f64>,
    /// Witness in the object frame (lever arm from the object origin).
    pub witness_local: Vector3<f64>,
    /// Unit, object-outward, world frame.
    pub normal: Vector3<f64>,
    pub tangents: Vec<Vector3<f64>>,
    /// `Jⁿ`: normal relative velocity row.
    pub normal_row: DVector<f64>,
    /// `J^d_j`: tangential relative velocity rows, one per tangent.
    pub tangent_rows: Vec<DVector<f64>>,
    /// Index of the generating query point.
    pub source: usize,
    pub body: QueryBody,
}

#[derive(Debug, Clone)]
pub struct ContactSet {
    pub contacts: Vec<Contact>,
    pub n_d: usize,
    /// Velocity dimension `n_o + n_r`.
    pub dim: usize,
}

impl ContactSet {
    pub fn empty(dim: usize, n_d: usize) -> Self {
        ContactSet {
            contacts: Vec::new(),
            n_d,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.contacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contacts.is_empty()
    }

    pub fn phis(&self) -> Vec<f64> {
        self.contacts.iter().map(|c| c.phi).collect()
    }

    /// `J_{i,j} = Jⁿᵢ - μ J^d_{i,j}` stacked contact-major: `n_c·n_d × dim`.
    pub fn jacobian_rows(&self, mu: f64) -> DMatrix<f64> {
        let mut rows = DMatrix::zeros(self.len() * self.n_d, self.dim);
        for (i, c) in self.contacts.iter().enumerate() {
            for (j, row) in contact_jacobian_rows(c, mu).into_iter().enumerate() {
                rows.row_mut(i * self.n_d + j).copy_from(&row.transpose());
            }
        }
        rows
    }

    /// Distance of every row, aligned with [`ContactSet::jacobian_rows`].
    pub fn row_phis(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.len() * self.n_d,
            self.contacts
                .iter()
                .flat_map(|c| std::iter::repeat_n(c.phi, self.n_d)),
        )
    }

    pub fn summary(&self) -> Vec<ContactSummary> {
        self.contacts
            .iter()
            .map(|c| ContactSummary {
                source: c.source,
                phi: c.phi,
                normal: [c.normal.x, c.normal.y, c.normal.z],
                witness: [c.witness.x, c.witness.y, c.witness.z],
            })
            .collect()
    }
}

/// Debug view of one contact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContactSummary {
    pub source: usize,
    pub phi: f64,
    pub normal: [f64; 3],
    pub witness: [f64; 3],
}

/// `n_d` unit vectors spanning the plane orthogonal to `normal`, at angular
/// spacing `2π/n_d`, with `d_{j + n_d/2} = -d_j` exactly. The first vector is
/// the projection of the global axis least aligned with the normal
/// (ties prefer x, then y).
pub fn tangent_basis(normal: &Vector3<f64>, n_d: usize) -> Vec<Vector3<f64>> {
    assert!(n_d >= 2 && n_d % 2 == 0, "n_d must be even and at least 2");
    let (t1, t2) = tangent_frame(normal).0;
    let half = n_d / 2;
    let mut out = Vec::with_capacity(n_d);
    for j in 0..half {
        let a = 2.0 * std::f64::consts::PI * j as f64 / n_d as f64;
        out.push(t1 * a.cos() + t2 * a.sin());
    }
    for j in 0..half {
        out.push(-out[j]);
    }
    out
}

fn seed_axis(normal: &Vector3<f64>) -> Vector3<f64> {
    let a = normal.abs();
    let k = if a.x <= a.y && a.x <= a.z {
        0
    } else if a.y <= a.z {
        1
    } else {
        2
    };
    let mut e = Vector3::zeros();
    e[k] = 1.0;
    e
}

/// Orthonormal tangent pair and the seed used to build it.
fn tangent_frame(normal: &Vector3<f64>) -> ((Vector3<f64>, Vector3<f64>), Vector3<f64>) {
    let seed = seed_axis(normal);
    let t1 = (seed - normal * seed.dot(normal)).normalize();
    ((t1, normal.cross(&t1)), seed)
}

/// Row of `e · (v_query - v_object(witness))` over the system velocity.
fn relative_velocity_row(
    direction: &Vector3<f64>,
    lever_local: &Vector3<f64>,
    rotation: &Matrix3<f64>,
    body: QueryBody,
    dim: usize,
) -> DVector<f64> {
    let mut row = DVector::zeros(dim);
    let local_dir = rotation.transpose() * direction;
    let ang = lever_local.cross(&local_dir);
    for k in 0..3 {
        row[k] = -direction[k];
        row[3 + k] = -ang[k];
    }
    if let QueryBody::Robot(r) = body {
        for k in 0..3 {
            row[OBJECT_DOF + 3 * r + k] = direction[k];
        }
    }
    row
}

/// `J_{i,j} = Jⁿᵢ - μ J^d_{i,j}` for every tangent direction of one contact.
pub fn contact_jacobian_rows(contact: &Contact, mu: f64) -> Vec<DVector<f64>> {
    contact
        .tangent_rows
        .iter()
        .map(|t| &contact.normal_row - t * mu)
        .collect()
}

fn assemble_contact(
    state: &SystemState,
    source: usize,
    body: QueryBody,
    phi: f64,
    witness_local: Vector3<f64>,
    normal_local: Vector3<f64>,
    n_d: usize,
) -> Contact {
    let r = state.rotation();
    let dim = state.velocity_dim();
    let normal = r * normal_local;
    let tangents = tangent_basis(&normal, n_d);
    let normal_row = relative_velocity_row(&normal, &witness_local, &r, body, dim);
    let tangent_rows = tangents
        .iter()
        .map(|d| relative_velocity_row(d, &witness_local, &r, body, dim))
        .collect();
    Contact {
        phi,
        witness: state.to_world(&witness_local),
        witness_local,
        normal,
        tangents,
        normal_row,
        tangent_rows,
        source,
        body,
    }
}

/// Detect contacts between the object and every query point whose
/// model distance, minus its radius, is below `cutoff`.
pub fn detect_contacts(
    state: &SystemState,
    planes: &SupportPlaneSet,
    queries: &[QueryPoint],
    model: DistanceModel,
    cutoff: f64,
    n_d: usize,
) -> Result<ContactSet> {
    if !(cutoff > 0.0) {
        return Err(Error::InvalidInput("cutoff must be positive".into()));
    }
    state.validate()?;
    let mut set = ContactSet::empty(state.velocity_dim(), n_d);
    for (idx, q) in queries.iter().enumerate() {
        q.validate(state)?;
        let x = state.to_object(&q.world_position(state));
        let (dist, witness_local, normal_local) = match model {
            DistanceModel::Smooth { sigma } => {
                let eval = CsdfEval::new(planes, &x, sigma);
                let d = eval.value();
                if d - q.radius >= cutoff {
                    continue;
                }
                let norm = eval.gradient.norm();
                if norm < 1e-8 {
                    return Err(Error::DegenerateNormal { query: idx, norm });
                }
                (d, eval.closest_point(&x), eval.gradient / norm)
            }
            DistanceModel::Exact => {
                let r = exact_distance(planes, &x)?;
                if r.distance - q.radius >= cutoff {
                    continue;
                }
                if r.distance > 0.0 {
                    (r.distance, r.closest_point, r.outward_direction)
                } else {
                    // inside: use the least-penetrated face
                    let scores = planes.scores(&x);
                    let (i, s) = scores
                        .iter()
                        .copied()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                    let n = planes.normals()[i];
                    (0.0, x - n * s, n)
                }
            }
        };
        let phi = (dist - q.radius).max(0.0);
        set.contacts.push(assemble_contact(
            state,
            idx,
            q.body,
            phi,
            witness_local,
            normal_local,
            n_d,
        ));
    }
    Ok(set)
}

/// Derivatives of one smoothed contact with respect to σ at a fixed state.
#[derive(Debug, Clone)]
pub struct ContactSigmaTangent {
    pub dphi: f64,
    pub dnormal_row: DVector<f64>,
    pub dtangent_rows: Vec<DVector<f64>>,
}

/// σ-derivatives of every contact in a set produced by
/// [`detect_contacts`] with [`DistanceModel::Smooth`].
pub fn contact_sigma_tangents(
    state: &SystemState,
    planes: &SupportPlaneSet,
    queries: &[QueryPoint],
    contacts: &ContactSet,
    sigma: f64,
) -> Vec<ContactSigmaTangent> {
    let r = state.rotation();
    let dim = state.velocity_dim();
    contacts
        .contacts
        .iter()
        .map(|c| {
            let q = &queries[c.source];
            let x = state.to_object(&q.world_position(state));
            let eval = CsdfEval::new(planes, &x, sigma);
            let f = eval.value();
            let df = eval.smooth.dvalue_dsigma(&eval.scores);
            let g = eval.gradient;
            let dg = eval.gradient_dsigma(planes);
            let gn = g.norm();
            let n_local = g / gn;
            let dn_local = (dg - n_local * n_local.dot(&dg)) / gn;
            let dwitness = -g * df - dg * f;
            let normal = r * n_local;
            let dnormal = r * dn_local;

            let ((t1, _), seed) = tangent_frame(&normal);
            let u = seed - normal * seed.dot(&normal);
            let du = -normal * seed.dot(&dnormal) - dnormal * seed.dot(&normal);
            let dt1 = (du - t1 * t1.dot(&du)) / u.norm();
            let t2 = normal.cross(&t1);
            let dt2 = dnormal.cross(&t1) + normal.cross(&dt1);
            let half = c.n_d_half();
            let mut dtangents = Vec::with_capacity(2 * half);
            for j in 0..half {
                let a = 2.0 * std::f64::consts::PI * j as f64 / (2 * half) as f64;
                dtangents.push(dt1 * a.cos() + dt2 * a.sin());
            }
            for j in 0..half {
                dtangents.push(-dtangents[j]);
            }
            let _ = t2;

            let row_tangent = |e: &Vector3<f64>, de: &Vector3<f64>| {
                let mut row = DVector::zeros(dim);
                let local = r.transpose() * e;
                let dlocal = r.transpose() * de;
                let dang = dwitness.cross(&local) + c.witness_local.cross(&dlocal);
                for k in 0..3 {
                    row[k] = -de[k];
                    row[3 + k] = -dang[k];
                }
                if let QueryBody::Robot(rb) = c.body {
                    for k in 0..3 {
                        row[OBJECT_DOF + 3 * rb + k] = de[k];
                    }
                }
                row
            };
            ContactSigmaTangent {
                dphi: if f - q.radius > 0.0 { df } else { 0.0 },
                dnormal_row: row_tangent(&c.normal, &dnormal),
                dtangent_rows: c
                    .tangents
                    .iter()
                    .zip(&dtangents)
                    .map(|(d, dd)| row_tangent(d, dd))
                    .collect(),
            }
        })
        .collect()
}

impl Contact {
    fn n_d_half(&self) -> usize {
        self.tangents.len() / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{axis_angle, integrate};
    use nalgebra::Quaternion;

    fn cube() -> SupportPlaneSet {
        SupportPlaneSet::cuboid(Vector3::repeat(0.5))
    }

    fn ball_state(pos: Vector3<f64>) -> SystemState {
        SystemState::new(
            Vector3::zeros(),
            Quaternion::identity(),
            DVector::from_column_slice(pos.as_slice()),
        )
        .unwrap()
    }

    #[test]
    fn ball_touching_face() {
        let s = ball_state(Vector3::new(0.6, 0.0, 0.0));
        let q = [QueryPoint::robot_sphere(0, 0.01)];
        for model in [
            DistanceModel::Exact,
            DistanceModel::Smooth { sigma: 1000.0 },
        ] {
            let c = detect_contacts(&s, &cube(), &q, model, 0.1, 4).unwrap();
            assert_eq!(c.len(), 1);
            assert!((c.contacts[0].phi - 0.09).abs() < 1e-3);
            assert!((c.contacts[0].normal - Vector3::x()).norm() < 1e-6);
            assert_eq!(c.jacobian_rows(0.5).nrows(), 4);
        }
        let far = ball_state(Vector3::new(5.0, 0.0, 0.0));
        let c = detect_contacts(
            &far,
            &cube(),
            &q,
            DistanceModel::Smooth { sigma: 1000.0 },
            0.1,
            4,
        )
        .unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn ground_points_under_resting_cube() {
        let s = SystemState::new(
            Vector3::new(0.0, 0.0, 0.5),
            Quaternion::identity(),
            DVector::zeros(0),
        )
        .unwrap();
        let grid = GroundGrid {
            pitch: 0.5,
            ..GroundGrid::default()
        };
        let pts = grid.points(&s, &cube(), &cube().vertices());
        assert_eq!(pts.len(), 4);
        for model in [
            DistanceModel::Exact,
            DistanceModel::Smooth { sigma: 1000.0 },
        ] {
            let c = detect_contacts(&s, &cube(), &pts, model, 0.05, 4).unwrap();
            assert_eq!(c.len(), 4);
            for k in &c.contacts {
                assert!(k.phi < 2e-3, "{}", k.phi);
                assert!((k.normal + Vector3::z()).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn ground_grid_follows_rotated_footprint() {
        // 45° yaw widens the footprint's bounding box but not the area
        let s = SystemState::new(
            Vector3::new(0.0, 0.0, 0.5),
            axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_4),
            DVector::zeros(0),
        )
        .unwrap();
        let grid = GroundGrid {
            pitch: 0.1,
            ..GroundGrid::default()
        };
        let pts = grid.points(&s, &cube(), &cube().vertices());
        let area = pts.len() as f64 * 0.01;
        assert!((area - 1.0).abs() < 0.15, "{area}");
        for p in &pts {
            let local = s.to_object(&(p.local_position + Vector3::new(0.0, 0.0, 0.5)));
            assert!(local.x.abs() <= 0.5 + 1e-6 && local.y.abs() <= 0.5 + 1e-6);
        }
    }

    #[test]
    fn tangent_basis_examples() {
        let b = tangent_basis(&Vector3::z(), 4);
        let expect = [Vector3::x(), Vector3::y(), -Vector3::x(), -Vector3::y()];
        for (d, e) in b.iter().zip(&expect) {
            assert!((d - e).norm() < 1e-15);
        }
        let b = tangent_basis(&Vector3::z(), 2);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], -b[0]);
        assert!(b[0].z.abs() < 1e-15);
    }

    #[test]
    fn mu_zero_rows_are_identical() {
        let s = ball_state(Vector3::new(0.55, 0.2, 0.1));
        let q = [QueryPoint::robot_sphere(0, 0.01)];
        let c = detect_contacts(
            &s,
            &cube(),
            &q,
            DistanceModel::Smooth { sigma: 200.0 },
            0.1,
            6,
        )
        .unwrap();
        let rows = c.jacobian_rows(0.0);
        for j in 1..6 {
            assert_eq!(rows.row(j), rows.row(0));
        }
    }

    #[test]
    fn point_object_rows() {
        // ball at +x of the cube: relative normal velocity = v_ball.x - v_obj.x
        let s = ball_state(Vector3::new(0.6, 0.0, 0.0));
        let q = [QueryPoint::robot_sphere(0, 0.0)];
        let c = detect_contacts(&s, &cube(), &q, DistanceModel::Exact, 1.0, 4).unwrap();
        let k = &c.contacts[0];
        let normal = &k.normal_row;
        assert_eq!(normal[0], -1.0);
        assert_eq!(normal[6], 1.0);
        let rows = c.jacobian_rows(0.5);
        let ty = k
            .tangents
            .iter()
            .position(|d| (d - Vector3::y()).norm() < 1e-12)
            .unwrap();
        let expect = normal - &k.tangent_rows[ty] * 0.5;
        assert_eq!(rows.row(ty).transpose(), expect);
        assert_eq!(rows[(ty, 1)], 0.5);
        assert_eq!(rows[(ty, 7)], -0.5);
    }

    #[test]
    fn normal_row_matches_gap_rate() {
        // rotated cube, ball near a corner region: d(gap)/dt = Jⁿ v
        let q0 = axis_angle(Vector3::new(0.2, 1.0, -0.4), 0.6);
        let s = SystemState::new(
            Vector3::new(0.1, -0.05, 0.2),
            q0,
            DVector::from_vec(vec![0.9, 0.7, 0.8]),
        )
        .unwrap();
        let planes = cube();
        let queries = [QueryPoint::robot_sphere(0, 0.0)];
        let c = detect_contacts(&s, &planes, &queries, DistanceModel::Exact, 5.0, 4).unwrap();
        let v = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.7, -0.5, 0.4, -0.2, 0.1, 0.3]);
        let gap = |st: &SystemState| {
            exact_distance(&planes, &st.to_object(&st.robot_point(0)))
                .unwrap()
                .distance
        };
        let eps = 1e-6;
        let fd = (gap(&integrate(&s, &v, eps)) - gap(&integrate(&s, &v, -eps))) / (2.0 * eps);
        let an = c.contacts[0].normal_row.dot(&v);
        assert!((fd - an).abs() < 1e-4, "{fd} vs {an}");
    }

    #[test]
    fn sigma_tangents_match_finite_differences() {
        let s = SystemState::new(
            Vector3::new(0.0, 0.0, 0.0),
            axis_angle(Vector3::new(0.3, 0.1, 1.0), 0.4),
            DVector::from_vec(vec![0.56, 0.47, 0.1]),
        )
        .unwrap();
        let planes = cube();
        let queries = [QueryPoint::robot_sphere(0, 0.01)];
        let sigma = 40.0;
        let model = |sg| DistanceModel::Smooth { sigma: sg };
        let c = detect_contacts(&s, &planes, &queries, model(sigma), 0.5, 4).unwrap();
        let tang = contact_sigma_tangents(&s, &planes, &queries, &c, sigma);
        let h = 1e-5;
        let cp = detect_contacts(&s, &planes, &queries, model(sigma + h), 0.5, 4).unwrap();
        let cm = detect_contacts(&s, &planes, &queries, model(sigma - h), 0.5, 4).unwrap();
        let fd_phi = (cp.contacts[0].phi - cm.contacts[0].phi) / (2.0 * h);
        assert!((fd_phi - tang[0].dphi).abs() < 1e-8);
        let fd_n = (&cp.contacts[0].normal_row - &cm.contacts[0].normal_row) / (2.0 * h);
        assert!((fd_n - &tang[0].dnormal_row).amax() < 1e-7);
        for j in 0..4 {
            let fd =
                (&cp.contacts[0].tangent_rows[j] - &cm.contacts[0].tangent_rows[j]) / (2.0 * h);
            assert!((fd - &tang[0].dtangent_rows[j]).amax() < 1e-7);
        }
    }
}
