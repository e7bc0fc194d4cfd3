//! Convex objects as supporting-plane sets, with exact and smoothed
//! truncated distance queries.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection;
use crate::smooth::{self, SmoothMax};

const UNIT_TOL: f64 = 1e-9;
const MERGE_TOL: f64 = 1e-8;
const CONVEXITY_TOL: f64 = 1e-6;
const MIN_VOLUME: f64 = 1e-12;
/// Iteration budget of the exact projection in 3D.
pub const EXACT_MAX_ITER: usize = 50;

/// Intersection of halfspaces `nᵢᵀx + bᵢ <= 0` expressed in one body frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlaneSetDoc", into = "PlaneSetDoc")]
pub struct SupportPlaneSet {
    normals: Vec<Vector3<f64>>,
    offsets: Vec<f64>,
    frame: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneSetDoc {
    normals: Vec<[f64; 3]>,
    offsets: Vec<f64>,
    #[serde(default = "default_frame")]
    frame: String,
}

fn default_frame() -> String {
    "object".to_string()
}

impl TryFrom<PlaneSetDoc> for SupportPlaneSet {
    type Error = Error;
    fn try_from(doc: PlaneSetDoc) -> Result<Self> {
        let normals = doc.normals.iter().map(|n| Vector3::from(*n)).collect();
        SupportPlaneSet::new(normals, doc.offsets, doc.frame)
    }
}

impl From<SupportPlaneSet> for PlaneSetDoc {
    fn from(p: SupportPlaneSet) -> Self {
        PlaneSetDoc {
            normals: p.normals.iter().map(|n| [n.x, n.y, n.z]).collect(),
            offsets: p.offsets,
            frame: p.frame,
        }
    }
}

impl SupportPlaneSet {
    /// Validates unit normals, matching lengths, and that the polytope is
    /// nonempty and bounded.
    pub fn new(
        normals: Vec<Vector3<f64>>,
        offsets: Vec<f64>,
        frame: impl Into<String>,
    ) -> Result<Self> {
        if normals.is_empty() {
            return Err(Error::InvalidPlaneSet(
                "at least one plane is required".into(),
            ));
        }
        if normals.len() != offsets.len() {
            return Err(Error::InvalidPlaneSet(format!(
                "{} normals but {} offsets",
                normals.len(),
                offsets.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            if !n
                .iter()
                .chain(std::iter::once(&offsets[i]))
                .all(|v| v.is_finite())
            {
                return Err(Error::InvalidPlaneSet(format!("plane {i} is not finite")));
            }
            if (n.norm() - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidPlaneSet(format!(
                    "normal {i} has norm {}",
                    n.norm()
                )));
            }
        }
        let set = SupportPlaneSet {
            normals,
            offsets,
            frame: frame.into(),
        };
        set.check_nonempty_and_bounded()?;
        Ok(set)
    }

    fn check_nonempty_and_bounded(&self) -> Result<()> {
        let a = self.normal_matrix();
        let b = DVector::from_column_slice(&self.offsets);
        match projection::project(&a, &b, &DVector::zeros(3), 4 * self.len() + 50) {
            Ok(_) => {}
            Err(Error::InfeasibleConstraints) => {
                return Err(Error::InvalidPlaneSet("polytope is empty".into()))
            }
            Err(e) => return Err(Error::SolverFailure(e.to_string())),
        }
        // bounded iff every ±e_k lies in the cone spanned by the normals,
        // i.e. projects to the origin on the recession cone {d : N d <= 0}
        let zero = DVector::zeros(self.len());
        for k in 0..3 {
            for sign in [1.0, -1.0] {
                let mut e = DVector::zeros(3);
                e[k] = sign;
                let p = projection::project(&a, &zero, &e, 4 * self.len() + 50)
                    .map_err(|e| Error::SolverFailure(e.to_string()))?;
                if p.point.norm() > 1e-9 {
                    return Err(Error::InvalidPlaneSet("polytope is unbounded".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn frame(&self) -> &str {
        &self.frame
    }

    /// `I × 3` matrix with the normals as rows.
    pub fn normal_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), 3, |i, k| self.normals[i][k])
    }

    /// Signed plane distances `nᵢᵀx + bᵢ`.
    pub fn scores(&self, x: &Vector3<f64>) -> Vec<f64> {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, b)| n.dot(x) + b)
            .collect()
    }

    pub fn contains(&self, x: &Vector3<f64>, tol: f64) -> bool {
        self.scores(x).iter().all(|s| *s <= tol)
    }

    /// Plane set of the same body after the rigid motion `x -> R x + t`.
    pub fn transformed(&self, rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> Self {
        let normals: Vec<_> = self.normals.iter().map(|n| rotation * n).collect();
        let offsets = normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, b)| b - n.dot(translation))
            .collect();
        SupportPlaneSet {
            normals,
            offsets,
            frame: self.frame.clone(),
        }
    }

    /// Vertices by enumerating plane triples; intended for small plane sets.
    pub fn vertices(&self) -> Vec<Vector3<f64>> {
        let n = self.len();
        let mut out: Vec<Vector3<f64>> = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let m = Matrix3::from_rows(&[
                        self.normals[i].transpose(),
                        self.normals[j].transpose(),
                        self.normals[k].transpose(),
                    ]);
                    if m.determinant().abs() < 1e-10 {
                        continue;
                    }
                    let rhs = -Vector3::new(self.offsets[i], self.offsets[j], self.offsets[k]);
                    let Some(v) = m.lu().solve(&rhs) else {
                        continue;
                    };
                    if self.contains(&v, 1e-9) && !out.iter().any(|w| (w - v).norm() < 1e-9) {
                        out.push(v);
                    }
                }
            }
        }
        out
    }

    /// Build one plane per distinct face orientation of a closed convex mesh.
    /// Faces may be arbitrary polygons; their winding is not trusted.
    pub fn from_mesh(vertices: &[Vector3<f64>], faces: &[Vec<usize>]) -> Result<Self> {
        if vertices.len() < 4 {
            return Err(Error::DegenerateMesh { volume: 0.0 });
        }
        let centroid = vertices.iter().sum::<Vector3<f64>>() / vertices.len() as f64;
        let mut normals: Vec<Vector3<f64>> = Vec::new();
        let mut offsets: Vec<f64> = Vec::new();
        let mut areas: Vec<f64> = Vec::new();
        for (fi, face) in faces.iter().enumerate() {
            if face.len() < 3 {
                return Err(Error::MalformedMesh(format!(
                    "face {fi} has fewer than 3 vertices"
                )));
            }
            if let Some(&bad) = face.iter().find(|&&i| i >= vertices.len()) {
                return Err(Error::MalformedMesh(format!(
                    "face {fi} references vertex {bad}"
                )));
            }
            // Newell normal, robust for polygons
            let mut nrm = Vector3::zeros();
            for (k, &i) in face.iter().enumerate() {
                let a = vertices[i];
                let b = vertices[face[(k + 1) % face.len()]];
                nrm.x += (a.y - b.y) * (a.z + b.z);
                nrm.y += (a.z - b.z) * (a.x + b.x);
                nrm.z += (a.x - b.x) * (a.y + b.y);
            }
            let area = 0.5 * nrm.norm();
            if area < 1e-14 {
                continue;
            }
            let mut n = nrm.normalize();
            let anchor = vertices[face[0]];
            if n.dot(&(centroid - anchor)) > 0.0 {
                n = -n;
            }
            let b = -n.dot(&anchor);
            if let Some(k) = normals
                .iter()
                .zip(&offsets)
                .position(|(m, c)| (m - n).amax() < MERGE_TOL && (c - b).abs() < MERGE_TOL)
            {
                areas[k] += area;
                continue;
            }
            normals.push(n);
            offsets.push(b);
            areas.push(area);
        }
        let volume: f64 = normals
            .iter()
            .zip(&offsets)
            .zip(&areas)
            .map(|((n, b), a)| a * (-(n.dot(&centroid) + b)).max(0.0) / 3.0)
            .sum();
        if normals.len() < 4 || volume < MIN_VOLUME {
            return Err(Error::DegenerateMesh { volume });
        }
        for (vi, v) in vertices.iter().enumerate() {
            for (pi, (n, b)) in normals.iter().zip(&offsets).enumerate() {
                let viol = n.dot(v) + b;
                if viol > CONVEXITY_TOL {
                    return Err(Error::NonConvexMesh {
                        vertex: vi,
                        plane: pi,
                        violation: viol,
                    });
                }
            }
        }
        SupportPlaneSet::new(normals, offsets, "object")
    }

    /// Axis-aligned box centered at the origin.
    pub fn cuboid(half_extents: Vector3<f64>) -> Self {
        let mut normals = Vec::with_capacity(6);
        let mut offsets = Vec::with_capacity(6);
        for k in 0..3 {
            for sign in [1.0, -1.0] {
                let mut n = Vector3::zeros();
                n[k] = sign;
                normals.push(n);
                offsets.push(-half_extents[k]);
            }
        }
        SupportPlaneSet::new(normals, offsets, "object").expect("box planes are valid")
    }
}

/// Triangle mesh of an axis-aligned box, two triangles per face.
pub fn box_mesh(half_extents: Vector3<f64>) -> (Vec<Vector3<f64>>, Vec<Vec<usize>>) {
    let h = half_extents;
    let mut vertices = Vec::with_capacity(8);
    for i in 0..8 {
        let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
        let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
        let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
        vertices.push(Vector3::new(sx * h.x, sy * h.y, sz * h.z));
    }
    let quads = [
        [0, 2, 3, 1],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 4, 6, 2],
        [1, 3, 7, 5],
    ];
    let faces = quads
        .iter()
        .flat_map(|q| [vec![q[0], q[1], q[2]], vec![q[0], q[2], q[3]]])
        .collect();
    (vertices, faces)
}

/// Parse an OFF text mesh (`OFF`, counts line, vertices, polygon faces).
pub fn parse_off(text: &str) -> Result<(Vec<Vector3<f64>>, Vec<Vec<usize>>)> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let bad = |m: &str| Error::MalformedMesh(m.to_string());
    match tokens.next() {
        Some("OFF") => {}
        _ => return Err(bad("missing OFF header")),
    }
    let mut next_num = |what: &str| -> Result<f64> {
        tokens
            .next()
            .ok_or_else(|| bad(&format!("unexpected end of file reading {what}")))?
            .parse::<f64>()
            .map_err(|_| bad(&format!("invalid number for {what}")))
    };
    let nv = next_num("vertex count")? as usize;
    let nf = next_num("face count")? as usize;
    let _ne = next_num("edge count")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        vertices.push(Vector3::new(
            next_num("vertex")?,
            next_num("vertex")?,
            next_num("vertex")?,
        ));
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let k = next_num("face size")? as usize;
        let mut face = Vec::with_capacity(k);
        for _ in 0..k {
            face.push(next_num("face index")? as usize);
        }
        faces.push(face);
    }
    Ok((vertices, faces))
}

pub fn build_from_off(text: &str) -> Result<SupportPlaneSet> {
    let (v, f) = parse_off(text)?;
    SupportPlaneSet::from_mesh(&v, &f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceQueryResult {
    pub distance: f64,
    pub closest_point: Vector3<f64>,
    /// Unit vector from the closest point toward the query; zero inside.
    pub outward_direction: Vector3<f64>,
}

/// Exact truncated distance by Euclidean projection onto the polytope.
pub fn exact_distance(
    planes: &SupportPlaneSet,
    x_query: &Vector3<f64>,
) -> Result<DistanceQueryResult> {
    if planes.contains(x_query, 0.0) {
        return Ok(DistanceQueryResult {
            distance: 0.0,
            closest_point: *x_query,
            outward_direction: Vector3::zeros(),
        });
    }
    let a = planes.normal_matrix();
    let b = DVector::from_column_slice(planes.offsets());
    let x = DVector::from_column_slice(x_query.as_slice());
    let proj = projection::project(&a, &b, &x, EXACT_MAX_ITER).map_err(|e| match e {
        Error::IterationLimit(n) => {
            Error::SolverFailure(format!("no convergence in {n} iterations"))
        }
        other => Error::SolverFailure(other.to_string()),
    })?;
    let closest = Vector3::new(proj.point[0], proj.point[1], proj.point[2]);
    let diff = x_query - closest;
    let distance = diff.norm();
    Ok(DistanceQueryResult {
        distance,
        closest_point: closest,
        outward_direction: if distance > 0.0 {
            diff / distance
        } else {
            Vector3::zeros()
        },
    })
}

/// Non-smooth `max(0, maxᵢ nᵢᵀx + bᵢ)`. Exposed for comparison only.
pub fn max_approx(planes: &SupportPlaneSet, x_query: &Vector3<f64>) -> f64 {
    smooth::truncated_max(&planes.scores(x_query))
}

/// Smoothed distance together with everything needed to differentiate it.
#[derive(Debug, Clone)]
pub struct CsdfEval {
    pub scores: Vec<f64>,
    pub smooth: SmoothMax,
    pub gradient: Vector3<f64>,
}

impl CsdfEval {
    pub fn new(planes: &SupportPlaneSet, x_query: &Vector3<f64>, sigma: f64) -> Self {
        let scores = planes.scores(x_query);
        let smooth = SmoothMax::new(&scores, sigma);
        let gradient = planes
            .normals()
            .iter()
            .zip(&smooth.weights)
            .map(|(n, w)| n * *w)
            .sum();
        CsdfEval {
            scores,
            smooth,
            gradient,
        }
    }

    pub fn value(&self) -> f64 {
        self.smooth.value
    }

    /// `x - csdf · ∇csdf`.
    pub fn closest_point(&self, x_query: &Vector3<f64>) -> Vector3<f64> {
        x_query - self.gradient * self.smooth.value
    }

    /// `∂∇csdf/∂x = σ (Σ wᵢ nᵢnᵢᵀ - ∇csdf ∇csdfᵀ)`.
    pub fn hessian(&self, planes: &SupportPlaneSet) -> Matrix3<f64> {
        let mut h = Matrix3::zeros();
        for (n, w) in planes.normals().iter().zip(&self.smooth.weights) {
            h += n * n.transpose() * *w;
        }
        (h - self.gradient * self.gradient.transpose()) * self.smooth.sigma
    }

    /// Derivative of the gradient with respect to σ at fixed query.
    pub fn gradient_dsigma(&self, planes: &SupportPlaneSet) -> Vector3<f64> {
        let zeros = vec![0.0; self.scores.len()];
        let dw = self.smooth.weight_tangent(&self.scores, &zeros, 1.0);
        planes.normals().iter().zip(&dw).map(|(n, w)| n * *w).sum()
    }
}

/// `(1/σ) lse{0, lse{σ(nᵢᵀx + bᵢ)}}`; strictly positive.
pub fn csdf(planes: &SupportPlaneSet, x_query: &Vector3<f64>, sigma: f64) -> f64 {
    SmoothMax::new(&planes.scores(x_query), sigma).value
}

pub fn csdf_gradient(planes: &SupportPlaneSet, x_query: &Vector3<f64>, sigma: f64) -> Vector3<f64> {
    CsdfEval::new(planes, x_query, sigma).gradient
}

/// `x - csdf(x) ∇csdf(x)`, with the gradient used as is (not renormalized).
pub fn closest_point_approx(
    planes: &SupportPlaneSet,
    x_query: &Vector3<f64>,
    sigma: f64,
) -> Vector3<f64> {
    CsdfEval::new(planes, x_query, sigma).closest_point(x_query)
}

/// Diagnostic: `‖∇csdf‖`, which is below 1 away from face regions.
pub fn csdf_gradient_norm(planes: &SupportPlaneSet, x_query: &Vector3<f64>, sigma: f64) -> f64 {
    csdf_gradient(planes, x_query, sigma).norm()
}

/// Random bounded polytope around the origin: `n_planes` unit normals
/// drawn uniformly on the sphere, offsets in `-radius·[0.7, 1.3]`.
pub fn random_polytope<R: Rng>(rng: &mut R, n_planes: usize, radius: f64) -> SupportPlaneSet {
    assert!(n_planes >= 4, "a bounded polytope needs at least 4 planes");
    loop {
        let normals: Vec<Vector3<f64>> = (0..n_planes).map(|_| random_unit(rng)).collect();
        let offsets = (0..n_planes)
            .map(|_| -radius * rng.random_range(0.7..1.3))
            .collect();
        if let Ok(set) = SupportPlaneSet::new(normals, offsets, "object") {
            return set;
        }
    }
}

pub fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}
