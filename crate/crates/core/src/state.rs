//! System state `q = [q_o, q_r]` and quaternion integration.
//!
//! The object twist is `[v, ω]` with the linear part in the world frame and
//! the angular part in the body frame, so the orientation update is
//! `q ⊗ exp(h ω)`.

use nalgebra::{DVector, Matrix3, Matrix4, Matrix4x3, Quaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the object twist.
pub const OBJECT_DOF: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateDoc", into = "StateDoc")]
pub struct SystemState {
    pub object_position: Vector3<f64>,
    /// Unit quaternion; the sign is kept as given (q and -q are both valid).
    pub object_quaternion: Quaternion<f64>,
    /// Stacked 3D positions of the actuated robot points.
    pub robot_config: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDoc {
    position: [f64; 3],
    /// `[w, x, y, z]`
    quaternion: [f64; 4],
    robot: Vec<f64>,
}

impl TryFrom<StateDoc> for SystemState {
    type Error = Error;
    fn try_from(d: StateDoc) -> Result<Self> {
        let [w, x, y, z] = d.quaternion;
        let s = SystemState {
            object_position: Vector3::from(d.position),
            object_quaternion: Quaternion::new(w, x, y, z),
            robot_config: DVector::from_vec(d.robot),
        };
        s.validate()?;
        Ok(s)
    }
}

impl From<SystemState> for StateDoc {
    fn from(s: SystemState) -> Self {
        let q = s.object_quaternion;
        StateDoc {
            position: [
                s.object_position.x,
                s.object_position.y,
                s.object_position.z,
            ],
            quaternion: [q.w, q.i, q.j, q.k],
            robot: s.robot_config.iter().copied().collect(),
        }
    }
}

impl SystemState {
    pub fn new(
        position: Vector3<f64>,
        quaternion: Quaternion<f64>,
        robot: DVector<f64>,
    ) -> Result<Self> {
        let s = SystemState {
            object_position: position,
            object_quaternion: quaternion,
            robot_config: robot,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.object_quaternion.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "object quaternion has norm {n}"
            )));
        }
        if self.robot_config.len() % 3 != 0 {
            return Err(Error::InvalidInput(
                "robot configuration must stack 3D points".into(),
            ));
        }
        Ok(())
    }

    pub fn n_robot(&self) -> usize {
        self.robot_config.len()
    }

    /// Total velocity dimension `n_o + n_r`.
    pub fn velocity_dim(&self) -> usize {
        OBJECT_DOF + self.robot_config.len()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_matrix(&self.object_quaternion)
    }

    pub fn robot_point(&self, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.robot_config[3 * k],
            self.robot_config[3 * k + 1],
            self.robot_config[3 * k + 2],
        )
    }

    /// World to object frame.
    pub fn to_object(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (x - self.object_position)
    }

    pub fn to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.object_position
    }
}

/// Rotation matrix of a unit quaternion; depends only on products of
/// components, so `q` and `-q` give bitwise identical results.
pub fn rotation_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn quat_to_vec(q: &Quaternion<f64>) -> Vector4<f64> {
    Vector4::new(q.w, q.i, q.j, q.k)
}

pub fn vec_to_quat(v: &Vector4<f64>) -> Quaternion<f64> {
    Quaternion::new(v[0], v[1], v[2], v[3])
}

/// `q ⊗ p = L(q) p` in `[w, x, y, z]` coordinates.
pub fn left_product_matrix(q: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// `q ⊗ p = R(p) q` in `[w, x, y, z]` coordinates.
pub fn right_product_matrix(p: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (p.w, p.i, p.j, p.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// Exponential map of a rotation vector, `[cos(θ/2), sin(θ/2) φ/θ]`.
pub fn exp_map(phi: &Vector3<f64>) -> Quaternion<f64> {
    let theta = phi.norm();
    let (c, s) = half_angle_terms(theta);
    Quaternion::new(c, s * phi.x, s * phi.y, s * phi.z)
}

/// `(cos(θ/2), sin(θ/2)/θ)` with a series near zero.
fn half_angle_terms(theta: f64) -> (f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (1.0 - t2 / 8.0, 0.5 - t2 / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    }
}

/// `∂exp(φ)/∂φ` as a 4×3 matrix.
pub fn exp_map_jacobian(phi: &Vector3<f64>) -> Matrix4x3<f64> {
    let theta = phi.norm();
    let (_, s) = half_angle_terms(theta);
    // (ds/dθ)/θ
    let ds_over_theta = if theta < 1e-3 {
        -1.0 / 24.0 + theta * theta / 960.0
    } else {
        (0.5 * (0.5 * theta).cos() * theta - (0.5 * theta).sin()) / theta.powi(3)
    };
    let top = -phi.transpose() * (0.5 * s);
    let bottom = Matrix3::identity() * s + phi * phi.transpose() * ds_over_theta;
    let mut j = Matrix4x3::zeros();
    j.row_mut(0).copy_from(&top);
    j.fixed_view_mut::<3, 3>(1, 0).copy_from(&bottom);
    j
}

/// Normalized `q ⊗ exp(φ)` and its Jacobians with respect to `q` and `φ`.
pub fn compose_exp(
    q: &Quaternion<f64>,
    phi: &Vector3<f64>,
) -> (Quaternion<f64>, Matrix4<f64>, Matrix4x3<f64>) {
    let e = exp_map(phi);
    let p = q * e;
    let pv = quat_to_vec(&p);
    let n = pv.norm();
    let unit = pv / n;
    let dnorm = (Matrix4::identity() - unit * unit.transpose()) / n;
    let dq = dnorm * right_product_matrix(&e);
    let dphi = dnorm * left_product_matrix(q) * exp_map_jacobian(phi);
    (vec_to_quat(&unit), dq, dphi)
}

/// `q⁺ = q "+" h v⁺`: world-frame translation, body-frame rotation,
/// robot points moved linearly; the quaternion is renormalized.
pub fn integrate(state: &SystemState, v_plus: &DVector<f64>, h: f64) -> SystemState {
    assert_eq!(
        v_plus.len(),
        state.velocity_dim(),
        "velocity dimension mismatch"
    );
    let v_lin = Vector3::new(v_plus[0], v_plus[1], v_plus[2]);
    let omega = Vector3::new(v_plus[3], v_plus[4], v_plus[5]);
    let p = state.object_quaternion * exp_map(&(omega * h));
    SystemState {
        object_position: state.object_position + v_lin * h,
        object_quaternion: p / p.norm(),
        robot_config: &state.robot_config + v_plus.rows(OBJECT_DOF, state.n_robot()) * h,
    }
}

/// Rotation angle between two orientations, in `[0, π]`, sign-invariant.
pub fn orientation_error(a: &Quaternion<f64>, b: &Quaternion<f64>) -> f64 {
    let d = quat_to_vec(a).dot(&quat_to_vec(b)).abs().min(1.0);
    2.0 * d.acos()
}

/// Yaw of a quaternion (rotation about world z).
pub fn yaw(q: &Quaternion<f64>) -> f64 {
    let r = rotation_matrix(q);
    r[(1, 0)].atan2(r[(0, 0)])
}

pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Quaternion<f64> {
    exp_map(&(axis.normalize() * angle))
}
