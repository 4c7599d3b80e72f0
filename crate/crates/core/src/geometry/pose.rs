use std::fmt;
use std::ops::Mul;

use nalgebra::{
    Isometry3, Matrix3, Matrix4, Matrix6, Quaternion, Rotation3, Translation3, UnitQuaternion,
    Vector3, Vector6,
};

use crate::error::{Error, Result};

/// Tangent vector of SE(3), ordered `(rotation, translation)`.
pub type Tangent = Vector6<f64>;

/// Skew-symmetric cross-product matrix: `skew(a) * b == a.cross(b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform in SE(3).
///
/// A pose maps points from its local frame into the parent frame:
/// `p_parent = R p_local + t`. Perturbations are applied on the left,
/// `T <- exp(delta) * T`, with `delta = (omega, v)`.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    iso: Isometry3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation();
        let q = self.iso.rotation.quaternion();
        write!(
            f,
            "Pose(t=[{:.6}, {:.6}, {:.6}], q=[{:.6}, {:.6}, {:.6}, {:.6}])",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            iso: Isometry3::identity(),
        }
    }

    pub fn from_isometry(iso: Isometry3<f64>) -> Self {
        Self { iso }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            iso: Isometry3::from_parts(Translation3::from(translation), rotation),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::from_parts(UnitQuaternion::identity(), t)
    }

    /// Rotation about `axis` by `angle` radians followed by translation `t`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self::from_parts(UnitQuaternion::from_axis_angle(&axis, angle), t)
    }

    /// Builds a pose from a rotation matrix, rejecting matrices that are not
    /// orthonormal with determinant +1 (within 1e-9).
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite pose".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidGeometry(format!(
                "rotation not in SO(3): |R^T R - I| = {ortho:e}, det = {det}"
            )));
        }
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Ok(Self::from_parts(
            UnitQuaternion::from_rotation_matrix(&rot),
            translation,
        ))
    }

    /// Builds a pose from a quaternion given as `(x, y, z, w)`. The quaternion
    /// must have unit norm within `tol`; it is renormalized.
    pub fn from_quaternion_xyzw(t: Vector3<f64>, q: [f64; 4], tol: f64) -> Result<Self> {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > tol {
            return Err(Error::InvalidGeometry(format!(
                "quaternion norm {norm} deviates from 1 by more than {tol:e}"
            )));
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite translation".into()));
        }
        // already unit within rounding: keep the exact values so that text
        // round trips are stable
        let unit = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(quat)
        } else {
            UnitQuaternion::from_quaternion(quat)
        };
        Ok(Self::from_parts(unit, t))
    }

    pub fn isometry(&self) -> &Isometry3<f64> {
        &self.iso
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.iso.translation.vector
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.iso.rotation
    }

    /// Quaternion as `(x, y, z, w)` with non-negative `w`.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.iso.rotation.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.iso.rotation.to_rotation_matrix().matrix()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        self.iso.to_homogeneous()
    }

    pub fn inverse(&self) -> Self {
        Self {
            iso: self.iso.inverse(),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.iso.rotation * p + self.iso.translation.vector
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.iso.rotation * v
    }

    /// Rotation angle in `[0, pi]`, computed with `atan2` so that tiny angles
    /// keep full precision.
    pub fn rotation_angle(&self) -> f64 {
        let q = self.iso.rotation.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    pub fn translation_norm(&self) -> f64 {
        self.translation().norm()
    }

    /// `self^-1 * other`: the pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse() * *other
    }

    /// Exponential map. `xi = (omega, v)`.
    pub fn exp(xi: &Tangent) -> Self {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let v = Vector3::new(xi[3], xi[4], xi[5]);
        let rotation = UnitQuaternion::from_scaled_axis(omega);
        let t = left_jacobian_so3(&omega) * v;
        Self::from_parts(rotation, t)
    }

    /// Logarithm map, inverse of [`Pose::exp`].
    pub fn log(&self) -> Tangent {
        let omega = self.iso.rotation.scaled_axis();
        let v = inverse_left_jacobian_so3(&omega) * self.translation();
        Tangent::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
    }

    /// Left-multiplicative retraction `exp(delta) * self`.
    pub fn retract(&self, delta: &Tangent) -> Self {
        let mut out = Pose::exp(delta) * *self;
        out.iso.rotation.renormalize();
        out
    }

    /// Adjoint in `(rotation, translation)` ordering:
    /// `exp(Ad_T xi) = T exp(xi) T^-1`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let tx = skew(&self.translation());
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(tx * r));
        ad
    }

    /// Checks `R^T R = I` and `det R = 1` within 1e-9 and finiteness.
    pub fn validate(&self) -> Result<()> {
        let r = self.rotation_matrix();
        Pose::from_matrix(&r, self.translation()).map(|_| ())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            iso: self.iso * rhs.iso,
        }
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        Pose {
            iso: self.iso * rhs.iso,
        }
    }
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
pub fn left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let w2 = w * w;
    if theta2 < 1e-10 {
        return Matrix3::identity() + 0.5 * w + w2 / 6.0;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() + a * w + b * w2
}

pub fn inverse_left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let w2 = w * w;
    if theta2 < 1e-10 {
        return Matrix3::identity() - 0.5 * w + w2 / 12.0;
    }
    let theta = theta2.sqrt();
    let half = 0.5 * theta;
    let c = (1.0 - half * half.cos() / half.sin()) / theta2;
    Matrix3::identity() - 0.5 * w + c * w2
}

/// `ad(xi)` in `(rotation, translation)` ordering.
pub fn small_adjoint(xi: &Tangent) -> Matrix6<f64> {
    let w = skew(&Vector3::new(xi[0], xi[1], xi[2]));
    let v = skew(&Vector3::new(xi[3], xi[4], xi[5]));
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&v);
    ad
}
