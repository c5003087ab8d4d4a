//! Rigid-body transforms on SE(3) and their tangent space se(3).
//!
//! Tangent vectors are ordered `[rho; phi]` (translation first, rotation
//! second). Every 6x6 matrix in the crate (information matrices, Jacobians,
//! adjoints) uses the same ordering.
//!
//! Perturbations are applied on the right: `X * exp(delta)`.

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6, SVD};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::ops::Mul;
use thiserror::Error;

/// Below this rotation angle exp/log switch to series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// log refuses rotations whose angle is within this distance of pi.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Series threshold for the coefficients of the SE(3) Jacobian coupling block.
/// Their closed forms lose most significant digits well above `SMALL_ANGLE`.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("rotation angle {angle} rad is within 1e-6 of pi; logarithm is not unique")]
    AngleNearPi { angle: f64 },
    #[error("degenerate geometry: centered point set has rank {rank}, need at least 2")]
    DegenerateGeometry { rank: usize },
    #[error("alignment needs equal-length sequences, got {estimated} estimated and {ground_truth} ground-truth poses")]
    LengthMismatch { estimated: usize, ground_truth: usize },
    #[error("alignment needs at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Element of se(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    /// Translational part, meters.
    pub rho: Vector3<f64>,
    /// Rotational part (axis * angle), radians.
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into_owned(), v.fixed_rows::<3>(3).into_owned())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rho);
        v.fixed_rows_mut::<3>(3).copy_from(&self.phi);
        v
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.rho * k, self.phi * k)
    }
}

/// Rigid transform: unit quaternion rotation plus translation in meters.
///
/// The quaternion is renormalized and canonicalized to `w >= 0` on every
/// construction, so two poses describing the same transform compare equal
/// component-wise up to rounding.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "Pose(t=[{:.9}, {:.9}, {:.9}], q=[{:.9}, {:.9}, {:.9}, {:.9}])",
            self.translation.x, self.translation.y, self.translation.z, q.w, q.i, q.j, q.k
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

fn canonical(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    let q = if q.w < 0.0 { -q } else { q };
    UnitQuaternion::new_normalize(q)
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let q = self.rotation.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.translation + self.rotation * other.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Adjoint in `[rho; phi]` ordering: `X * exp(v) == exp(Ad_X v) * X`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&self.translation) * r));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }

    pub fn exp(twist: &Twist) -> Pose {
        let rotation = so3_exp(&twist.phi);
        let translation = so3_left_jacobian(&twist.phi) * twist.rho;
        Pose::new(rotation, translation)
    }

    /// Principal logarithm. Fails when the rotation angle is within
    /// [`NEAR_PI_MARGIN`] of pi, where the rotation axis sign is ambiguous.
    pub fn log(&self) -> Result<Twist, Se3Error> {
        let angle = self.angle();
        if angle > std::f64::consts::PI - NEAR_PI_MARGIN {
            return Err(Se3Error::AngleNearPi { angle });
        }
        let phi = so3_log(&self.rotation);
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        Ok(Twist::new(rho, phi))
    }

    /// `[tx, ty, tz, qw, qx, qy, qz]`.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        [t.x, t.y, t.z, q.w, q.i, q.j, q.k]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Pose, Se3Error> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Se3Error::InvalidPose("non-finite component".into()));
        }
        let q = Quaternion::new(a[3], a[4], a[5], a[6]);
        if q.norm() < 1e-12 {
            return Err(Se3Error::InvalidPose("zero quaternion".into()));
        }
        Ok(Pose::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(a[0], a[1], a[2]),
        ))
    }

    pub fn from_slice(s: &[f64]) -> Result<Pose, Se3Error> {
        let a: [f64; 7] = s
            .try_into()
            .map_err(|_| Se3Error::InvalidPose(format!("expected 7 numbers, got {}", s.len())))?;
        Pose::from_array(a)
    }

    /// Translation distance and rotation angle between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let d = self.inverse().compose(other);
        (d.translation.norm(), d.angle())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        Pose::from_array(a).map_err(serde::de::Error::custom)
    }
}

/// `p1^-1 * p2`: the pose of `p2` expressed in the frame of `p1`.
pub fn relative(p1: &Pose, p2: &Pose) -> Pose {
    p1.inverse().compose(p2)
}

pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (w, k) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    canonical(Quaternion::new(w, k * phi.x, k * phi.y, k * phi.z))
}

pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let n = v.norm();
    let theta = 2.0 * n.atan2(w);
    if theta < SMALL_ANGLE {
        // 2 atan(n/w)/n = 2/w (1 - n^2/(3 w^2) + ...)
        v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    } else {
        v * (theta / n)
    }
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let s = (0.5 * theta).sin();
        (2.0 * s * s / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of the left Jacobian of SO(3).
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let c = if theta < 1e-3 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (c1, c2, c3) = if theta < JACOBIAN_SERIES_ANGLE {
        let t4 = theta2 * theta2;
        (
            1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - theta2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - theta2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t4 = theta2 * theta2;
        (
            (theta - s) / (theta2 * theta),
            (theta2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let rx = hat(rho);
    let px = hat(phi);
    let pxrx = px * rx;
    let rxpx = rx * px;
    let pxrxpx = pxrx * px;
    let pxpx = px * px;
    rx * 0.5
        + (pxrx + rxpx + pxrxpx) * c1
        + (pxpx * rx + rxpx * px - pxrxpx * 3.0) * c2
        + (pxrxpx * px + pxpx * rxpx) * c3
}

/// Left Jacobian of SE(3) in `[rho; phi]` ordering.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m
}

/// Inverse of the SE(3) left Jacobian.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let jinv = so3_left_jacobian_inv(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jinv * q * jinv));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    m
}

/// Inverse of the SE(3) right Jacobian: `Log(exp(xi) exp(d)) ~ xi + Jr^-1(xi) d`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&xi.scale(-1.0))
}

/// Rigid transform `S` minimizing `sum |gt_i - S * est_i|^2` over the
/// translation components. Scale is fixed at 1.
pub fn umeyama_align(estimated: &[Pose], ground_truth: &[Pose]) -> Result<Pose, Se3Error> {
    if estimated.len() != ground_truth.len() {
        return Err(Se3Error::LengthMismatch {
            estimated: estimated.len(),
            ground_truth: ground_truth.len(),
        });
    }
    let n = estimated.len();
    if n < 3 {
        return Err(Se3Error::TooFewPoses(n));
    }
    let inv_n = 1.0 / n as f64;
    let mu_est = estimated.iter().map(|p| p.translation).sum::<Vector3<f64>>() * inv_n;
    let mu_gt = ground_truth.iter().map(|p| p.translation).sum::<Vector3<f64>>() * inv_n;

    let mut cov = Matrix3::zeros();
    for (e, g) in estimated.iter().zip(ground_truth) {
        cov += (g.translation - mu_gt) * (e.translation - mu_est).transpose();
    }
    cov *= inv_n;

    let svd = SVD::new(cov, true, true);
    let sv = svd.singular_values;
    let largest = sv.max();
    let rank = if largest <= f64::MIN_POSITIVE {
        0
    } else {
        sv.iter().filter(|&&s| s > largest * 1e-12).count()
    };
    if rank < 2 {
        return Err(Se3Error::DegenerateGeometry { rank });
    }
    // unwrap: both factors were requested above
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * v_t;
    let rotation = UnitQuaternion::from_matrix(&r);
    let translation = mu_gt - rotation * mu_est;
    Ok(Pose::new(rotation, translation))
}
