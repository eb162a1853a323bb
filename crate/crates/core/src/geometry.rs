//! Rigid-body geometry: SE(3) poses and twists, the pinhole camera, and
//! inverse-depth point transport between keyframes.
//!
//! Twists are ordered `(v, ω)`: translational part first, rotational part
//! second. Poses are applied as `x' = R x + t`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this rotation angle the closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Points closer than this to the camera plane cannot be projected.
pub const MIN_DEPTH: f64 = 1e-8;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("inverse depth must be positive, got {0}")]
    NonPositiveInverseDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidCamera(&'static str),
}

/// Skew-symmetric matrix `[w]×` such that `[w]× x = w × x`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Tangent-space increment of SE(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(v: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self(Vector6::new(v.x, v.y, v.z, omega.x, omega.y, omega.z))
    }

    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn v(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }
}

impl From<Vector6<f64>> for Twist {
    fn from(v: Vector6<f64>) -> Self {
        Self(v)
    }
}

/// Rigid transform in SE(3).
///
/// Keyframe poses in this crate map world coordinates into the camera
/// frame (`x_cam = R x_world + t`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation about a unit axis (the axis is normalized here).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let w = axis.normalize() * angle;
        Self::new(so3_exp(&w), Vector3::zeros())
    }

    pub fn exp(xi: &Twist) -> Self {
        se3_exp(xi)
    }

    pub fn log(&self) -> Twist {
        se3_log(self)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn adjoint(&self) -> Matrix6<f64> {
        adjoint(self)
    }

    /// Projects the rotation back onto SO(3) (nearest orthonormal matrix).
    pub fn renormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd v_t");
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Self::new(r, self.translation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(*q.to_rotation_matrix().matrix(), translation)
    }

    /// Rotation angle of this pose in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
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

/// SO(3) exponential (Rodrigues).
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let k = skew(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// SO(3) logarithm, valid up to and including angle π.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin_theta = 0.5 * vee.norm();
    let cos_theta = 0.5 * (r.trace() - 1.0);
    // atan2 stays well conditioned near both 0 and π, unlike acos.
    let theta = sin_theta.atan2(cos_theta);
    if theta < SMALL_ANGLE {
        return vee * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if sin_theta < 1e-5 && cos_theta < 0.0 {
        // Near π the antisymmetric part vanishes; recover the axis from
        // the symmetric part (R + I) / 2 ≈ n nᵀ.
        let b = (r + Matrix3::identity()) * 0.5;
        let diag = Vector3::new(b[(0, 0)], b[(1, 1)], b[(2, 2)]);
        let i = diag.imax();
        let mut n = b.column(i).into_owned() / diag[i].max(0.0).sqrt().max(1e-12);
        n.normalize_mut();
        if n.dot(&vee) < 0.0 {
            n = -n;
        }
        return n * theta;
    }
    vee * (theta / (2.0 * sin_theta))
}

/// Left Jacobian of SO(3), `V` in `t = V v`.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let k = skew(w);
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

pub fn so3_left_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let k = skew(w);
    let c = if theta < 1e-2 {
        1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / theta_sq
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let w = xi.omega();
    Pose::new(so3_exp(&w), so3_left_jacobian(&w) * xi.v())
}

pub fn se3_log(pose: &Pose) -> Twist {
    let w = so3_log(&pose.rotation);
    Twist::new(so3_left_jacobian_inverse(&w) * pose.translation, w)
}

/// Adjoint of `T`, satisfying `Exp(Ad_T ξ) T = T Exp(ξ)`.
pub fn adjoint(pose: &Pose) -> Matrix6<f64> {
    let r = pose.rotation;
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(skew(&pose.translation) * r));
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad
}

/// Pinhole camera without distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive"));
        }
        if !(cx >= 0.0 && cy >= 0.0 && cx <= width as f64 && cy <= height as f64) {
            return Err(GeometryError::InvalidCamera(
                "principal point must lie inside the image",
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics of pyramid level `level` (each level halves resolution).
    ///
    /// Pixel centers map as `u_l = (u_0 + 0.5) / 2^l - 0.5`.
    pub fn at_level(&self, level: usize) -> Self {
        let s = 0.5f64.powi(level as i32);
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: (self.cx + 0.5) * s - 0.5,
            cy: (self.cy + 0.5) * s - 0.5,
            width: self.width.div_ceil(1 << level),
            height: self.height.div_ceil(1 << level),
        }
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if x.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(x.z));
        }
        Ok(Vector2::new(
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        ))
    }

    /// Derivative of `project` at `x` (2×3).
    pub fn project_jacobian(&self, x: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / x.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * x.y * iz2,
        )
    }

    pub fn backproject(&self, u: &Vector2<f64>, rho: f64) -> Result<Vector3<f64>, GeometryError> {
        if !(rho > 0.0) {
            return Err(GeometryError::NonPositiveInverseDepth(rho));
        }
        Ok(self.ray(u) / rho)
    }

    /// Ray through pixel `u` normalized to unit depth: `((u−cx)/fx, (v−cy)/fy, 1)`.
    pub fn ray(&self, u: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    pub fn in_bounds(&self, u: &Vector2<f64>, margin: f64) -> bool {
        u.x >= margin
            && u.y >= margin
            && u.x < self.width as f64 - 1.0 - margin
            && u.y < self.height as f64 - 1.0 - margin
    }
}

/// Fixed viewing ray of a map point in its host frame.
///
/// Stored normalized to unit depth (z = 1), so that the host-frame point
/// is `x̄ / ρ` with `ρ` the inverse z-depth, the same quantity stored in
/// predicted inverse-depth rasters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bearing(Vector3<f64>);

impl Bearing {
    pub fn from_pixel(camera: &CameraModel, u: &Vector2<f64>) -> Self {
        Self(camera.ray(u))
    }

    /// Builds a bearing from any direction with positive z.
    pub fn from_direction(d: &Vector3<f64>) -> Result<Self, GeometryError> {
        if d.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(d.z));
        }
        Ok(Self(d / d.z))
    }

    pub fn ray(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn unit(&self) -> Vector3<f64> {
        self.0.normalize()
    }
}

/// Inverse-depth point moved into another frame.
#[derive(Clone, Copy, Debug)]
pub struct TransportedPoint {
    /// `x_i = R_ih x̄ / ρ + t_ih`
    pub point: Vector3<f64>,
    /// `ρ x_i = R_ih x̄ + ρ t_ih`
    pub scaled: Vector3<f64>,
}

pub fn transform_point(t_ih: &Pose, bearing: &Bearing, rho: f64) -> TransportedPoint {
    let rotated = t_ih.rotation * bearing.0;
    let scaled = rotated + t_ih.translation * rho;
    TransportedPoint {
        point: scaled / rho,
        scaled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam() -> CameraModel {
        CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn twist_strategy(max_angle: f64) -> impl Strategy<Value = Twist> {
        (
            prop::array::uniform3(-5.0f64..5.0),
            prop::array::uniform3(-1.0f64..1.0),
            0.0f64..max_angle,
        )
            .prop_map(|(v, axis, angle)| {
                let mut a = Vector3::from(axis);
                if a.norm() < 1e-3 {
                    a = Vector3::x();
                }
                Twist::new(Vector3::from(v), a.normalize() * angle)
            })
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = se3_exp(&Twist::zero());
        assert_eq!(p, Pose::identity());
    }

    #[test]
    fn exp_pure_translation() {
        let p = se3_exp(&Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()));
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn adjoint_of_identity_and_rotation() {
        assert_eq!(adjoint(&Pose::identity()), Matrix6::identity());
        let r = Pose::from_axis_angle(Vector3::new(0.3, -0.2, 0.9), 0.7);
        let ad = adjoint(&r);
        assert_eq!(ad.fixed_view::<3, 3>(0, 0).into_owned(), r.rotation);
        assert_eq!(ad.fixed_view::<3, 3>(3, 3).into_owned(), r.rotation);
        assert!(ad.fixed_view::<3, 3>(0, 3).norm() == 0.0);
        assert!(ad.fixed_view::<3, 3>(3, 0).norm() == 0.0);
    }

    #[test]
    fn log_near_pi() {
        let w = Vector3::new(0.0, 1.0, 1.0).normalize() * (std::f64::consts::PI - 1e-7);
        let back = so3_log(&so3_exp(&w));
        assert!((back - w).norm() < 1e-6, "{back:?} vs {w:?}");
    }

    #[test]
    fn project_examples() {
        let c = cam();
        assert_eq!(c.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(50.0, 50.0));
        assert_eq!(c.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap(), Vector2::new(100.0, 50.0));
        assert!(matches!(
            c.project(&Vector3::new(1.0, 0.0, 0.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn backproject_examples() {
        let c = cam();
        let center = Vector2::new(c.cx, c.cy);
        assert_eq!(c.backproject(&center, 1.0).unwrap(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(c.backproject(&center, 0.5).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        assert!(matches!(
            c.backproject(&center, 0.0),
            Err(GeometryError::NonPositiveInverseDepth(_))
        ));
    }

    #[test]
    fn camera_validation() {
        assert!(CameraModel::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraModel::new(1.0, 1.0, 11.0, 1.0, 10, 10).is_err());
    }

    #[test]
    fn transform_point_examples() {
        let b = Bearing::from_direction(&Vector3::new(0.2, -0.1, 1.0)).unwrap();
        let p = transform_point(&Pose::identity(), &b, 0.25);
        assert!((p.point - b.ray() / 0.25).norm() < 1e-15);
        let t = Vector3::new(0.5, 1.0, -0.2);
        let p = transform_point(&Pose::from_translation(t), &b, 1.0);
        assert!((p.point - (b.ray() + t)).norm() < 1e-15);
    }

    #[test]
    fn renormalize_long_chain() {
        let step = se3_exp(&Twist::new(
            Vector3::new(0.01, 0.0, 0.02),
            Vector3::new(0.013, -0.007, 0.021),
        ));
        let mut p = Pose::identity();
        for _ in 0..2000 {
            p = p * step;
        }
        let q = p.renormalized();
        let err = (q.rotation.transpose() * q.rotation - Matrix3::identity()).norm();
        assert!(err < 1e-12);
        assert!((q.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn exp_log_round_trip(xi in twist_strategy(std::f64::consts::PI - 1e-3)) {
            let back = se3_log(&se3_exp(&xi));
            prop_assert!((back.0 - xi.0).norm() < 1e-9, "{:?} vs {:?}", back, xi);
        }

        #[test]
        fn compose_inverse_is_identity(xi in twist_strategy(3.0)) {
            let p = se3_exp(&xi);
            let i = p * p.inverse();
            prop_assert!((i.to_matrix() - Matrix4::identity()).norm() < 1e-9);
            let r = p.rotation;
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn adjoint_defining_identity(a in twist_strategy(3.0), b in twist_strategy(1.0)) {
            let t = se3_exp(&a);
            let lhs = se3_exp(&Twist(adjoint(&t) * b.0)) * t;
            let rhs = t * se3_exp(&b);
            prop_assert!((lhs.to_matrix() - rhs.to_matrix()).norm() <= 1e-8);
        }

        #[test]
        fn project_backproject_round_trip(
            x in -20.0f64..20.0, y in -20.0f64..20.0, z in 0.05f64..60.0
        ) {
            let c = cam();
            let p = Vector3::new(x, y, z);
            let u = c.project(&p).unwrap();
            let back = c.backproject(&u, 1.0 / z).unwrap();
            let u2 = c.project(&back).unwrap();
            prop_assert!((u - u2).norm() < 1e-9);
            prop_assert_eq!(c.backproject(&u, 1.0 / z).unwrap().z, 1.0 / (1.0 / z));
        }

        #[test]
        fn transform_point_matches_homogeneous(
            xi in twist_strategy(3.0),
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, rho in 0.01f64..2.0
        ) {
            let t = se3_exp(&xi);
            let b = Bearing::from_direction(&Vector3::new(dx, dy, 1.0)).unwrap();
            let p = transform_point(&t, &b, rho);
            let h = b.ray() / rho;
            let oracle = t.to_matrix() * nalgebra::Vector4::new(h.x, h.y, h.z, 1.0);
            let tol = 1e-12 * (1.0 + oracle.xyz().norm());
            prop_assert!((p.point - oracle.xyz()).norm() <= tol);
            prop_assert!((p.scaled - p.point * rho).norm() <= tol * rho.max(1.0));
        }
    }
}
