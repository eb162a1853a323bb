//! Photometric and depth-prediction residuals with analytic Jacobians.
//!
//! A point hosted in keyframe `h` and observed by keyframe `i` is moved as
//! `x_i = R_ih x̄ / ρ + t_ih` with `T_ih = T_i T_h⁻¹`, where poses map world
//! to camera coordinates. Pose increments are applied on the world side,
//! `T ← T · Exp(ξ)`, which makes the host and observer pose Jacobians
//! exact negatives of each other:
//!
//! ```text
//! ∂x_i/∂ξ_i = (I₃ | −[x_i]×) Ad(T_i) = G,     ∂x_i/∂ξ_h = −G
//! ```
//!
//! The same `G`, the projection derivative and `t_ih` are shared by the
//! photometric and the depth residual; the depth residual only adds the
//! raster gradient.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3x6, RowVector6, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{adjoint, skew, Bearing, CameraModel, Pose};
use crate::image::Sampler;

/// Pixel offsets of the residual pattern around a point's host pixel.
pub const PATTERN: [(i32, i32); 8] = [
    (0, 0),
    (-2, 0),
    (2, 0),
    (0, -2),
    (0, 2),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

pub const PATTERN_LEN: usize = PATTERN.len();

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ResidualError {
    #[error("pattern pixel projects outside the image")]
    OutOfBounds,
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("inverse depth must be positive")]
    NonPositiveInverseDepth,
}

/// Exposure model `I ≈ e^a · L + b`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineBrightness {
    pub a: f64,
    pub b: f64,
}

impl AffineBrightness {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }
}

/// Read-only view of a keyframe at one pyramid level.
#[derive(Clone, Copy)]
pub struct FrameView<'a, S: ?Sized> {
    /// World-to-camera pose.
    pub pose: Pose,
    pub affine: AffineBrightness,
    pub image: &'a S,
}

/// Host-anchored inverse-depth point, host pixel in level-0 coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointParams {
    pub host_pixel: Vector2<f64>,
    pub rho: f64,
}

/// Geometric terms shared between photometric and depth residuals.
#[derive(Clone, Copy, Debug)]
pub struct Transport {
    /// `R_ih x̄`
    pub rotated_ray: Vector3<f64>,
    /// `t_ih`
    pub translation: Vector3<f64>,
    /// `x_i`
    pub point: Vector3<f64>,
    /// Projection of `x_i`.
    pub pixel: Vector2<f64>,
    /// `∂π/∂x` evaluated at `ρ x_i`.
    pub d_project: Matrix2x3<f64>,
    /// `G = (I₃ | −[x_i]×) Ad(T_i)`
    pub pose_basis: Matrix3x6<f64>,
}

/// Relative pose plus the adjoint of the observer, reused across the pattern.
#[derive(Clone, Copy, Debug)]
pub struct PairGeometry {
    pub t_ih: Pose,
    pub observer_adjoint: nalgebra::Matrix6<f64>,
}

impl PairGeometry {
    pub fn new(host_pose: &Pose, observer_pose: &Pose) -> Self {
        Self {
            t_ih: observer_pose.compose(&host_pose.inverse()),
            observer_adjoint: adjoint(observer_pose),
        }
    }

    pub fn transport(
        &self,
        ray: &Vector3<f64>,
        rho: f64,
        camera: &CameraModel,
    ) -> Result<Transport, ResidualError> {
        if !(rho > 0.0) {
            return Err(ResidualError::NonPositiveInverseDepth);
        }
        let rotated_ray = self.t_ih.rotation * ray;
        let translation = self.t_ih.translation;
        let scaled = rotated_ray + translation * rho;
        if scaled.z <= crate::geometry::MIN_DEPTH * rho {
            return Err(ResidualError::BehindCamera);
        }
        let point = scaled / rho;
        let pixel = Vector2::new(
            camera.fx * scaled.x / scaled.z + camera.cx,
            camera.fy * scaled.y / scaled.z + camera.cy,
        );
        let d_project = camera.project_jacobian(&scaled);
        let mut basis = Matrix3x6::zeros();
        basis
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&nalgebra::Matrix3::identity());
        basis.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&point)));
        let pose_basis = basis * self.observer_adjoint;
        Ok(Transport {
            rotated_ray,
            translation,
            point,
            pixel,
            d_project,
            pose_basis,
        })
    }
}

/// Derivatives of one scalar residual.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResidualJacobians {
    pub d_rho: f64,
    pub d_xi_host: RowVector6<f64>,
    pub d_xi_observer: RowVector6<f64>,
    /// `(∂r/∂a_h, ∂r/∂b_h)`
    pub d_affine_host: Vector2<f64>,
    /// `(∂r/∂a_i, ∂r/∂b_i)`
    pub d_affine_observer: Vector2<f64>,
}

impl ResidualJacobians {
    fn accumulate(&mut self, other: &ResidualJacobians) {
        self.d_rho += other.d_rho;
        self.d_xi_host += other.d_xi_host;
        self.d_xi_observer += other.d_xi_observer;
        self.d_affine_host += other.d_affine_host;
        self.d_affine_observer += other.d_affine_observer;
    }
}

/// Per-pattern-pixel photometric residuals with a validity mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotoResidual {
    pub residuals: [f64; PATTERN_LEN],
    pub valid: [bool; PATTERN_LEN],
}

impl PhotoResidual {
    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn valid_residuals(&self) -> impl Iterator<Item = f64> + '_ {
        self.residuals
            .iter()
            .zip(self.valid.iter())
            .filter(|(_, &v)| v)
            .map(|(&r, _)| r)
    }

    pub fn patch_sum(&self) -> f64 {
        self.valid_residuals().sum()
    }

    /// Mean absolute residual over valid pattern pixels.
    pub fn mean_abs(&self) -> f64 {
        let n = self.valid.iter().filter(|&&v| v).count();
        if n == 0 {
            return f64::INFINITY;
        }
        self.valid_residuals().map(f64::abs).sum::<f64>() / n as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PhotoLinearization {
    pub residual: PhotoResidual,
    pub jacobians: [ResidualJacobians; PATTERN_LEN],
}

impl PhotoLinearization {
    /// Jacobian of the pattern-summed residual.
    pub fn patch_sum_jacobian(&self) -> ResidualJacobians {
        let mut sum = ResidualJacobians::default();
        for j in &self.jacobians {
            sum.accumulate(j);
        }
        sum
    }
}

/// Host-level pattern pixel position for pattern index `k` at `level`.
pub fn pattern_pixel(host_pixel: &Vector2<f64>, k: usize, level: usize) -> Vector2<f64> {
    let s = 0.5f64.powi(level as i32);
    let (dx, dy) = PATTERN[k];
    Vector2::new(
        (host_pixel.x + 0.5) * s - 0.5 + dx as f64,
        (host_pixel.y + 0.5) * s - 0.5 + dy as f64,
    )
}

fn photo_eval<S: Sampler + ?Sized>(
    point: &PointParams,
    host: &FrameView<'_, S>,
    observer: &FrameView<'_, S>,
    camera: &CameraModel,
    level: usize,
    with_jacobians: bool,
) -> Result<(PhotoResidual, [ResidualJacobians; PATTERN_LEN]), ResidualError> {
    let cam = camera.at_level(level);
    let pair = PairGeometry::new(&host.pose, &observer.pose);
    let gain = (host.affine.a - observer.affine.a).exp();
    let mut residual = PhotoResidual {
        residuals: [f64::NAN; PATTERN_LEN],
        valid: [false; PATTERN_LEN],
    };
    let mut jacobians = [ResidualJacobians::default(); PATTERN_LEN];
    for k in 0..PATTERN_LEN {
        let uh = pattern_pixel(&point.host_pixel, k, level);
        let transport = pair.transport(&cam.ray(&uh), point.rho, &cam)?;
        let Some(host_sample) = host.image.sample(uh.x, uh.y) else {
            continue;
        };
        let Some(obs_sample) = observer.image.sample(transport.pixel.x, transport.pixel.y) else {
            continue;
        };
        let centered = obs_sample.value - observer.affine.b;
        residual.residuals[k] = host_sample.value - host.affine.b - gain * centered;
        residual.valid[k] = true;
        if with_jacobians {
            let grad_proj = obs_sample.gradient.transpose() * transport.d_project;
            let d_rho = -gain * (grad_proj * transport.translation)[0];
            // Host row: ρ (e^{a_h}/e^{a_i}) ∇I ∂π G; observer is its negation.
            let d_xi_host = (grad_proj * transport.pose_basis) * (point.rho * gain);
            jacobians[k] = ResidualJacobians {
                d_rho,
                d_xi_host,
                d_xi_observer: -d_xi_host,
                d_affine_host: Vector2::new(-gain * centered, -1.0),
                d_affine_observer: Vector2::new(gain * centered, gain),
            };
        }
    }
    Ok((residual, jacobians))
}

/// Photometric residual of every pattern pixel, masking unsampleable pixels.
pub fn photo_residual_masked<S: Sampler + ?Sized>(
    point: &PointParams,
    host: &FrameView<'_, S>,
    observer: &FrameView<'_, S>,
    camera: &CameraModel,
    level: usize,
) -> Result<PhotoResidual, ResidualError> {
    photo_eval(point, host, observer, camera, level, false).map(|(r, _)| r)
}

/// Photometric residual; fails if any pattern pixel cannot be sampled.
///
/// `host` and `observer` must view images at `level`; `camera` is the
/// full-resolution model.
pub fn photo_residual<S: Sampler + ?Sized>(
    point: &PointParams,
    host: &FrameView<'_, S>,
    observer: &FrameView<'_, S>,
    camera: &CameraModel,
    level: usize,
) -> Result<PhotoResidual, ResidualError> {
    let r = photo_residual_masked(point, host, observer, camera, level)?;
    if r.all_valid() {
        Ok(r)
    } else {
        Err(ResidualError::OutOfBounds)
    }
}

/// Residuals and Jacobians of every pattern pixel; Jacobians of invalid
/// pixels are zero.
pub fn photo_linearize_masked<S: Sampler + ?Sized>(
    point: &PointParams,
    host: &FrameView<'_, S>,
    observer: &FrameView<'_, S>,
    camera: &CameraModel,
    level: usize,
) -> Result<PhotoLinearization, ResidualError> {
    let (residual, jacobians) = photo_eval(point, host, observer, camera, level, true)?;
    Ok(PhotoLinearization {
        residual,
        jacobians,
    })
}

/// Photometric residuals with their analytic Jacobians.
pub fn photo_jacobian<S: Sampler + ?Sized>(
    point: &PointParams,
    host: &FrameView<'_, S>,
    observer: &FrameView<'_, S>,
    camera: &CameraModel,
    level: usize,
) -> Result<PhotoLinearization, ResidualError> {
    let (residual, jacobians) = photo_eval(point, host, observer, camera, level, true)?;
    if !residual.all_valid() {
        return Err(ResidualError::OutOfBounds);
    }
    Ok(PhotoLinearization {
        residual,
        jacobians,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthResidual {
    /// `D_NN(u) − ρ_i`, in m⁻¹.
    pub residual: f64,
    /// Inverse depth of the point in the frame the raster belongs to.
    pub inverse_depth: f64,
    /// Raster location that was sampled (level 0).
    pub pixel: Vector2<f64>,
}

/// Geometry of the point's center ray at full resolution.
pub fn center_transport(
    point: &PointParams,
    host_pose: &Pose,
    observer_pose: &Pose,
    camera: &CameraModel,
) -> Result<Transport, ResidualError> {
    PairGeometry::new(host_pose, observer_pose).transport(
        &camera.ray(&point.host_pixel),
        point.rho,
        camera,
    )
}

/// Observer-frame depth-prediction residual `D_i(u_i) − [x_i]_z⁻¹`.
pub fn depth_residual_observer<D: Sampler + ?Sized>(
    point: &PointParams,
    host_pose: &Pose,
    observer_pose: &Pose,
    raster: &D,
    camera: &CameraModel,
) -> Result<DepthResidual, ResidualError> {
    let transport = center_transport(point, host_pose, observer_pose, camera)?;
    let sample = raster
        .sample(transport.pixel.x, transport.pixel.y)
        .ok_or(ResidualError::OutOfBounds)?;
    let inverse_depth = 1.0 / transport.point.z;
    Ok(DepthResidual {
        residual: sample.value - inverse_depth,
        inverse_depth,
        pixel: transport.pixel,
    })
}

/// Host-frame depth-prediction residual `D_h(u_h) − ρ`.
pub fn depth_residual_host(raster_value: f64, rho: f64) -> DepthResidual {
    DepthResidual {
        residual: raster_value - rho,
        inverse_depth: rho,
        pixel: Vector2::new(f64::NAN, f64::NAN),
    }
}

/// Jacobian of the host-form depth residual: only `∂r/∂ρ = −1`.
pub fn depth_host_jacobian() -> ResidualJacobians {
    ResidualJacobians {
        d_rho: -1.0,
        ..Default::default()
    }
}

/// Observer depth residual and Jacobians from precomputed shared terms.
pub fn depth_jacobian_with<D: Sampler + ?Sized>(
    transport: &Transport,
    rho: f64,
    raster: &D,
) -> Result<(DepthResidual, ResidualJacobians), ResidualError> {
    let sample = raster
        .sample(transport.pixel.x, transport.pixel.y)
        .ok_or(ResidualError::OutOfBounds)?;
    let inverse_depth = 1.0 / transport.point.z;
    let grad_proj = sample.gradient.transpose() * transport.d_project;
    let ratio = inverse_depth / rho;
    let d_rho = (grad_proj * transport.translation)[0] - ratio * ratio * transport.rotated_ray.z;
    // ∂r/∂x_i = ρ ∇D ∂π|_{ρx} + (0, 0, ρ_i²); observer gets +G, host −G.
    let mut d_point = grad_proj * rho;
    d_point[2] += inverse_depth * inverse_depth;
    let d_xi_observer = d_point * transport.pose_basis;
    Ok((
        DepthResidual {
            residual: sample.value - inverse_depth,
            inverse_depth,
            pixel: transport.pixel,
        },
        ResidualJacobians {
            d_rho,
            d_xi_host: -d_xi_observer,
            d_xi_observer,
            ..Default::default()
        },
    ))
}

pub fn depth_jacobian<D: Sampler + ?Sized>(
    point: &PointParams,
    host_pose: &Pose,
    observer_pose: &Pose,
    raster: &D,
    camera: &CameraModel,
) -> Result<(DepthResidual, ResidualJacobians), ResidualError> {
    let transport = center_transport(point, host_pose, observer_pose, camera)?;
    depth_jacobian_with(&transport, point.rho, raster)
}

/// Host bearing of the point's center pixel.
pub fn bearing_of(point: &PointParams, camera: &CameraModel) -> Bearing {
    Bearing::from_pixel(camera, &point.host_pixel)
}

/// Worst relative error between an analytic Jacobian and extrapolated
/// central differences.
///
/// `residual_fn` maps a perturbation `δ` in the local chart (δ = 0 is the
/// linearization point) to the residual vector. The error of parameter
/// column `j` is `max_i |A_ij − F_ij| / max(max_i |F_ij|, s)`, where `s` is
/// 1% of the largest difference quotient of the whole block, so columns
/// that are negligible next to the others are not judged on round-off.
pub fn fd_check<F>(residual_fn: F, analytic: &DMatrix<f64>, eps: f64) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = analytic.ncols();
    let central = |j: usize, h: f64| {
        let mut d = DVector::zeros(n);
        d[j] = h;
        let plus = residual_fn(&d);
        d[j] = -h;
        let minus = residual_fn(&d);
        (plus - minus) / (2.0 * h)
    };
    // Richardson extrapolation of two central differences: O(eps⁴).
    let fd: Vec<DVector<f64>> = (0..n)
        .map(|j| (central(j, 0.5 * eps) * 4.0 - central(j, eps)) / 3.0)
        .collect();
    let floor = fd.iter().map(|c| c.amax()).fold(0.0, f64::max).max(1e-7) * 1e-2;
    fd.iter()
        .enumerate()
        .map(|(j, f)| (analytic.column(j) - f).amax() / f.amax().max(floor))
        .fold(0.0, f64::max)
}
