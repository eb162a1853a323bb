//! Frame-to-keyframe direct image alignment.
//!
//! Active map points are projected into the reference keyframe and dilated
//! into a sparse inverse-depth map. Each new frame is aligned to that map by
//! coarse-to-fine Levenberg-Marquardt over the relative pose and a relative
//! affine brightness `(a, b)`, with residual
//!
//! ```text
//! r = I_ref(u) − e^{−a} (I(π(T X_u)) − b)
//! ```
//!
//! The default solver is inverse compositional: geometric Jacobians are
//! taken on the reference image, precomputed once per level, and the pose
//! is updated as `T ← T · Exp(δ)⁻¹`.

use std::sync::Arc;

use nalgebra::{Matrix3, Matrix6x1, RowVector6, SMatrix, SVector, Vector2, Vector3};
use thiserror::Error;

use crate::config::{AlignmentMethod, OdometryConfig};
use crate::geometry::{se3_exp, skew, CameraModel, Pose, Twist, MIN_DEPTH};
use crate::image::{Pyramid, Sampler};
use crate::residuals::AffineBrightness;
use crate::robust::huber;

type Mat8 = SMatrix<f64, 8, 8>;
type Vec8 = SVector<f64, 8>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("no active point projects into the reference keyframe")]
    EmptyMap,
    #[error("tracking lost: {valid} valid projections, mean residual {mean_residual:.2}")]
    TrackingLost { valid: usize, mean_residual: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthEntry {
    pub x: u32,
    pub y: u32,
    /// Inverse depth in the reference frame, m⁻¹.
    pub idepth: f64,
    pub weight: f64,
}

/// Inverse depth on a sparse set of reference-image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthMap {
    pub width: usize,
    pub height: usize,
    /// Sorted by `(y, x)`.
    entries: Vec<DepthEntry>,
}

/// A point to be splatted into the depth map.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedPoint {
    /// Level-0 pixel in the reference keyframe.
    pub pixel: Vector2<f64>,
    pub idepth: f64,
    pub weight: f64,
}

impl SparseDepthMap {
    /// Rounds every point to its pixel and dilates it by `radius`.
    ///
    /// Where dilated points collide the higher weight wins; on equal
    /// weights the earlier point is kept.
    pub fn from_points(
        points: &[ProjectedPoint],
        width: usize,
        height: usize,
        radius: usize,
    ) -> Result<Self, TrackingError> {
        let mut grid: Vec<Option<DepthEntry>> = vec![None; width * height];
        let r = radius as i64;
        for p in points {
            if !(p.idepth > 0.0 && p.idepth.is_finite() && p.weight.is_finite()) {
                continue;
            }
            let (cx, cy) = (p.pixel.x.round() as i64, p.pixel.y.round() as i64);
            if cx < 0 || cy < 0 || cx >= width as i64 || cy >= height as i64 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                        continue;
                    }
                    let slot = &mut grid[y as usize * width + x as usize];
                    if slot.is_none_or(|e| p.weight > e.weight) {
                        *slot = Some(DepthEntry {
                            x: x as u32,
                            y: y as u32,
                            idepth: p.idepth,
                            weight: p.weight,
                        });
                    }
                }
            }
        }
        let entries: Vec<DepthEntry> = grid.into_iter().flatten().collect();
        if entries.is_empty() {
            return Err(TrackingError::EmptyMap);
        }
        Ok(Self {
            width,
            height,
            entries,
        })
    }

    pub fn entries(&self) -> &[DepthEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, x: u32, y: u32) -> Option<&DepthEntry> {
        self.entries
            .binary_search_by(|e| (e.y, e.x).cmp(&(y, x)))
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// A host-anchored point to be moved into the reference keyframe.
#[derive(Clone, Copy, Debug)]
pub struct ActivePoint {
    pub host_pose: Pose,
    /// Host ray at unit depth.
    pub ray: Vector3<f64>,
    pub rho: f64,
    pub information: f64,
}

/// Projects active points into the reference keyframe and dilates them.
pub fn build_sparse_depth_map(
    reference_pose: &Pose,
    camera: &CameraModel,
    points: &[ActivePoint],
    cfg: &OdometryConfig,
) -> Result<SparseDepthMap, TrackingError> {
    let projected: Vec<ProjectedPoint> = points
        .iter()
        .filter_map(|p| {
            let t = reference_pose.compose(&p.host_pose.inverse());
            let x = t.transform(&(p.ray / p.rho));
            if x.z <= MIN_DEPTH {
                return None;
            }
            let pixel = camera.project(&x).ok()?;
            camera.in_bounds(&pixel, 0.0).then_some(ProjectedPoint {
                pixel,
                idepth: 1.0 / x.z,
                weight: p.information.clamp(cfg.weight_min, cfg.weight_max),
            })
        })
        .collect();
    SparseDepthMap::from_points(&projected, camera.width, camera.height, cfg.dilation_radius)
}

/// Relative state of a frame with respect to the reference keyframe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameState {
    /// Reference-to-frame pose `T_i_ref`.
    pub pose: Pose,
    pub affine: AffineBrightness,
    pub inlier_ratio: f64,
    pub mean_residual: f64,
    pub converged: bool,
}

impl FrameState {
    pub fn new(pose: Pose, affine: AffineBrightness) -> Self {
        Self {
            pose,
            affine,
            inlier_ratio: 0.0,
            mean_residual: f64::INFINITY,
            converged: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct TemplatePoint {
    point: Vector3<f64>,
    value: f64,
    weight: f64,
    /// `∇I_ref ∂π (I | −[X]×)`
    j_geo: RowVector6<f64>,
}

#[derive(Clone, Debug)]
struct TemplateLevel {
    camera: CameraModel,
    points: Vec<TemplatePoint>,
}

/// Reference keyframe data precomputed for alignment.
#[derive(Clone, Debug)]
pub struct TrackingReference {
    levels: Vec<TemplateLevel>,
    entries: usize,
}

impl TrackingReference {
    pub fn new(pyramid: &Pyramid, camera: &CameraModel, depth: &SparseDepthMap) -> Self {
        let mut levels = Vec::with_capacity(pyramid.num_levels());
        for l in 0..pyramid.num_levels() {
            let cam = camera.at_level(l);
            let img = pyramid.level(l);
            let (w, h) = (img.image.width(), img.image.height());
            // Weighted inverse-depth average and summed weight per level cell.
            let mut acc: Vec<(f64, f64)> = vec![(0.0, 0.0); w * h];
            for e in depth.entries() {
                let (x, y) = ((e.x >> l) as usize, (e.y >> l) as usize);
                if x < w && y < h {
                    let a = &mut acc[y * w + x];
                    a.0 += e.weight * e.idepth;
                    a.1 += e.weight;
                }
            }
            let mut points = Vec::new();
            for (i, &(wi, ws)) in acc.iter().enumerate() {
                if ws <= 0.0 {
                    continue;
                }
                let (x, y) = (i % w, i / w);
                let idepth = wi / ws;
                let point = cam.ray(&Vector2::new(x as f64, y as f64)) / idepth;
                let grad = img.gradient_at(x, y).transpose();
                let mut basis = SMatrix::<f64, 3, 6>::zeros();
                basis.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
                basis.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&point)));
                points.push(TemplatePoint {
                    point,
                    value: img.image.get(x, y) as f64,
                    weight: ws,
                    j_geo: grad * cam.project_jacobian(&point) * basis,
                });
            }
            levels.push(TemplateLevel { camera: cam, points });
        }
        Self {
            levels,
            entries: depth.len(),
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Evaluation {
    cost: f64,
    valid: usize,
    inliers: usize,
    abs_sum: f64,
}

impl Evaluation {
    fn mean_residual(&self) -> f64 {
        if self.valid == 0 {
            f64::INFINITY
        } else {
            self.abs_sum / self.valid as f64
        }
    }
}

struct LevelSolver<'a> {
    level: &'a TemplateLevel,
    image: &'a crate::image::Image,
    delta: f64,
    method: AlignmentMethod,
}

impl LevelSolver<'_> {
    /// Robust cost; template points that leave the frame pay `weight · δ²`.
    fn evaluate(&self, pose: &Pose, affine: &AffineBrightness) -> Evaluation {
        let mut ev = Evaluation::default();
        let gain = (-affine.a).exp();
        let oob = self.delta * self.delta;
        for p in &self.level.points {
            let x = pose.transform(&p.point);
            let sample = (x.z > MIN_DEPTH)
                .then(|| self.level.camera.project(&x).ok())
                .flatten()
                .and_then(|u| self.image.sample(u.x, u.y));
            match sample {
                Some(s) => {
                    let r = p.value - gain * (s.value - affine.b);
                    ev.cost += p.weight * huber(r * r, self.delta).cost;
                    ev.valid += 1;
                    ev.abs_sum += r.abs();
                    if r.abs() < self.delta {
                        ev.inliers += 1;
                    }
                }
                None => ev.cost += p.weight * oob,
            }
        }
        ev
    }

    fn normal_equations(&self, pose: &Pose, affine: &AffineBrightness) -> (Mat8, Vec8) {
        let mut hess = Mat8::zeros();
        let mut grad = Vec8::zeros();
        let gain = (-affine.a).exp();
        for p in &self.level.points {
            let x = pose.transform(&p.point);
            if x.z <= MIN_DEPTH {
                continue;
            }
            let Ok(u) = self.level.camera.project(&x) else {
                continue;
            };
            let Some(s) = self.image.sample(u.x, u.y) else {
                continue;
            };
            let centered = s.value - affine.b;
            let r = p.value - gain * centered;
            let w = p.weight * huber(r * r, self.delta).weight;
            let j_pose = match self.method {
                AlignmentMethod::InverseCompositional => p.j_geo,
                AlignmentMethod::ForwardCompositional => {
                    let mut basis = SMatrix::<f64, 3, 6>::zeros();
                    basis.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
                    basis.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&p.point)));
                    (s.gradient.transpose() * self.level.camera.project_jacobian(&x) * pose.rotation * basis)
                        * (-gain)
                }
            };
            let mut j = Vec8::zeros();
            j.fixed_rows_mut::<6>(0).copy_from(&j_pose.transpose());
            j[6] = gain * centered;
            j[7] = gain;
            hess += j * j.transpose() * w;
            grad += j * (w * r);
        }
        (hess, grad)
    }

    fn apply(&self, pose: &Pose, affine: &AffineBrightness, step: &Vec8) -> (Pose, AffineBrightness) {
        let xi = Twist(Matrix6x1::from_iterator(step.fixed_rows::<6>(0).iter().copied()));
        let inc = se3_exp(&xi);
        let pose = match self.method {
            AlignmentMethod::InverseCompositional => pose.compose(&inc.inverse()),
            AlignmentMethod::ForwardCompositional => pose.compose(&inc),
        };
        (
            pose.renormalized(),
            AffineBrightness::new(affine.a + step[6], affine.b + step[7]),
        )
    }
}

/// Per-level record of a tracking solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelTrace {
    pub level: usize,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
    pub converged: bool,
    pub mean_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingResult {
    pub state: FrameState,
    pub trace: Vec<LevelTrace>,
    pub retried: bool,
}

impl TrackingResult {
    fn coarsest(&self) -> Option<&LevelTrace> {
        self.trace.first()
    }
}

fn solve_level(
    solver: &LevelSolver<'_>,
    level: usize,
    init: (Pose, AffineBrightness),
    cfg: &OdometryConfig,
) -> (Pose, AffineBrightness, Evaluation, LevelTrace) {
    let (mut pose, mut affine) = init;
    let mut ev = solver.evaluate(&pose, &affine);
    let mut trace = LevelTrace {
        level,
        costs: vec![ev.cost],
        ..Default::default()
    };
    let mut lambda = cfg.tracking_lambda_init;
    for _ in 0..cfg.tracking_max_iterations {
        trace.iterations += 1;
        let (hess, grad) = solver.normal_equations(&pose, &affine);
        let mut accepted = false;
        while lambda < 1e10 {
            let mut damped = hess;
            for i in 0..8 {
                damped[(i, i)] += lambda * hess[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 2.0;
                continue;
            };
            let step = -chol.solve(&grad);
            let (p_new, a_new) = solver.apply(&pose, &affine, &step);
            let ev_new = solver.evaluate(&p_new, &a_new);
            if ev_new.cost < ev.cost {
                let rel = (ev.cost - ev_new.cost) / ev.cost.max(1e-300);
                pose = p_new;
                affine = a_new;
                ev = ev_new;
                trace.costs.push(ev.cost);
                lambda *= 0.5;
                accepted = true;
                if rel < cfg.tracking_rel_cost_tol || step.norm() < cfg.tracking_step_tol {
                    trace.converged = true;
                }
                break;
            }
            lambda *= 2.0;
        }
        if !accepted {
            trace.converged = true;
        }
        if trace.converged {
            break;
        }
    }
    trace.mean_residual = ev.mean_residual();
    (pose, affine, ev, trace)
}

/// Coarse-to-fine alignment of `frame` against the reference.
pub fn track_frame(
    frame: &Pyramid,
    reference: &TrackingReference,
    init: FrameState,
    cfg: &OdometryConfig,
) -> Result<TrackingResult, TrackingError> {
    let levels = reference
        .num_levels()
        .min(frame.num_levels())
        .min(cfg.pyramid_levels);
    let mut pose = init.pose;
    let mut affine = init.affine;
    let mut trace = Vec::with_capacity(levels);
    let mut last = Evaluation::default();
    for l in (0..levels).rev() {
        let solver = LevelSolver {
            level: &reference.levels[l],
            image: frame.image(l),
            delta: cfg.tracking_huber_delta,
            method: cfg.tracking_method,
        };
        let (p, a, ev, t) = solve_level(&solver, l, (pose, affine), cfg);
        pose = p;
        affine = a;
        last = ev;
        trace.push(t);
    }
    let mean_residual = last.mean_residual();
    if last.valid < cfg.tracking_min_valid
        || !(mean_residual <= cfg.tracking_max_mean_residual)
        || !(affine.a.abs() <= cfg.tracking_max_log_gain)
    {
        return Err(TrackingError::TrackingLost {
            valid: last.valid,
            mean_residual,
        });
    }
    let converged = trace.last().is_some_and(|t| t.converged);
    Ok(TrackingResult {
        state: FrameState {
            pose,
            affine,
            inlier_ratio: last.inliers as f64 / reference.entries.max(1) as f64,
            mean_residual,
            converged,
        },
        trace,
        retried: false,
    })
}

impl TrackingResult {
    /// Mean residual reached at the coarsest level.
    pub fn coarsest_residual(&self) -> f64 {
        self.coarsest().map_or(f64::INFINITY, |t| t.mean_residual)
    }
}

/// Whether the coarsest level failed to converge.
///
/// A solve counts as failed when it ends above the absolute ceiling, or
/// above `retry_relative_factor` times the coarsest residual of the last
/// successfully tracked frame.
pub fn needs_retry(
    result: &Result<TrackingResult, TrackingError>,
    previous_coarsest: Option<f64>,
    cfg: &OdometryConfig,
) -> bool {
    match result {
        Ok(r) => {
            let res = r.coarsest_residual();
            let relative = previous_coarsest.map_or(f64::INFINITY, |p| cfg.retry_relative_factor * p);
            !(res <= cfg.retry_residual_ceiling && res <= relative)
        }
        Err(_) => true,
    }
}

/// The six initializations rotated by ±`angle` about each camera axis.
pub fn rotation_candidates(init: &FrameState, angle_deg: f64) -> Vec<FrameState> {
    let a = angle_deg.to_radians();
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut w = Vector3::zeros();
            w[axis] = sign * a;
            let r = crate::geometry::so3_exp(&w);
            let mut s = *init;
            s.pose = Pose::new(r * init.pose.rotation, init.pose.translation);
            out.push(s);
        }
    }
    out
}

/// Re-runs alignment from rotated initializations, keeping the best.
pub fn retry_with_rotations(
    frame: &Pyramid,
    reference: &TrackingReference,
    init: FrameState,
    cfg: &OdometryConfig,
) -> Result<TrackingResult, TrackingError> {
    let mut best: Option<TrackingResult> = None;
    let mut last_err = TrackingError::TrackingLost {
        valid: 0,
        mean_residual: f64::INFINITY,
    };
    for cand in rotation_candidates(&init, cfg.retry_angle_deg) {
        match track_frame(frame, reference, cand, cfg) {
            Ok(r) => {
                if best
                    .as_ref()
                    .is_none_or(|b| r.state.mean_residual < b.state.mean_residual)
                {
                    best = Some(r);
                }
            }
            Err(e) => last_err = e,
        }
    }
    best.map(|mut b| {
        b.retried = true;
        b
    })
    .ok_or(last_err)
}

/// Alignment with the rotation retry when the coarsest level fails.
///
/// The unperturbed solve competes with the rotated candidates.
pub fn track_with_recovery(
    frame: &Pyramid,
    reference: &TrackingReference,
    init: FrameState,
    previous_coarsest: Option<f64>,
    cfg: &OdometryConfig,
) -> Result<TrackingResult, TrackingError> {
    let first = track_frame(frame, reference, init, cfg);
    if !needs_retry(&first, previous_coarsest, cfg) {
        return first;
    }
    match (first, retry_with_rotations(frame, reference, init, cfg)) {
        (Ok(a), Ok(b)) => Ok(if b.state.mean_residual < a.state.mean_residual { b } else { a }),
        (Ok(a), Err(_)) => Ok(a),
        (Err(_), r) => r,
    }
}

/// A reference keyframe ready for alignment.
#[derive(Clone, Debug)]
pub struct ReferenceFrame {
    pub pyramid: Arc<Pyramid>,
    pub depth: SparseDepthMap,
    pub template: TrackingReference,
}
