//! Windowed photometric and depth-prediction bundle adjustment.
//!
//! The energy over keyframe poses, affine brightness parameters and point
//! inverse depths is
//!
//! ```text
//! E = Σ ρ_Hub(r_photo²) + k² Σ ρ_TLS(r_depth²) + w_ab Σ ((a − a₀)² + (b − b₀)²)
//! ```
//!
//! with a depth residual for the host and for every observer of a point.
//! It is minimized by Levenberg-Marquardt over a coarse-to-fine image
//! pyramid. Inverse depths are eliminated per point and the reduced camera
//! system is solved densely.

mod analysis;
pub mod fixture;
mod linearize;
mod snapshot;
mod solver;

use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::config::{OdometryConfig, PhotoAggregation};
use crate::geometry::{CameraModel, Pose};
use crate::image::{Image, Pyramid};
use crate::mapping::{KeyframeId, Map, PointId};
use crate::residuals::AffineBrightness;

pub use analysis::{CostSample, DepthResidualKind, DepthResidualRecord, ObservationStats, RemovedObservation};
pub use snapshot::{ProblemSnapshot, SnapshotError};
pub use solver::{BaStats, DenseSystem, LevelStats, Step};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaError {
    #[error("cost is not finite")]
    SolverDiverged,
    #[error("reduced camera system is not positive definite")]
    RankDeficient,
    #[error("problem has no free keyframe")]
    Empty,
    #[error("point index {0} out of range")]
    UnknownPoint(usize),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaParams {
    /// Balance `k` between photometric and depth terms.
    pub depth_weight: f64,
    pub tls_tau: f64,
    pub huber_delta: f64,
    pub aggregation: PhotoAggregation,
    pub levels: Vec<usize>,
    pub iterations: Vec<usize>,
    pub affine_prior_weight: f64,
    pub lambda_init: f64,
    pub lambda_max: f64,
    pub rel_cost_tol: f64,
    pub outlier_mean_residual: f64,
    pub outlier_pixel_residual: f64,
    pub outlier_pixel_fraction: f64,
    pub threads: usize,
}

impl From<&OdometryConfig> for BaParams {
    fn from(c: &OdometryConfig) -> Self {
        Self {
            depth_weight: c.depth_weight,
            tls_tau: c.tls_tau,
            huber_delta: c.huber_delta,
            aggregation: c.photo_aggregation,
            levels: c.ba_levels.0.clone(),
            iterations: c.ba_iterations.0.clone(),
            affine_prior_weight: c.affine_prior_weight,
            lambda_init: c.ba_lambda_init,
            lambda_max: c.ba_lambda_max,
            rel_cost_tol: c.ba_rel_cost_tol,
            outlier_mean_residual: c.outlier_mean_residual,
            outlier_pixel_residual: c.outlier_pixel_residual,
            outlier_pixel_fraction: c.outlier_pixel_fraction,
            threads: c.threads,
        }
    }
}

impl Default for BaParams {
    fn default() -> Self {
        Self::from(&OdometryConfig::default())
    }
}

/// Which parameters of a frame are optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Freedom {
    Free,
    /// Pose held as gauge anchor; affine parameters stay free.
    PoseFixed,
    Fixed,
}

#[derive(Clone, Debug)]
pub struct BaFrame {
    pub keyframe: KeyframeId,
    /// World-to-camera pose.
    pub pose: Pose,
    pub affine: AffineBrightness,
    pub affine_prior: AffineBrightness,
    pub freedom: Freedom,
    pub pyramid: Arc<Pyramid>,
    pub raster: Arc<Image>,
}

impl BaFrame {
    fn pose_free(&self) -> bool {
        self.freedom == Freedom::Free
    }

    fn affine_free(&self) -> bool {
        self.freedom != Freedom::Fixed
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaPoint {
    pub id: PointId,
    /// Index into the problem's frames.
    pub host: usize,
    pub host_pixel: Vector2<f64>,
    pub rho: f64,
    /// Observer frame indices.
    pub observers: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BaProblem {
    pub camera: CameraModel,
    pub frames: Vec<BaFrame>,
    pub points: Vec<BaPoint>,
    pub params: BaParams,
}

impl BaProblem {
    pub fn new(camera: CameraModel, frames: Vec<BaFrame>, points: Vec<BaPoint>, params: BaParams) -> Self {
        Self {
            camera,
            frames,
            points,
            params,
        }
    }

    /// Problem over `window`: observed points hosted there, plus points
    /// hosted elsewhere but observed from the window. Keyframes outside the window
    /// enter as fixed frames. Without any fixed frame the oldest window pose
    /// anchors the gauge.
    pub fn from_map(map: &Map, window: &[KeyframeId], camera: &CameraModel, params: BaParams) -> Self {
        let mut ids: Vec<KeyframeId> = window.to_vec();
        let mut point_ids = Vec::new();
        for p in map.points.values() {
            if p.observations.is_empty() {
                continue;
            }
            let hosted = window.contains(&p.host);
            let seen = p.observations.iter().any(|o| window.contains(&o.keyframe));
            if !(hosted || seen) {
                continue;
            }
            point_ids.push(p.id);
            for k in std::iter::once(p.host).chain(p.observations.iter().map(|o| o.keyframe)) {
                if !ids.contains(&k) {
                    ids.push(k);
                }
            }
        }
        let anchor_needed = ids.len() == window.len();
        let frames: Vec<BaFrame> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let kf = map.keyframe(*id);
                let freedom = if !window.contains(id) {
                    Freedom::Fixed
                } else if anchor_needed && i == 0 {
                    Freedom::PoseFixed
                } else {
                    Freedom::Free
                };
                BaFrame {
                    keyframe: *id,
                    pose: kf.pose,
                    affine: kf.affine,
                    affine_prior: kf.affine_prior,
                    freedom,
                    pyramid: kf.pyramid.clone(),
                    raster: kf.raster.clone(),
                }
            })
            .collect();
        let index = |k: KeyframeId| ids.iter().position(|x| *x == k).expect("frame");
        let points = point_ids
            .iter()
            .map(|id| {
                let p = &map.points[id];
                BaPoint {
                    id: *id,
                    host: index(p.host),
                    host_pixel: p.host_pixel,
                    rho: p.rho,
                    observers: p.observations.iter().map(|o| index(o.keyframe)).collect(),
                }
            })
            .collect();
        Self::new(*camera, frames, points, params)
    }

    /// Copies optimized states back into the map.
    pub fn write_back(&self, map: &mut Map) {
        for f in &self.frames {
            if f.freedom == Freedom::Fixed {
                continue;
            }
            if let Some(kf) = map.keyframes.get_mut(&f.keyframe) {
                kf.pose = f.pose;
                kf.affine = f.affine;
            }
        }
        for p in &self.points {
            if let Some(mp) = map.points.get_mut(&p.id) {
                mp.rho = p.rho;
            }
        }
    }

    pub fn free_frame_count(&self) -> usize {
        self.frames.iter().filter(|f| f.freedom != Freedom::Fixed).count()
    }

    /// Camera center of the newest non-fixed frame.
    pub fn recenter_offset(&self) -> Vector3<f64> {
        self.frames
            .iter()
            .rev()
            .find(|f| f.freedom != Freedom::Fixed)
            .or(self.frames.last())
            .map(|f| f.pose.inverse().translation)
            .unwrap_or_else(Vector3::zeros)
    }

    /// Moves the world origin to `offset`; residuals are unchanged.
    pub fn shift_origin(&mut self, offset: &Vector3<f64>) {
        for f in &mut self.frames {
            f.pose.translation += f.pose.rotation * offset;
        }
    }

    /// Shifts the world so the newest keyframe sits at the origin and
    /// returns the applied offset.
    pub fn recenter(&mut self) -> Vector3<f64> {
        let offset = self.recenter_offset();
        self.shift_origin(&offset);
        offset
    }

    pub fn uncenter(&mut self, offset: &Vector3<f64>) {
        self.shift_origin(&-offset);
    }
}

#[cfg(test)]
mod tests;
