//! Post-solve quantities: information, outlier observations, residual
//! reports and inverse-depth cost sweeps.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::linearize::Mode;
use super::{BaError, BaProblem};
use crate::mapping::{KeyframeId, PointId};
use crate::residuals::{center_transport, depth_residual_observer, photo_residual_masked, FrameView, PointParams};
use crate::robust::tls;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationStats {
    pub observer: usize,
    /// Mean absolute residual over valid pattern pixels (infinite if none).
    pub mean_residual: f64,
    /// Fraction of pattern pixels that are invalid or at least the outlier
    /// intensity.
    pub outlier_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RemovedObservation {
    pub point: PointId,
    pub keyframe: KeyframeId,
    pub mean_residual: f64,
    pub outlier_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthResidualKind {
    Host,
    Observer(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthResidualRecord {
    pub point: usize,
    pub kind: DepthResidualKind,
    /// Frame whose raster was sampled.
    pub frame: usize,
    /// Raster location (level 0).
    pub pixel: Vector2<f64>,
    pub residual: f64,
    /// TLS weight: 1 inside the threshold, 0 when truncated.
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSample {
    pub rho: f64,
    pub photo: f64,
    pub depth: f64,
    pub total: f64,
}

pub const PROFILE_SAMPLES: usize = 200;

impl BaProblem {
    /// Level-0 pattern statistics of every observation of point `index`.
    pub fn observation_stats(&self, index: usize) -> Vec<ObservationStats> {
        let p = &self.points[index];
        let host = &self.frames[p.host];
        let pp = PointParams {
            host_pixel: p.host_pixel,
            rho: p.rho,
        };
        let hv = FrameView {
            pose: host.pose,
            affine: host.affine,
            image: host.pyramid.level(0),
        };
        let threshold = self.params.outlier_pixel_residual;
        p.observers
            .iter()
            .map(|&o| {
                let f = &self.frames[o];
                let ov = FrameView {
                    pose: f.pose,
                    affine: f.affine,
                    image: f.pyramid.level(0),
                };
                match photo_residual_masked(&pp, &hv, &ov, &self.camera, 0) {
                    Ok(r) => {
                        let bad = r
                            .residuals
                            .iter()
                            .zip(&r.valid)
                            .filter(|(v, ok)| !**ok || v.abs() >= threshold)
                            .count();
                        ObservationStats {
                            observer: o,
                            mean_residual: r.mean_abs(),
                            outlier_fraction: bad as f64 / r.residuals.len() as f64,
                        }
                    }
                    Err(_) => ObservationStats {
                        observer: o,
                        mean_residual: f64::INFINITY,
                        outlier_fraction: 1.0,
                    },
                }
            })
            .collect()
    }

    /// Drops observations whose mean pattern residual exceeds the limit or
    /// whose outlier-pixel fraction is above the allowed share.
    pub fn discard_outlier_observations(&mut self) -> Vec<RemovedObservation> {
        let mut removed = Vec::new();
        for j in 0..self.points.len() {
            let stats = self.observation_stats(j);
            let keep: Vec<bool> = stats
                .iter()
                .map(|s| {
                    !(s.mean_residual > self.params.outlier_mean_residual
                        || s.outlier_fraction > self.params.outlier_pixel_fraction)
                })
                .collect();
            for (s, &k) in stats.iter().zip(&keep) {
                if !k {
                    removed.push(RemovedObservation {
                        point: self.points[j].id,
                        keyframe: self.frames[s.observer].keyframe,
                        mean_residual: s.mean_residual,
                        outlier_fraction: s.outlier_fraction,
                    });
                }
            }
            let mut it = keep.iter();
            self.points[j].observers.retain(|_| *it.next().expect("flag"));
        }
        removed
    }

    /// `∂²E/∂ρ²` of every point in the Gauss-Newton sense at level 0.
    pub fn idepth_information(&self) -> Vec<f64> {
        (0..self.points.len())
            .map(|j| self.eval_point(j, 0, Mode::Normal).h_pp)
            .collect()
    }

    /// Every depth residual at the current state.
    pub fn depth_residual_report(&self) -> Vec<DepthResidualRecord> {
        let tau = self.params.tls_tau;
        let mut out = Vec::new();
        for (j, p) in self.points.iter().enumerate() {
            let host = &self.frames[p.host];
            if let Some(d) = host.raster.interpolate(p.host_pixel.x, p.host_pixel.y) {
                let r = d - p.rho;
                out.push(DepthResidualRecord {
                    point: j,
                    kind: DepthResidualKind::Host,
                    frame: p.host,
                    pixel: p.host_pixel,
                    residual: r,
                    weight: tls(r * r, tau).weight,
                });
            }
            let pp = PointParams {
                host_pixel: p.host_pixel,
                rho: p.rho,
            };
            for &o in &p.observers {
                let f = &self.frames[o];
                if let Ok(res) = depth_residual_observer(&pp, &host.pose, &f.pose, f.raster.as_ref(), &self.camera) {
                    out.push(DepthResidualRecord {
                        point: j,
                        kind: DepthResidualKind::Observer(o),
                        frame: o,
                        pixel: res.pixel,
                        residual: res.residual,
                        weight: tls(res.residual * res.residual, tau).weight,
                    });
                }
            }
        }
        out
    }

    /// Photometric and depth cost of one point over `ρ ∈ [0.1ρ*, 3ρ*]`,
    /// everything else held fixed.
    pub fn cost_profile(&self, index: usize) -> Result<Vec<CostSample>, BaError> {
        let p = self.points.get(index).ok_or(BaError::UnknownPoint(index))?;
        let rho_star = p.rho;
        let mut work = self.clone();
        let mut photo_only = self.clone();
        photo_only.params.depth_weight = 0.0;
        let (lo, hi) = (0.1 * rho_star, 3.0 * rho_star);
        let samples = (0..PROFILE_SAMPLES)
            .map(|i| {
                let rho = lo + (hi - lo) * i as f64 / (PROFILE_SAMPLES - 1) as f64;
                work.points[index].rho = rho;
                photo_only.points[index].rho = rho;
                let total = work.eval_point(index, 0, Mode::Cost).cost;
                let photo = photo_only.eval_point(index, 0, Mode::Cost).cost;
                CostSample {
                    rho,
                    photo,
                    depth: total - photo,
                    total,
                }
            })
            .collect();
        Ok(samples)
    }

    /// Whether an observer's center ray lands inside its raster.
    pub fn observer_visible(&self, index: usize, observer: usize) -> bool {
        let p = &self.points[index];
        let pp = PointParams {
            host_pixel: p.host_pixel,
            rho: p.rho,
        };
        center_transport(&pp, &self.frames[p.host].pose, &self.frames[observer].pose, &self.camera)
            .is_ok_and(|t| self.camera.in_bounds(&t.pixel, 0.0))
    }
}
