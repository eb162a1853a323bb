//! Bundle-adjustment problems built from a synthetic scene.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BaFrame, BaParams, BaPoint, BaProblem, Freedom};
use crate::config::OdometryConfig;
use crate::geometry::{Pose, Twist};
use crate::image::{Image, Pyramid};
use crate::mapping::{extract_candidates, Keyframe, KeyframeId, PointId};
use crate::residuals::{center_transport, AffineBrightness, PointParams};
use crate::synthetic::SyntheticScene;

#[derive(Clone, Debug)]
pub struct FixtureOptions {
    /// Scene frame indices used as keyframes, in temporal order.
    pub frames: Vec<usize>,
    pub points_per_frame: usize,
    /// A point is observed by up to this many following keyframes.
    pub observer_span: usize,
    pub pyramid_levels: usize,
    pub params: BaParams,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            frames: vec![0, 2, 4],
            points_per_frame: 300,
            observer_span: 4,
            pyramid_levels: 4,
            params: BaParams::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub problem: BaProblem,
    pub true_poses: Vec<Pose>,
    pub true_rho: Vec<f64>,
    /// Corruption flags of each frame's raster.
    pub corrupted: Vec<Vec<bool>>,
}

/// Keyframes at ground truth with exact point depths; rasters carry the
/// scene's depth noise and corruption. The first pose anchors the gauge.
pub fn build(scene: &SyntheticScene, opts: &FixtureOptions) -> Fixture {
    let camera = scene.camera;
    let mut frames = Vec::new();
    let mut truths: Vec<Image> = Vec::new();
    let mut corrupted = Vec::new();
    for (k, &i) in opts.frames.iter().enumerate() {
        let view = scene.render_frame(i);
        let prediction = scene.predict_depth(i, &view.inverse_depth);
        frames.push(BaFrame {
            keyframe: KeyframeId(k as u64),
            pose: scene.poses[i],
            affine: AffineBrightness::default(),
            affine_prior: AffineBrightness::default(),
            freedom: if k == 0 { Freedom::PoseFixed } else { Freedom::Free },
            pyramid: Arc::new(Pyramid::new(view.image, opts.pyramid_levels)),
            raster: Arc::new(prediction.raster),
        });
        truths.push(view.inverse_depth);
        corrupted.push(prediction.corrupted);
    }
    let cfg = OdometryConfig {
        min_points: opts.points_per_frame,
        ..Default::default()
    };
    let mut points = Vec::new();
    let mut true_rho = Vec::new();
    for (h, frame) in frames.iter().enumerate() {
        let kf = Keyframe {
            id: frame.keyframe,
            frame_index: opts.frames[h],
            pose: frame.pose,
            affine: frame.affine,
            affine_prior: frame.affine_prior,
            pyramid: frame.pyramid.clone(),
            raster: Arc::new(truths[h].clone()),
        };
        let candidates: Vec<_> = extract_candidates(&kf, &[], 0, &cfg)
            .unwrap_or_default()
            .into_iter()
            .filter(|(u, _)| !near_seam(&truths[h], u.x as usize, u.y as usize))
            .collect();
        let stride = (candidates.len() / opts.points_per_frame.max(1)).max(1);
        for (u, rho) in candidates.into_iter().step_by(stride).take(opts.points_per_frame) {
            let pp = PointParams { host_pixel: u, rho };
            let observers: Vec<usize> = (h + 1..frames.len().min(h + 1 + opts.observer_span))
                .filter(|&o| {
                    center_transport(&pp, &frame.pose, &frames[o].pose, &camera)
                        .is_ok_and(|t| camera.in_bounds(&t.pixel, 8.0))
                })
                .collect();
            if observers.is_empty() {
                continue;
            }
            points.push(BaPoint {
                id: PointId(points.len() as u64),
                host: h,
                host_pixel: u,
                rho,
                observers,
            });
            true_rho.push(rho);
        }
    }
    Fixture {
        true_poses: frames.iter().map(|f| f.pose).collect(),
        problem: BaProblem::new(camera, frames, points, opts.params.clone()),
        true_rho,
        corrupted,
    }
}

/// Whether the exact inverse depth around a pixel bends, as at the junction
/// of two surfaces, where the texture changes without any footprint filter.
fn near_seam(rho: &Image, x: usize, y: usize) -> bool {
    let (w, h) = (rho.width(), rho.height());
    if x < 2 || y < 2 || x + 2 >= w || y + 2 >= h {
        return true;
    }
    let c = rho.get(x, y) as f64;
    let second = |a: f32, b: f32| (a as f64 + b as f64 - 2.0 * c).abs();
    let dx = second(rho.get(x - 2, y), rho.get(x + 2, y));
    let dy = second(rho.get(x, y - 2), rho.get(x, y + 2));
    !(dx.max(dy) <= 1e-2 * c)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rotates every pose with free parameters by `rotation_deg` about a random
/// axis and moves its center by `translation` m in a random direction;
/// scales each ρ by `1 ± rho_fraction`.
pub fn perturb(problem: &mut BaProblem, seed: u64, rotation_deg: f64, translation: f64, rho_fraction: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for f in &mut problem.frames {
        if f.freedom != Freedom::Free {
            continue;
        }
        let w = random_unit(&mut rng) * rotation_deg.to_radians();
        let dc = random_unit(&mut rng) * translation;
        let c = f.pose.inverse().translation + dc;
        let r = Pose::exp(&Twist::new(Vector3::zeros(), w)).rotation * f.pose.rotation;
        f.pose = Pose::new(r, -(r * c));
    }
    for p in &mut problem.points {
        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        p.rho *= 1.0 + s * rho_fraction;
    }
}
