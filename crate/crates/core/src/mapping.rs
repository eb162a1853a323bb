//! Map state: keyframes, inverse-depth points and their management rules.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::OdometryConfig;
use crate::geometry::{Bearing, CameraModel, Pose, MIN_DEPTH};
use crate::image::{Image, Pyramid};
use crate::residuals::AffineBrightness;
use crate::tracking::FrameState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MappingError {
    #[error("no pixel passed the gradient threshold")]
    InsufficientTexture,
    #[error("depth raster is {got:?}, expected {expected:?}")]
    RasterSize {
        got: (usize, usize),
        expected: (usize, usize),
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyframeId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PointId(pub u64);

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub frame_index: usize,
    /// World-to-camera pose.
    pub pose: Pose,
    pub affine: AffineBrightness,
    /// Center of the quadratic affine prior.
    pub affine_prior: AffineBrightness,
    pub pyramid: Arc<Pyramid>,
    /// Predicted inverse depth at full resolution, NaN where invalid.
    pub raster: Arc<Image>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointStatus {
    Candidate,
    Active,
    Culled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub keyframe: KeyframeId,
    /// Mean absolute pattern residual at the last evaluation.
    pub mean_residual: f64,
    /// Fraction of pattern pixels above the outlier intensity.
    pub outlier_fraction: f64,
}

impl Observation {
    pub fn new(keyframe: KeyframeId) -> Self {
        Self {
            keyframe,
            mean_residual: 0.0,
            outlier_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub id: PointId,
    pub host: KeyframeId,
    /// Level-0 host pixel.
    pub host_pixel: Vector2<f64>,
    pub bearing: Bearing,
    pub rho: f64,
    /// Observing keyframes other than the host.
    pub observations: Vec<Observation>,
    /// `∂²E/∂ρ²` from the last bundle adjustment; `None` before the first.
    pub idepth_info: Option<f64>,
    pub status: PointStatus,
}

impl MapPoint {
    pub fn observed_by(&self, kf: KeyframeId) -> bool {
        self.observations.iter().any(|o| o.keyframe == kf)
    }

    pub fn mean_photometric_residual(&self) -> Option<f64> {
        if self.observations.is_empty() {
            return None;
        }
        Some(self.observations.iter().map(|o| o.mean_residual).sum::<f64>() / self.observations.len() as f64)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Map {
    pub keyframes: BTreeMap<KeyframeId, Keyframe>,
    pub points: BTreeMap<PointId, MapPoint>,
    next_keyframe: u64,
    next_point: u64,
}

impl Map {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_keyframe(
        &mut self,
        frame_index: usize,
        pose: Pose,
        affine: AffineBrightness,
        pyramid: Arc<Pyramid>,
        raster: Arc<Image>,
    ) -> Result<KeyframeId, MappingError> {
        let base = pyramid.base();
        if (raster.width(), raster.height()) != (base.width(), base.height()) {
            return Err(MappingError::RasterSize {
                got: (raster.width(), raster.height()),
                expected: (base.width(), base.height()),
            });
        }
        let id = KeyframeId(self.next_keyframe);
        self.next_keyframe += 1;
        self.keyframes.insert(
            id,
            Keyframe {
                id,
                frame_index,
                pose,
                affine,
                affine_prior: affine,
                pyramid,
                raster,
            },
        );
        Ok(id)
    }

    pub fn add_point(&mut self, host: KeyframeId, pixel: Vector2<f64>, rho: f64, camera: &CameraModel) -> PointId {
        let id = PointId(self.next_point);
        self.next_point += 1;
        self.points.insert(
            id,
            MapPoint {
                id,
                host,
                host_pixel: pixel,
                bearing: Bearing::from_pixel(camera, &pixel),
                rho,
                observations: Vec::new(),
                idepth_info: None,
                status: PointStatus::Active,
            },
        );
        id
    }

    pub fn keyframe(&self, id: KeyframeId) -> &Keyframe {
        &self.keyframes[&id]
    }

    /// Keyframe ids in temporal order.
    pub fn keyframe_ids(&self) -> Vec<KeyframeId> {
        self.keyframes.keys().copied().collect()
    }

    fn suffix(&self, n: usize) -> Vec<KeyframeId> {
        let ids = self.keyframe_ids();
        ids[ids.len().saturating_sub(n)..].to_vec()
    }

    pub fn active_window(&self, cfg: &OdometryConfig) -> Vec<KeyframeId> {
        self.suffix(cfg.active_window)
    }

    pub fn optimization_window(&self, cfg: &OdometryConfig) -> Vec<KeyframeId> {
        self.suffix(cfg.optimization_window)
    }

    pub fn newest_keyframe(&self) -> Option<KeyframeId> {
        self.keyframes.keys().next_back().copied()
    }

    /// World coordinates of a point.
    pub fn world_point(&self, p: &MapPoint) -> Vector3<f64> {
        self.keyframe(p.host).pose.inverse().transform(&(p.bearing.ray() / p.rho))
    }

    /// Points hosted in or observed by `kf`.
    pub fn points_touching(&self, kf: KeyframeId) -> impl Iterator<Item = &MapPoint> {
        self.points
            .values()
            .filter(move |p| p.host == kf || p.observed_by(kf))
    }

    /// Adds an observation from `kf` to every point hosted in `window`.
    pub fn observe_points(&mut self, kf: KeyframeId, window: &[KeyframeId]) -> usize {
        let mut n = 0;
        for p in self.points.values_mut() {
            if p.host != kf && window.contains(&p.host) && !p.observed_by(kf) {
                p.observations.push(Observation::new(kf));
                n += 1;
            }
        }
        n
    }

    pub fn remove_points(&mut self, ids: &[PointId]) {
        for id in ids {
            self.points.remove(id);
        }
    }

    /// Removes a keyframe, re-anchoring or culling the points it hosts.
    ///
    /// A hosted point survives if it keeps at least two observations; it
    /// moves to its earliest remaining observer.
    pub fn remove_keyframe(&mut self, kf: KeyframeId, camera: &CameraModel) -> Vec<PointId> {
        let Some(removed) = self.keyframes.remove(&kf) else {
            return Vec::new();
        };
        let mut culled = Vec::new();
        let world_of_removed = removed.pose.inverse();
        for p in self.points.values_mut() {
            p.observations.retain(|o| o.keyframe != kf);
            if p.host != kf {
                continue;
            }
            let earliest = p.observations.iter().map(|o| o.keyframe).min();
            let new_host = match earliest {
                Some(h) if p.observations.len() >= 2 => h,
                _ => {
                    culled.push(p.id);
                    continue;
                }
            };
            let x_w = world_of_removed.transform(&(p.bearing.ray() / p.rho));
            let x = self.keyframes[&new_host].pose.transform(&x_w);
            let pixel = (x.z > MIN_DEPTH)
                .then(|| camera.project(&x).ok())
                .flatten()
                .filter(|u| camera.in_bounds(u, 2.0));
            let Some(pixel) = pixel else {
                culled.push(p.id);
                continue;
            };
            p.host = new_host;
            p.host_pixel = pixel;
            p.bearing = Bearing::from_pixel(camera, &pixel);
            p.rho = 1.0 / x.z;
            p.observations.retain(|o| o.keyframe != new_host);
        }
        self.remove_points(&culled);
        culled
    }

    /// Every point's host exists, and every observation references a
    /// keyframe of the map other than the host.
    pub fn check_integrity(&self) -> Result<(), String> {
        for p in self.points.values() {
            if !self.keyframes.contains_key(&p.host) {
                return Err(format!("point {:?} has a missing host {:?}", p.id, p.host));
            }
            if !(p.rho > 0.0) {
                return Err(format!("point {:?} has inverse depth {}", p.id, p.rho));
            }
            if p.status == PointStatus::Culled {
                return Err(format!("culled point {:?} still in the map", p.id));
            }
            for o in &p.observations {
                if o.keyframe == p.host || !self.keyframes.contains_key(&o.keyframe) {
                    return Err(format!("point {:?} has a bad observation {:?}", p.id, o.keyframe));
                }
            }
        }
        Ok(())
    }
}

/// New point pixels for a keyframe, with inverse depth from its raster.
///
/// Works over a grid of cells; within a cell a pixel qualifies when its
/// gradient magnitude exceeds `μ + f σ` of the cell's gradient magnitudes.
/// Rounds run with decreasing `f` until `existing + new ≥ min_points`.
/// Accepted and `covered` pixels mask their `mask_size` neighborhood.
pub fn extract_candidates(
    kf: &Keyframe,
    covered: &[Vector2<f64>],
    existing: usize,
    cfg: &OdometryConfig,
) -> Result<Vec<(Vector2<f64>, f64)>, MappingError> {
    if existing >= cfg.min_points {
        return Ok(Vec::new());
    }
    let level = kf.pyramid.level(0);
    let (w, h) = (level.image.width(), level.image.height());
    let border = cfg.border.max(2);
    let r = (cfg.mask_size / 2) as i64;
    let mut mask = vec![false; w * h];
    let apply_mask = |mask: &mut Vec<bool>, x: i64, y: i64| {
        for yy in (y - r).max(0)..=(y + r).min(h as i64 - 1) {
            for xx in (x - r).max(0)..=(x + r).min(w as i64 - 1) {
                mask[yy as usize * w + xx as usize] = true;
            }
        }
    };
    for u in covered {
        apply_mask(&mut mask, u.x.round() as i64, u.y.round() as i64);
    }
    let grad: Vec<f64> = (0..w * h).map(|i| level.gradient_magnitude(i % w, i / w)).collect();

    struct Cell {
        threshold_base: (f64, f64),
        pixels: Vec<usize>,
    }
    let mut cells = Vec::with_capacity(cfg.grid_rows * cfg.grid_cols);
    for row in 0..cfg.grid_rows {
        for col in 0..cfg.grid_cols {
            let (y0, y1) = (row * h / cfg.grid_rows, (row + 1) * h / cfg.grid_rows);
            let (x0, x1) = (col * w / cfg.grid_cols, (col + 1) * w / cfg.grid_cols);
            let mut pixels: Vec<usize> = (y0.max(border)..y1.min(h.saturating_sub(border)))
                .flat_map(|y| (x0.max(border)..x1.min(w.saturating_sub(border))).map(move |x| y * w + x))
                .collect();
            if pixels.is_empty() {
                continue;
            }
            let n = pixels.len() as f64;
            let mean = pixels.iter().map(|&i| grad[i]).sum::<f64>() / n;
            let var = pixels.iter().map(|&i| (grad[i] - mean).powi(2)).sum::<f64>() / n;
            pixels.sort_by(|&a, &b| grad[b].total_cmp(&grad[a]).then(a.cmp(&b)));
            cells.push(Cell {
                threshold_base: (mean, var.sqrt()),
                pixels,
            });
        }
    }

    let mut out = Vec::new();
    let mut textured = false;
    for &f in &cfg.f_schedule.0 {
        for cell in &cells {
            let (mean, sigma) = cell.threshold_base;
            let threshold = mean + f * sigma;
            for &i in &cell.pixels {
                if grad[i] <= threshold {
                    break;
                }
                textured = true;
                if mask[i] {
                    continue;
                }
                let (x, y) = (i % w, i / w);
                let rho = kf.raster.get(x, y);
                if !(rho.is_finite() && rho > 0.0) {
                    continue;
                }
                apply_mask(&mut mask, x as i64, y as i64);
                out.push((Vector2::new(x as f64, y as f64), rho as f64));
            }
        }
        if existing + out.len() >= cfg.min_points {
            break;
        }
    }
    if !textured {
        return Err(MappingError::InsufficientTexture);
    }
    Ok(out)
}

/// Removes points by the three culling rules and returns their ids.
///
/// A point is culled when its host has left the active window and it has
/// fewer than `cull_min_observations` observations, when its mean
/// photometric residual exceeds `cull_mean_residual`, or when its
/// inverse-depth information is below `cull_information_threshold`.
pub fn cull_points(map: &mut Map, active_window: &[KeyframeId], cfg: &OdometryConfig) -> Vec<PointId> {
    let culled: Vec<PointId> = map
        .points
        .values()
        .filter(|p| {
            let outside = !active_window.contains(&p.host);
            (outside && p.observations.len() < cfg.cull_min_observations)
                || p.mean_photometric_residual().is_some_and(|m| m > cfg.cull_mean_residual)
                || p.idepth_info.is_some_and(|i| i < cfg.cull_information_threshold)
        })
        .map(|p| p.id)
        .collect();
    map.remove_points(&culled);
    culled
}

pub fn should_create_keyframe(state: &FrameState, cfg: &OdometryConfig) -> bool {
    state.inlier_ratio < cfg.keyframe_inlier_threshold
}

/// Whether more than `redundancy_ratio` of the points hosted or observed
/// by `kf` have at least `redundancy_min_observations` observations.
pub fn is_redundant(map: &Map, kf: KeyframeId, cfg: &OdometryConfig) -> bool {
    let (mut total, mut rich) = (0usize, 0usize);
    for p in map.points_touching(kf) {
        total += 1;
        if p.observations.len() >= cfg.redundancy_min_observations {
            rich += 1;
        }
    }
    total > 0 && rich as f64 > cfg.redundancy_ratio * total as f64
}

/// Removes the redundant keyframes among `candidates`.
pub fn cull_redundant_keyframes(
    map: &mut Map,
    candidates: &[KeyframeId],
    camera: &CameraModel,
    cfg: &OdometryConfig,
) -> Vec<KeyframeId> {
    let mut removed = Vec::new();
    for &kf in candidates {
        if map.keyframes.contains_key(&kf) && is_redundant(map, kf, cfg) {
            map.remove_keyframe(kf, camera);
            removed.push(kf);
        }
    }
    removed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_scene, SceneConfig};

    fn camera() -> CameraModel {
        CameraModel::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap()
    }

    fn add_kf(map: &mut Map, image: Image, rho: f32) -> KeyframeId {
        let (w, h) = (image.width(), image.height());
        map.add_keyframe(
            0,
            Pose::identity(),
            AffineBrightness::default(),
            Arc::new(Pyramid::new(image, 3)),
            Arc::new(Image::filled(w, h, rho)),
        )
        .unwrap()
    }

    fn point_with(map: &mut Map, host: KeyframeId, observers: &[KeyframeId]) -> PointId {
        let id = map.add_point(host, Vector2::new(30.0, 20.0), 0.5, &camera());
        let p = map.points.get_mut(&id).unwrap();
        p.observations = observers.iter().map(|&k| Observation::new(k)).collect();
        id
    }

    #[test]
    fn constant_image_has_no_candidates() {
        let mut map = Map::new();
        let kf = add_kf(&mut map, Image::filled(64, 48, 90.0), 0.5);
        let cfg = OdometryConfig::default();
        assert_eq!(
            extract_candidates(map.keyframe(kf), &[], 0, &cfg),
            Err(MappingError::InsufficientTexture)
        );
    }

    #[test]
    fn step_edge_candidates_follow_the_edge() {
        let mut map = Map::new();
        let img = Image::from_fn(256, 192, |x, _| if x < 100 { 50.0 } else { 150.0 });
        let kf = add_kf(&mut map, img, 0.25);
        let cfg = OdometryConfig::default();
        let c = extract_candidates(map.keyframe(kf), &[], 0, &cfg).unwrap();
        assert!(!c.is_empty());
        for (u, rho) in &c {
            assert!(u.x == 99.0 || u.x == 100.0, "{u:?}");
            assert_eq!(*rho, 0.25);
        }
        for (i, (a, _)) in c.iter().enumerate() {
            for (b, _) in &c[i + 1..] {
                assert!((a - b).abs().max() >= 3.0);
            }
        }
    }

    #[test]
    fn checkerboard_reaches_the_point_target() {
        let mut map = Map::new();
        let img = Image::from_fn(320, 240, |x, y| if (x / 8 + y / 8) % 2 == 0 { 40.0 } else { 200.0 });
        let kf = add_kf(&mut map, img, 0.2);
        let cfg = OdometryConfig::default();
        let a = extract_candidates(map.keyframe(kf), &[], 0, &cfg).unwrap();
        let b = extract_candidates(map.keyframe(kf), &[], 0, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.len() >= 2000, "{}", a.len());
        let fewer = extract_candidates(map.keyframe(kf), &[], 1990, &cfg).unwrap();
        assert!(fewer.len() < a.len());
    }

    #[test]
    fn covered_pixels_are_masked_and_depth_comes_from_the_raster() {
        let scene = generate_scene(5, SceneConfig { num_frames: 1, ..Default::default() });
        let view = scene.render_view(&scene.poses[0]);
        let mut map = Map::new();
        let kf = map
            .add_keyframe(
                0,
                scene.poses[0],
                AffineBrightness::default(),
                Arc::new(Pyramid::new(view.image.clone(), 5)),
                Arc::new(view.inverse_depth.clone()),
            )
            .unwrap();
        let cfg = OdometryConfig::default();
        let a = extract_candidates(map.keyframe(kf), &[], 0, &cfg).unwrap();
        assert!(a.len() > 1000, "{}", a.len());
        for (u, rho) in &a {
            assert_eq!(*rho, view.inverse_depth.get(u.x as usize, u.y as usize) as f64);
        }
        let covered: Vec<_> = a.iter().map(|c| c.0).collect();
        let again = extract_candidates(map.keyframe(kf), &covered[..covered.len() / 2], 0, &cfg).unwrap();
        assert!(!again.is_empty());
        for (u, _) in &again {
            assert!(covered[..covered.len() / 2].iter().all(|c| (c - u).abs().max() > 2.0));
        }
    }

    #[test]
    fn keyframe_decision_threshold() {
        let cfg = OdometryConfig::default();
        let mut s = FrameState::new(Pose::identity(), AffineBrightness::default());
        for (ratio, expect) in [(0.65, true), (1.0, false), (0.70, false)] {
            s.inlier_ratio = ratio;
            assert_eq!(should_create_keyframe(&s, &cfg), expect, "{ratio}");
        }
    }

    #[test]
    fn point_culling_rules() {
        let cfg = OdometryConfig::default();
        let mut map = Map::new();
        let kfs: Vec<_> = (0..7).map(|_| add_kf(&mut map, Image::filled(64, 48, 1.0), 0.5)).collect();
        let active = map.active_window(&cfg);
        assert_eq!(active, kfs[2..].to_vec());
        let lonely = point_with(&mut map, kfs[0], &[kfs[1]]);
        let kept_outside = point_with(&mut map, kfs[0], &[kfs[1], kfs[2]]);
        let lonely_inside = point_with(&mut map, kfs[3], &[kfs[4]]);
        let noisy = point_with(&mut map, kfs[3], &[kfs[4], kfs[5]]);
        for o in &mut map.points.get_mut(&noisy).unwrap().observations {
            o.mean_residual = 9.5;
        }
        let weak = point_with(&mut map, kfs[4], &[kfs[5]]);
        map.points.get_mut(&weak).unwrap().idepth_info = Some(1e-3);
        let strong = point_with(&mut map, kfs[4], &[kfs[5]]);
        map.points.get_mut(&strong).unwrap().idepth_info = Some(1e3);
        let mut culled = cull_points(&mut map, &active, &cfg);
        culled.sort();
        assert_eq!(culled, vec![lonely, noisy, weak]);
        for id in [kept_outside, lonely_inside, strong] {
            assert!(map.points.contains_key(&id));
        }
        map.check_integrity().unwrap();
    }

    fn redundancy_fixture(rich: usize) -> (Map, Vec<KeyframeId>) {
        let mut map = Map::new();
        let kfs: Vec<_> = (0..5).map(|_| add_kf(&mut map, Image::filled(64, 48, 1.0), 0.5)).collect();
        for i in 0..10 {
            let obs: &[KeyframeId] = if i < rich { &kfs[1..4] } else { &kfs[1..3] };
            point_with(&mut map, kfs[0], obs);
        }
        (map, kfs)
    }

    #[test]
    fn redundancy_is_strict() {
        let cfg = OdometryConfig::default();
        let (map, kfs) = redundancy_fixture(9);
        assert!(is_redundant(&map, kfs[0], &cfg));
        let (map, kfs) = redundancy_fixture(8);
        assert!(!is_redundant(&map, kfs[0], &cfg));
    }

    #[test]
    fn removing_a_redundant_keyframe_reanchors_points() {
        let cfg = OdometryConfig::default();
        let (mut map, kfs) = redundancy_fixture(9);
        map.keyframes.get_mut(&kfs[1]).unwrap().pose = Pose::from_translation(Vector3::new(0.1, 0.0, -0.2));
        let before: Vec<Vector3<f64>> = map.points.values().map(|p| map.world_point(p)).collect();
        let removed = cull_redundant_keyframes(&mut map, &[kfs[0]], &camera(), &cfg);
        assert_eq!(removed, vec![kfs[0]]);
        assert!(!map.keyframes.contains_key(&kfs[0]));
        assert_eq!(map.points.len(), 10);
        for (p, w) in map.points.values().zip(&before) {
            assert_eq!(p.host, kfs[1]);
            assert!(!p.observed_by(kfs[1]));
            assert!((map.world_point(p) - w).norm() < 1e-9);
        }
        map.check_integrity().unwrap();
    }

    #[test]
    fn single_remaining_observation_is_culled_on_removal() {
        let mut map = Map::new();
        let kfs: Vec<_> = (0..2).map(|_| add_kf(&mut map, Image::filled(64, 48, 1.0), 0.5)).collect();
        let p = point_with(&mut map, kfs[0], &[kfs[1]]);
        assert_eq!(map.remove_keyframe(kfs[0], &camera()), vec![p]);
        assert!(map.points.is_empty());
    }

    #[test]
    fn windows_are_suffixes() {
        let cfg = OdometryConfig::default();
        let mut map = Map::new();
        let kfs: Vec<_> = (0..3).map(|_| add_kf(&mut map, Image::filled(8, 8, 1.0), 0.5)).collect();
        assert_eq!(map.active_window(&cfg), kfs);
        assert_eq!(map.optimization_window(&cfg), kfs);
        let more: Vec<_> = (0..7).map(|_| add_kf(&mut map, Image::filled(8, 8, 1.0), 0.5)).collect();
        let all: Vec<_> = kfs.iter().chain(&more).copied().collect();
        assert_eq!(map.active_window(&cfg), all[5..].to_vec());
        assert_eq!(map.optimization_window(&cfg), all[3..].to_vec());
        map.remove_keyframe(all[6], &camera());
        let left = map.optimization_window(&cfg);
        assert_eq!(left.len(), 7);
        assert!(!left.contains(&all[6]) && left.contains(&all[2]));
    }
}
