//! Sequential odometry: tracking every frame, keyframe insertion with a
//! depth prediction, windowed bundle adjustment and map maintenance.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::ba::{BaError, BaParams, BaProblem, BaStats};
use crate::config::OdometryConfig;
use crate::geometry::{CameraModel, Pose, MIN_DEPTH};
use crate::image::{Image, Pyramid};
use crate::io::Trajectory;
use crate::mapping::{extract_candidates, is_redundant, should_create_keyframe, Map, MappingError, KeyframeId, Observation, PointStatus};
use crate::residuals::AffineBrightness;
use crate::tracking::{
    build_sparse_depth_map, track_with_recovery, ActivePoint, FrameState, TrackingError, TrackingReference,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error("no depth raster for keyframe at frame {0}")]
    MissingDepthRaster(usize),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error("bundle adjustment failed: {0}")]
    Ba(#[from] BaError),
    #[error("image is {got:?}, camera expects {expected:?}")]
    ImageSize { got: (usize, usize), expected: (usize, usize) },
}

/// A processed frame, with its pose kept relative to a keyframe so later
/// keyframe refinements carry over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub reference: KeyframeId,
    /// `T_frame_ref`.
    pub relative: Pose,
    /// Absolute affine brightness.
    pub affine: AffineBrightness,
    pub keyframe: bool,
    pub inlier_ratio: f64,
    pub mean_residual: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub index: usize,
    pub tracking_s: f64,
    pub mapping_s: f64,
    pub keyframe: bool,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutcome {
    /// World-to-camera pose at the time of processing.
    pub pose: Pose,
    pub keyframe: bool,
    pub ba: Option<BaStats>,
}

struct Reference {
    keyframe: KeyframeId,
    template: TrackingReference,
}

pub struct Odometry {
    pub config: OdometryConfig,
    pub camera: CameraModel,
    pub map: Map,
    frames: Vec<FrameRecord>,
    timings: Vec<FrameTiming>,
    reference: Option<Reference>,
    previous_coarsest: Option<f64>,
    depth_requests: usize,
    last_problem: Option<BaProblem>,
}

/// Absolute affine of a frame from its parameters relative to the reference.
fn absolute_affine(relative: &AffineBrightness, reference: &AffineBrightness) -> AffineBrightness {
    AffineBrightness {
        a: relative.a + reference.a,
        b: relative.b + reference.b * relative.a.exp(),
    }
}

fn relative_affine(absolute: &AffineBrightness, reference: &AffineBrightness) -> AffineBrightness {
    let a = absolute.a - reference.a;
    AffineBrightness {
        a,
        b: absolute.b - reference.b * a.exp(),
    }
}

impl Odometry {
    pub fn new(camera: CameraModel, config: OdometryConfig) -> Self {
        Self {
            config,
            camera,
            map: Map::new(),
            frames: Vec::new(),
            timings: Vec::new(),
            reference: None,
            previous_coarsest: None,
            depth_requests: 0,
            last_problem: None,
        }
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn timings(&self) -> &[FrameTiming] {
        &self.timings
    }

    /// How often the depth source has been queried.
    pub fn depth_requests(&self) -> usize {
        self.depth_requests
    }

    /// The most recent bundle-adjustment problem, after optimization and
    /// outlier removal.
    pub fn last_problem(&self) -> Option<&BaProblem> {
        self.last_problem.as_ref()
    }

    pub fn is_initialized(&self) -> bool {
        self.reference.is_some()
    }

    fn world_pose(&self, record: &FrameRecord) -> Pose {
        record.relative.compose(&self.map.keyframe(record.reference).pose)
    }

    /// World-to-camera poses of every processed frame under the current map.
    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|r| self.world_pose(r)).collect()
    }

    pub fn trajectory(&self) -> Trajectory {
        let mut t = Trajectory::default();
        for r in &self.frames {
            t.push(r.index, r.timestamp, self.world_pose(r).inverse())
                .expect("frames are processed in order");
        }
        t
    }

    /// World coordinates of every map point.
    pub fn point_cloud(&self) -> Vec<Vector3<f64>> {
        self.map.points.values().map(|p| self.map.world_point(p)).collect()
    }

    /// Processes the next frame. `depth` is called only when the frame
    /// becomes a keyframe.
    pub fn process_frame(
        &mut self,
        index: usize,
        timestamp: f64,
        image: Image,
        depth: impl FnOnce() -> Option<Image>,
    ) -> Result<FrameOutcome, PipelineError> {
        let expected = (self.camera.width, self.camera.height);
        if (image.width(), image.height()) != expected {
            return Err(PipelineError::ImageSize {
                got: (image.width(), image.height()),
                expected,
            });
        }
        let pyramid = Arc::new(Pyramid::new(image, self.config.pyramid_levels));
        let start = Instant::now();
        let Some(reference) = &self.reference else {
            let raster = self.request_depth(index, depth)?;
            self.bootstrap(index, timestamp, pyramid, raster)?;
            let points = self.map.points.len();
            self.timings.push(FrameTiming {
                index,
                tracking_s: 0.0,
                mapping_s: start.elapsed().as_secs_f64(),
                keyframe: true,
                points,
            });
            return Ok(FrameOutcome {
                pose: Pose::identity(),
                keyframe: true,
                ba: None,
            });
        };
        let ref_id = reference.keyframe;
        let init = self.prediction(ref_id);
        let result = track_with_recovery(&pyramid, &reference.template, init, self.previous_coarsest, &self.config)?;
        self.previous_coarsest = Some(result.coarsest_residual());
        let state = result.state;
        let tracking_s = start.elapsed().as_secs_f64();
        let ref_kf = self.map.keyframe(ref_id);
        let pose = state.pose.compose(&ref_kf.pose);
        let affine = absolute_affine(&state.affine, &ref_kf.affine);
        let mut record = FrameRecord {
            index,
            timestamp,
            reference: ref_id,
            relative: state.pose,
            affine,
            keyframe: false,
            inlier_ratio: state.inlier_ratio,
            mean_residual: state.mean_residual,
        };
        if !should_create_keyframe(&state, &self.config) {
            self.frames.push(record);
            self.timings.push(FrameTiming {
                index,
                tracking_s,
                mapping_s: 0.0,
                keyframe: false,
                points: self.map.points.len(),
            });
            return Ok(FrameOutcome {
                pose,
                keyframe: false,
                ba: None,
            });
        }
        let raster = self.request_depth(index, depth)?;
        let map_start = Instant::now();
        let (kf, stats) = self.insert_keyframe(index, pose, affine, pyramid, raster)?;
        record.reference = kf;
        record.relative = Pose::identity();
        record.affine = self.map.keyframe(kf).affine;
        record.keyframe = true;
        self.frames.push(record);
        let pose = self.map.keyframe(kf).pose;
        self.timings.push(FrameTiming {
            index,
            tracking_s,
            mapping_s: map_start.elapsed().as_secs_f64(),
            keyframe: true,
            points: self.map.points.len(),
        });
        Ok(FrameOutcome {
            pose,
            keyframe: true,
            ba: stats,
        })
    }

    fn request_depth(&mut self, index: usize, depth: impl FnOnce() -> Option<Image>) -> Result<Image, PipelineError> {
        self.depth_requests += 1;
        depth().ok_or(PipelineError::MissingDepthRaster(index))
    }

    /// Constant-velocity initialization relative to the reference keyframe,
    /// with the affine parameters of the last frame.
    fn prediction(&self, reference: KeyframeId) -> FrameState {
        let ref_kf = self.map.keyframe(reference);
        let n = self.frames.len();
        let last = &self.frames[n - 1];
        let last_pose = self.world_pose(last);
        let predicted = if n >= 2 {
            let motion = last_pose.compose(&self.world_pose(&self.frames[n - 2]).inverse());
            motion.compose(&last_pose)
        } else {
            last_pose
        };
        FrameState::new(
            predicted.compose(&ref_kf.pose.inverse()),
            relative_affine(&last.affine, &ref_kf.affine),
        )
    }

    fn bootstrap(&mut self, index: usize, timestamp: f64, pyramid: Arc<Pyramid>, raster: Image) -> Result<(), PipelineError> {
        let affine = AffineBrightness::default();
        let kf = self.map.add_keyframe(index, Pose::identity(), affine, pyramid, Arc::new(raster))?;
        self.add_points(kf, &[])?;
        self.frames.push(FrameRecord {
            index,
            timestamp,
            reference: kf,
            relative: Pose::identity(),
            affine,
            keyframe: true,
            inlier_ratio: 1.0,
            mean_residual: 0.0,
        });
        self.rebuild_reference()
    }

    /// Extracts points in `kf` away from the pixels already covered.
    fn add_points(&mut self, kf: KeyframeId, covered: &[Vector2<f64>]) -> Result<usize, PipelineError> {
        let candidates = extract_candidates(self.map.keyframe(kf), covered, covered.len(), &self.config)?;
        for (u, rho) in &candidates {
            self.map.add_point(kf, *u, *rho, &self.camera);
        }
        Ok(candidates.len())
    }

    /// Level-0 pixels of the active points that land inside `kf`, and
    /// their ids.
    fn project_active(&self, kf: KeyframeId, active: &[KeyframeId]) -> Vec<(crate::mapping::PointId, Vector2<f64>)> {
        let pose = self.map.keyframe(kf).pose;
        self.map
            .points
            .values()
            .filter(|p| p.host != kf && (active.contains(&p.host) || p.observations.iter().any(|o| active.contains(&o.keyframe))))
            .filter_map(|p| {
                let x = pose.transform(&self.map.world_point(p));
                if x.z <= MIN_DEPTH {
                    return None;
                }
                let u = self.camera.project(&x).ok()?;
                self.camera.in_bounds(&u, 2.0).then_some((p.id, u))
            })
            .collect()
    }

    fn insert_keyframe(
        &mut self,
        index: usize,
        pose: Pose,
        affine: AffineBrightness,
        pyramid: Arc<Pyramid>,
        raster: Image,
    ) -> Result<(KeyframeId, Option<BaStats>), PipelineError> {
        let old_active = self.map.active_window(&self.config);
        let kf = self.map.add_keyframe(index, pose, affine, pyramid, Arc::new(raster))?;
        let visible = self.project_active(kf, &old_active);
        for (id, _) in &visible {
            let p = self.map.points.get_mut(id).expect("projected point exists");
            if !p.observed_by(kf) {
                p.observations.push(Observation::new(kf));
            }
        }
        let covered: Vec<Vector2<f64>> = visible.iter().map(|(_, u)| *u).collect();
        self.add_points(kf, &covered)?;
        let stats = self.optimize()?;
        let active = self.map.active_window(&self.config);
        crate::mapping::cull_points(&mut self.map, &active, &self.config);
        for leaving in old_active.iter().filter(|k| !active.contains(k)) {
            if is_redundant(&self.map, *leaving, &self.config) {
                self.remove_keyframe(*leaving, kf);
            }
        }
        self.rebuild_reference()?;
        Ok((kf, stats))
    }

    /// Windowed bundle adjustment, followed by outlier-observation removal
    /// and inverse-depth information updates.
    fn optimize(&mut self) -> Result<Option<BaStats>, PipelineError> {
        let window = self.map.optimization_window(&self.config);
        if window.len() < 2 {
            return Ok(None);
        }
        let mut problem = BaProblem::from_map(&self.map, &window, &self.camera, BaParams::from(&self.config));
        if problem.points.is_empty() {
            return Ok(None);
        }
        let stats = problem.solve()?;
        problem.write_back(&mut self.map);
        for removed in problem.discard_outlier_observations() {
            if let Some(p) = self.map.points.get_mut(&removed.point) {
                p.observations.retain(|o| o.keyframe != removed.keyframe);
            }
        }
        let info = problem.idepth_information();
        for (j, bp) in problem.points.iter().enumerate() {
            let stats = problem.observation_stats(j);
            let Some(p) = self.map.points.get_mut(&bp.id) else { continue };
            p.idepth_info = Some(info[j]);
            p.status = PointStatus::Active;
            for s in stats {
                let id = problem.frames[s.observer].keyframe;
                if let Some(o) = p.observations.iter_mut().find(|o| o.keyframe == id) {
                    o.mean_residual = s.mean_residual;
                    o.outlier_fraction = s.outlier_fraction;
                }
            }
        }
        self.last_problem = Some(problem);
        Ok(Some(stats))
    }

    /// Removes a keyframe, moving frames tracked against it onto `successor`.
    fn remove_keyframe(&mut self, kf: KeyframeId, successor: KeyframeId) {
        let removed = self.map.keyframe(kf).pose;
        let target = self.map.keyframe(successor).pose;
        let rebase = removed.compose(&target.inverse());
        for r in self.frames.iter_mut().filter(|r| r.reference == kf) {
            r.relative = r.relative.compose(&rebase);
            r.reference = successor;
        }
        self.map.remove_keyframe(kf, &self.camera);
    }

    /// Sparse depth map of the active points in the newest keyframe.
    fn rebuild_reference(&mut self) -> Result<(), PipelineError> {
        let newest = self.map.newest_keyframe().expect("map has a keyframe");
        let active = self.map.active_window(&self.config);
        let points: Vec<ActivePoint> = self
            .map
            .points
            .values()
            .filter(|p| active.contains(&p.host) || p.observations.iter().any(|o| active.contains(&o.keyframe)))
            .map(|p| ActivePoint {
                host_pose: self.map.keyframe(p.host).pose,
                ray: *p.bearing.ray(),
                rho: p.rho,
                information: p.idepth_info.unwrap_or(self.config.weight_max),
            })
            .collect();
        let kf = self.map.keyframe(newest);
        let depth = build_sparse_depth_map(&kf.pose, &self.camera, &points, &self.config)?;
        self.reference = Some(Reference {
            keyframe: newest,
            template: TrackingReference::new(&kf.pyramid, &self.camera, &depth),
        });
        Ok(())
    }
}
