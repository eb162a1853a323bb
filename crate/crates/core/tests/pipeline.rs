use std::cell::Cell;

use depthvo::config::OdometryConfig;
use depthvo::eval::{ate, Alignment};
use depthvo::geometry::Pose;
use depthvo::pipeline::{Odometry, PipelineError};
use depthvo::synthetic::{generate_scene, SceneConfig, SyntheticScene};

fn scene(frames: usize, config: SceneConfig) -> SyntheticScene {
    generate_scene(
        5,
        SceneConfig {
            num_frames: frames,
            depth_noise: 0.01,
            ..config
        },
    )
}

fn feed(odo: &mut Odometry, s: &SyntheticScene, frames: std::ops::Range<usize>, requests: &Cell<usize>) {
    for i in frames {
        let view = s.render_frame(i);
        let truth = view.inverse_depth;
        odo.process_frame(i, i as f64 * 0.1, view.image, || {
            requests.set(requests.get() + 1);
            Some(s.predict_depth(i, &truth).raster)
        })
        .unwrap();
    }
}

#[test]
fn first_frame_bootstraps_the_map() {
    let s = scene(
        1,
        SceneConfig {
            width: 640,
            height: 480,
            focal: 500.0,
            ..Default::default()
        },
    );
    let mut odo = Odometry::new(s.camera, OdometryConfig::default());
    let calls = Cell::new(0);
    feed(&mut odo, &s, 0..1, &calls);
    assert!(odo.is_initialized());
    assert_eq!(odo.poses(), vec![Pose::identity()]);
    assert!(odo.map.points.len() >= 2000, "{}", odo.map.points.len());
    assert_eq!(calls.get(), 1);
    assert!(odo.map.check_integrity().is_ok());
}

#[test]
fn missing_raster_at_a_keyframe_is_an_error() {
    let s = scene(1, SceneConfig::default());
    let mut odo = Odometry::new(s.camera, OdometryConfig::default());
    let err = odo
        .process_frame(0, 0.0, s.render_frame(0).image, || None)
        .unwrap_err();
    assert_eq!(err, PipelineError::MissingDepthRaster(0));
    assert!(!odo.is_initialized());
}

#[test]
fn static_camera_creates_no_further_keyframes() {
    let s = scene(1, SceneConfig::default());
    let mut odo = Odometry::new(s.camera, OdometryConfig::default());
    let image = s.render_frame(0);
    let raster = s.predict_depth(0, &image.inverse_depth).raster;
    odo.process_frame(0, 0.0, image.image.clone(), || Some(raster)).unwrap();
    for i in 1..6 {
        let out = odo
            .process_frame(i, i as f64, image.image.clone(), || panic!("raster requested"))
            .unwrap();
        assert!(!out.keyframe);
        assert_eq!(odo.frames()[i].inlier_ratio, 1.0);
        assert!(out.pose.translation.norm() < 1e-6);
    }
    assert_eq!(odo.map.keyframes.len(), 1);
    assert_eq!(odo.depth_requests(), 1);
}

#[test]
fn rasters_are_requested_only_for_keyframes() {
    let s = scene(16, SceneConfig::default());
    let mut odo = Odometry::new(s.camera, OdometryConfig::default());
    let calls = Cell::new(0);
    feed(&mut odo, &s, 0..16, &calls);
    let keyframes = odo.frames().iter().filter(|f| f.keyframe).count();
    assert!((2..16).contains(&keyframes));
    assert_eq!(calls.get(), keyframes);
    assert_eq!(odo.depth_requests(), keyframes);
    assert!(odo.last_problem().is_some());
    assert!(odo.map.check_integrity().is_ok());
    let est: Vec<_> = odo.poses().iter().map(|p| p.inverse().translation).collect();
    let gt: Vec<_> = s.poses[..16].iter().map(|p| p.inverse().translation).collect();
    let r = ate(&est, &gt, Alignment::Se3).unwrap();
    assert!(r.rmse < 0.02, "{}", r.rmse);
}

#[test]
fn reruns_are_bitwise_identical() {
    let s = scene(10, SceneConfig::default());
    let run = || {
        let mut odo = Odometry::new(s.camera, OdometryConfig::default());
        feed(&mut odo, &s, 0..10, &Cell::new(0));
        (odo.poses(), odo.point_cloud())
    };
    assert_eq!(run(), run());
}

#[test]
fn slow_motion_keeps_keyframe_count_bounded() {
    let s = scene(
        30,
        SceneConfig {
            step: 0.05,
            yaw_rate_deg: 0.2,
            ..Default::default()
        },
    );
    let mut odo = Odometry::new(s.camera, OdometryConfig::default());
    feed(&mut odo, &s, 0..30, &Cell::new(0));
    assert!(odo.map.keyframes.len() <= 10, "{}", odo.map.keyframes.len());
    assert_eq!(odo.trajectory().len(), 30);
}

#[test]
fn wrong_image_size_is_rejected() {
    let s = scene(1, SceneConfig::default());
    let mut odo = Odometry::new(s.camera, OdometryConfig::default());
    let image = depthvo::image::Image::filled(10, 10, 0.0);
    assert!(matches!(
        odo.process_frame(0, 0.0, image, || None),
        Err(PipelineError::ImageSize { .. })
    ));
}
