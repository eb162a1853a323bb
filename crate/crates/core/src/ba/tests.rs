use super::fixture::{build, perturb, FixtureOptions};
use super::*;
use crate::synthetic::{generate_scene, SceneConfig, SyntheticScene};

fn scene(frames: usize) -> SyntheticScene {
    generate_scene(
        11,
        SceneConfig {
            num_frames: frames,
            ..Default::default()
        },
    )
}

fn small(points: usize, frames: Vec<usize>) -> fixture::Fixture {
    build(
        &scene(10),
        &FixtureOptions {
            frames,
            points_per_frame: points,
            ..Default::default()
        },
    )
}

fn rotation_error_deg(a: &Pose, b: &Pose) -> f64 {
    a.compose(&b.inverse()).rotation_angle().to_degrees()
}

fn center(p: &Pose) -> Vector3<f64> {
    p.inverse().translation
}

#[test]
fn reduced_step_matches_dense_solve() {
    for (seed, aggregation) in [(1, PhotoAggregation::PerPixel), (2, PhotoAggregation::PatchSum)] {
        let mut f = small(4, vec![0, 2, 4]);
        f.problem.params.aggregation = aggregation;
        f.problem.points.truncate(5);
        assert!(f.problem.points.len() >= 4);
        perturb(&mut f.problem, seed, 0.5, 0.03, 0.03);
        for level in [0, 2] {
            for lambda in [1e-4, 1e-2, 1.0] {
                let red = f.problem.reduced_step(level, lambda).unwrap();
                let dense = f.problem.dense_step(level, lambda).unwrap();
                let scale = dense.camera.amax().max(dense.points.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                assert!(red.max_abs_difference(&dense) <= 1e-8 * scale.max(1.0), "{aggregation:?} {level} {lambda}");
            }
        }
    }
}

#[test]
fn reduced_step_matches_dense_with_fixed_frames() {
    let mut f = small(2, vec![0, 2, 4]);
    f.problem.points.truncate(5);
    f.problem.frames[0].freedom = Freedom::Fixed;
    f.problem.frames[1].freedom = Freedom::PoseFixed;
    perturb(&mut f.problem, 3, 0.5, 0.03, 0.03);
    let red = f.problem.reduced_step(1, 1e-3).unwrap();
    let dense = f.problem.dense_step(1, 1e-3).unwrap();
    assert!(red.max_abs_difference(&dense) < 1e-8);
    assert_eq!(red.camera.len(), 16);
    assert!(red.camera.rows(0, 6).iter().all(|v| *v == 0.0));
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let mut f = small(200, vec![0, 2, 4]);
    let before = f.problem.cost(0);
    let step = f.problem.reduced_step(0, 1e-4).unwrap();
    for b in 0..step.camera.len() / 8 {
        let d = step.camera.rows(8 * b, 8);
        assert!(d.rows(3, 3).amax() < 1e-4, "{d}");
        assert!(d[6].abs() < 1e-3 && d[7].abs() < 0.05, "{d}");
    }
    let stats = f.problem.solve().unwrap();
    assert!(stats.final_cost().unwrap() <= before);
    for (p, t) in f.problem.frames.iter().zip(&f.true_poses) {
        assert!((center(&p.pose) - center(t)).norm() < 3e-3);
        assert!(rotation_error_deg(&p.pose, t) < 0.01);
    }
}

#[test]
fn perturbed_problem_converges() {
    let mut f = small(300, vec![0, 2, 4, 6]);
    perturb(&mut f.problem, 7, 1.0, 0.10, 0.05);
    let stats = f.problem.solve().unwrap();
    assert!(stats.monotone());
    for (p, t) in f.problem.frames.iter().zip(&f.true_poses) {
        assert!(rotation_error_deg(&p.pose, t) < 0.05, "{}", rotation_error_deg(&p.pose, t));
        assert!((center(&p.pose) - center(t)).norm() < 5e-3, "{}", (center(&p.pose) - center(t)).norm());
    }
    let mut errs: Vec<f64> = f
        .problem
        .points
        .iter()
        .zip(&f.true_rho)
        .map(|(p, r)| (p.rho / r - 1.0).abs())
        .collect();
    errs.sort_by(f64::total_cmp);
    assert!(errs[errs.len() / 2] < 5e-3, "{}", errs[errs.len() / 2]);
}

#[test]
fn recentering_moves_newest_keyframe_to_origin() {
    let mut f = small(20, vec![0, 2]);
    let before = center(&f.problem.frames[1].pose);
    let poses: Vec<Pose> = f.problem.frames.iter().map(|b| b.pose).collect();
    let offset = f.problem.recenter();
    assert!((offset - before).norm() < 1e-12);
    assert!(center(&f.problem.frames[1].pose).norm() < 1e-12);
    assert!((center(&f.problem.frames[0].pose) - (center(&poses[0]) - before)).norm() < 1e-12);
    f.problem.uncenter(&offset);
    for (b, p) in f.problem.frames.iter().zip(&poses) {
        assert!((b.pose.translation - p.translation).norm() < 1e-12);
    }

    let mut g = small(20, vec![0, 2]);
    g.problem.frames[1].pose = Pose::from_translation(Vector3::new(-100.0, 0.0, -5.0));
    let start: Vec<Vector3<f64>> = g.problem.frames.iter().map(|b| center(&b.pose)).collect();
    let offset = g.problem.recenter();
    assert!((offset - Vector3::new(100.0, 0.0, 5.0)).norm() < 1e-12);
    for (b, c) in g.problem.frames.iter().zip(&start) {
        assert!((center(&b.pose) - (c - offset)).norm() < 1e-9);
    }
}

#[test]
fn solution_is_invariant_to_a_global_offset() {
    let mut a = small(150, vec![0, 2, 4]);
    perturb(&mut a.problem, 9, 1.0, 0.1, 0.05);
    let mut b = a.problem.clone();
    let shift = Vector3::new(1000.0, -20.0, 700.0);
    b.shift_origin(&-shift);
    a.problem.solve().unwrap();
    b.solve().unwrap();
    b.shift_origin(&shift);
    for (fa, fb) in a.problem.frames.iter().zip(&b.frames) {
        let rel_a = fa.pose.compose(&a.problem.frames[0].pose.inverse());
        let rel_b = fb.pose.compose(&b.frames[0].pose.inverse());
        assert!((rel_a.translation - rel_b.translation).norm() < 1e-6);
        assert!(rel_a.compose(&rel_b.inverse()).rotation_angle() < 1e-6);
    }
    for (pa, pb) in a.problem.points.iter().zip(&b.points) {
        assert!((pa.rho - pb.rho).abs() <= 1e-6 * pa.rho);
    }
}

#[test]
fn information_matches_dense_diagonal() {
    let mut f = small(3, vec![0, 2, 4]);
    f.problem.points.truncate(5);
    perturb(&mut f.problem, 4, 0.3, 0.02, 0.02);
    let info = f.problem.idepth_information();
    let dense = f.problem.dense_system(0);
    let nc = dense.camera_columns.len();
    for (j, i) in info.iter().enumerate() {
        let d = dense.hessian[(nc + j, nc + j)];
        assert!((i - d).abs() <= 1e-9 * d.abs().max(1.0), "{i} {d}");
    }
}

#[test]
fn information_of_flat_and_depth_only_points() {
    let mut f = small(5, vec![0, 2]);
    let flat = Arc::new(Pyramid::new(Image::filled(320, 240, 100.0), 4));
    for fr in &mut f.problem.frames {
        fr.pyramid = flat.clone();
    }
    f.problem.params.depth_weight = 0.0;
    for i in f.problem.idepth_information() {
        assert!(i.abs() < 1e-12);
    }
    f.problem.params.depth_weight = 5e3;
    for p in &mut f.problem.points {
        p.observers.clear();
    }
    for i in f.problem.idepth_information() {
        assert!(i >= 5e3 * 5e3);
    }
}

#[test]
fn truncated_depth_residuals_add_nothing() {
    let mut f = small(3, vec![0, 2]);
    f.problem.points.truncate(3);
    let base = f.problem.dense_system(0);
    let mut raster = (*f.problem.frames[0].raster).clone();
    for v in raster.data_mut() {
        *v *= 3.0;
    }
    f.problem.frames[0].raster = Arc::new(raster);
    let hosted0: Vec<usize> = (0..f.problem.points.len()).filter(|&j| f.problem.points[j].host == 0).collect();
    assert!(!hosted0.is_empty());
    let corrupted = f.problem.dense_system(0);
    assert!(
        f.problem
            .depth_residual_report()
            .iter()
            .filter(|r| r.frame == 0)
            .all(|r| r.weight == 0.0)
    );
    let nc = base.camera_columns.len();
    for &j in &hosted0 {
        let with = corrupted.hessian[(nc + j, nc + j)];
        let without = base.hessian[(nc + j, nc + j)];
        assert!(with < without);
        assert!(corrupted.gradient[nc + j].is_finite());
    }
}

#[test]
fn scale_gauge_without_depth_weight() {
    let mut f = small(100, vec![0, 2, 4]);
    f.problem.params.depth_weight = 0.0;
    let c0 = f.problem.cost(0);
    for s in [0.5, 2.0, 3.7] {
        let mut g = f.problem.clone();
        for fr in &mut g.frames {
            fr.pose.translation *= s;
        }
        for p in &mut g.points {
            p.rho /= s;
        }
        let c = g.cost(0);
        assert!((c - c0).abs() <= 1e-9 * c0.max(1e-300), "{c} {c0}");
    }
}

#[test]
fn outlier_rules() {
    let mut f = small(40, vec![0, 2]);
    assert!(f.problem.discard_outlier_observations().is_empty());
    // A brightness offset on the observer inflates every pattern residual.
    let mut g = f.problem.clone();
    g.frames[1].affine.b = -10.0;
    let removed = g.discard_outlier_observations();
    assert_eq!(removed.len(), f.problem.points.iter().filter(|p| p.observers.contains(&1)).count());
    assert!(removed.iter().all(|r| r.mean_residual > 9.0));
    assert!(g.points.iter().all(|p| p.observers.is_empty()));

    let s = f.problem.observation_stats(0);
    assert!(s[0].mean_residual < 1.0 && s[0].outlier_fraction == 0.0);
    f.problem.params.outlier_mean_residual = 1e9;
    let mut h = f.problem.clone();
    h.frames[1].affine.b = -20.0;
    assert_eq!(h.discard_outlier_observations().len(), removed.len());
}

#[test]
fn cost_profile_of_consistent_and_corrupted_points() {
    let f = small(60, vec![0, 2, 4, 6]);
    let j = (0..f.problem.points.len())
        .find(|&j| f.problem.points[j].observers.len() >= 3)
        .expect("point with three observers");
    let prof = f.problem.cost_profile(j).unwrap();
    assert_eq!(prof.len(), 200);
    assert!(prof.windows(2).all(|w| w[1].rho > w[0].rho));
    let rho = f.true_rho[j];
    assert!((prof[0].rho - 0.1 * rho).abs() < 1e-12 && (prof[199].rho - 3.0 * rho).abs() < 1e-12);
    let argmin = |key: fn(&CostSample) -> f64| {
        prof.iter().min_by(|a, b| key(a).total_cmp(&key(b))).unwrap().rho
    };
    let spacing = prof[1].rho - prof[0].rho;
    for key in [|s: &CostSample| s.photo, |s: &CostSample| s.depth, |s: &CostSample| s.total] {
        assert!((argmin(key) - rho).abs() <= spacing, "{} vs {rho}", argmin(key));
    }

    let mut g = f.problem.clone();
    let o = g.points[j].observers[0];
    let mut raster = (*g.frames[o].raster).clone();
    for v in raster.data_mut() {
        *v *= 2.0;
    }
    g.frames[o].raster = Arc::new(raster);
    let prof = g.cost_profile(j).unwrap();
    let k2t2 = 5e3f64.powi(2) * 0.01f64.powi(2);
    let plateau = prof.iter().filter(|s| s.depth >= k2t2 * 0.999 && s.depth <= k2t2 * 3.001).count();
    assert!(plateau > 0);
    let total_min = prof.iter().min_by(|a, b| a.total.total_cmp(&b.total)).unwrap();
    assert!((total_min.rho - rho).abs() <= 2.0 * spacing, "{} vs {rho}", total_min.rho);
    assert!(matches!(g.cost_profile(99_999), Err(BaError::UnknownPoint(99_999))));
}

#[test]
fn snapshot_round_trip_preserves_cost() {
    let mut f = small(30, vec![0, 2]);
    let mut raster = (*f.problem.frames[0].raster).clone();
    raster.set(3, 3, f32::NAN);
    f.problem.frames[0].raster = Arc::new(raster);
    let json = ProblemSnapshot::capture(&f.problem).to_json().unwrap();
    let back = ProblemSnapshot::from_json(&json).unwrap().restore().unwrap();
    assert_eq!(back.points, f.problem.points);
    assert!(back.frames[0].raster.get(3, 3).is_nan());
    assert_eq!(back.cost(0).to_bits(), f.problem.cost(0).to_bits());
    assert!(ProblemSnapshot::from_json("{").is_err());
}

#[test]
fn parallel_evaluation_is_bitwise_identical() {
    let mut f = small(150, vec![0, 2, 4]);
    perturb(&mut f.problem, 5, 0.5, 0.05, 0.03);
    let mut par = f.problem.clone();
    par.params.threads = 4;
    assert_eq!(f.problem.cost(1).to_bits(), par.cost(1).to_bits());
    f.problem.solve().unwrap();
    par.solve().unwrap();
    for (a, b) in f.problem.points.iter().zip(&par.points) {
        assert_eq!(a.rho.to_bits(), b.rho.to_bits());
    }
}
