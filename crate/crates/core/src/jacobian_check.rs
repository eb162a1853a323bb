//! Randomized finite-difference verification of every analytic Jacobian.
//!
//! Configurations use smooth analytic images and rasters so that central
//! differences are meaningful everywhere (bilinear interpolants have
//! derivative jumps on cell borders).

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{se3_exp, CameraModel, Pose, Twist};
use crate::image::{Sample, Sampler};
use crate::residuals::{
    depth_host_jacobian, depth_jacobian, depth_residual_host, depth_residual_observer,
    fd_check, pattern_pixel, photo_jacobian, photo_residual, AffineBrightness, FrameView,
    PointParams, ResidualJacobians, PATTERN_LEN,
};

/// Sum of plane waves: `offset + Σ amp · sin(kx·x + ky·y + phase)`.
#[derive(Clone, Debug)]
pub struct AnalyticImage {
    pub width: usize,
    pub height: usize,
    pub offset: f64,
    pub waves: Vec<[f64; 4]>,
}

impl AnalyticImage {
    pub fn random(rng: &mut impl Rng, width: usize, height: usize, offset: f64, amp: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let k = rng.random_range(0.03..0.35);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                [
                    amp * rng.random_range(0.3..1.0),
                    k * angle.cos(),
                    k * angle.sin(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        Self {
            width,
            height,
            offset,
            waves,
        }
    }
}

impl Sampler for AnalyticImage {
    fn sample(&self, x: f64, y: f64) -> Option<Sample> {
        if !(x >= 0.0 && y >= 0.0 && x < (self.width - 1) as f64 && y < (self.height - 1) as f64) {
            return None;
        }
        let mut value = self.offset;
        let mut gradient = Vector2::zeros();
        for [amp, kx, ky, phase] in &self.waves {
            let arg = kx * x + ky * y + phase;
            value += amp * arg.sin();
            gradient += Vector2::new(*kx, *ky) * (amp * arg.cos());
        }
        Some(Sample { value, gradient })
    }

    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }
}

/// One random host/observer/point configuration.
#[derive(Clone, Debug)]
pub struct JacobianCase {
    pub camera: CameraModel,
    pub level: usize,
    pub host_pose: Pose,
    pub observer_pose: Pose,
    pub host_affine: AffineBrightness,
    pub observer_affine: AffineBrightness,
    pub point: PointParams,
    pub host_image: AnalyticImage,
    pub observer_image: AnalyticImage,
    pub observer_raster: AnalyticImage,
    pub host_raster_value: f64,
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
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

impl JacobianCase {
    /// Draws a configuration whose whole pattern projects well inside the
    /// observer image.
    pub fn random(rng: &mut impl Rng) -> Self {
        let camera = CameraModel::new(240.0, 240.0, 159.5, 119.5, 320, 240).expect("camera");
        loop {
            let level = rng.random_range(0..3usize);
            let host_pose = se3_exp(&Twist::new(
                random_unit(rng) * rng.random_range(0.0..10.0),
                random_unit(rng) * rng.random_range(0.0..3.0),
            ));
            let rho: f64 = rng.random_range(0.05..1.0);
            let relative = se3_exp(&Twist::new(
                random_unit(rng) * rng.random_range(0.01..0.3) / rho,
                random_unit(rng) * rng.random_range(0.0..0.15),
            ));
            let observer_pose = relative.compose(&host_pose);
            let host_pixel = Vector2::new(
                rng.random_range(12.0..308.0),
                rng.random_range(12.0..228.0),
            );
            let cam_l = camera.at_level(level);
            let make = |rng: &mut ChaCha8Rng, off, amp| {
                AnalyticImage::random(rng, cam_l.width, cam_l.height, off, amp)
            };
            let mut local = ChaCha8Rng::seed_from_u64(rng.random());
            let case = Self {
                camera,
                level,
                host_pose,
                observer_pose,
                host_affine: AffineBrightness::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-10.0..10.0),
                ),
                observer_affine: AffineBrightness::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-10.0..10.0),
                ),
                point: PointParams { host_pixel, rho },
                host_image: make(&mut local, 128.0, 40.0),
                observer_image: make(&mut local, 128.0, 40.0),
                observer_raster: AnalyticImage {
                    width: camera.width,
                    height: camera.height,
                    ..AnalyticImage::random(&mut local, 1, 1, rho, 0.1 * rho)
                },
                host_raster_value: rho * rng.random_range(0.9..1.1),
            };
            if case.is_well_inside() {
                return case;
            }
        }
    }

    fn is_well_inside(&self) -> bool {
        let cam_l = self.camera.at_level(self.level);
        for k in 0..PATTERN_LEN {
            let u = pattern_pixel(&self.point.host_pixel, k, self.level);
            if !cam_l.in_bounds(&u, 1.0) {
                return false;
            }
        }
        let host = self.host_view(&self.host_pose, self.host_affine);
        let obs = self.observer_view(&self.observer_pose, self.observer_affine);
        let Ok(lin) = photo_jacobian(&self.point, &host, &obs, &self.camera, self.level) else {
            return false;
        };
        let _ = lin;
        let pair = crate::residuals::PairGeometry::new(&self.host_pose, &self.observer_pose);
        for k in 0..PATTERN_LEN {
            let uh = pattern_pixel(&self.point.host_pixel, k, self.level);
            match pair.transport(&cam_l.ray(&uh), self.point.rho, &cam_l) {
                Ok(t) if cam_l.in_bounds(&t.pixel, 3.0) && t.point.z > 0.2 => {}
                _ => return false,
            }
        }
        match pair.transport(&self.camera.ray(&self.point.host_pixel), self.point.rho, &self.camera)
        {
            Ok(t) => self.camera.in_bounds(&t.pixel, 3.0),
            Err(_) => false,
        }
    }

    fn host_view(&self, pose: &Pose, affine: AffineBrightness) -> FrameView<'_, AnalyticImage> {
        FrameView {
            pose: *pose,
            affine,
            image: &self.host_image,
        }
    }

    fn observer_view(
        &self,
        pose: &Pose,
        affine: AffineBrightness,
    ) -> FrameView<'_, AnalyticImage> {
        FrameView {
            pose: *pose,
            affine,
            image: &self.observer_image,
        }
    }
}

/// Parameter layout in the local chart used by the checks:
/// `[ρ, ξ_h(6), ξ_i(6), a_h, b_h, a_i, b_i]`.
const N_PARAMS: usize = 17;

struct Perturbed {
    rho: f64,
    host_pose: Pose,
    observer_pose: Pose,
    host_affine: AffineBrightness,
    observer_affine: AffineBrightness,
}

fn perturb(case: &JacobianCase, d: &DVector<f64>) -> Perturbed {
    let twist = |o: usize| Twist::new(Vector3::new(d[o], d[o + 1], d[o + 2]), Vector3::new(d[o + 3], d[o + 4], d[o + 5]));
    Perturbed {
        rho: case.point.rho + d[0],
        host_pose: case.host_pose.compose(&se3_exp(&twist(1))),
        observer_pose: case.observer_pose.compose(&se3_exp(&twist(7))),
        host_affine: AffineBrightness::new(case.host_affine.a + d[13], case.host_affine.b + d[14]),
        observer_affine: AffineBrightness::new(
            case.observer_affine.a + d[15],
            case.observer_affine.b + d[16],
        ),
    }
}

fn jacobian_row(j: &ResidualJacobians) -> [f64; N_PARAMS] {
    let mut row = [0.0; N_PARAMS];
    row[0] = j.d_rho;
    for c in 0..6 {
        row[1 + c] = j.d_xi_host[c];
        row[7 + c] = j.d_xi_observer[c];
    }
    row[13] = j.d_affine_host[0];
    row[14] = j.d_affine_host[1];
    row[15] = j.d_affine_observer[0];
    row[16] = j.d_affine_observer[1];
    row
}

/// Worst relative error per Jacobian family.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FamilyErrors {
    pub photo_rho: f64,
    pub photo_host_pose: f64,
    pub photo_observer_pose: f64,
    pub photo_affine: f64,
    pub depth_rho: f64,
    pub depth_host_pose: f64,
    pub depth_observer_pose: f64,
    pub depth_host_form: f64,
}

impl FamilyErrors {
    pub fn worst(&self) -> f64 {
        self.entries().iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("photo d/drho", self.photo_rho),
            ("photo d/dxi_host", self.photo_host_pose),
            ("photo d/dxi_observer", self.photo_observer_pose),
            ("photo d/d(a,b)", self.photo_affine),
            ("depth d/drho", self.depth_rho),
            ("depth d/dxi_host", self.depth_host_pose),
            ("depth d/dxi_observer", self.depth_observer_pose),
            ("host depth d/drho", self.depth_host_form),
        ]
    }

    fn merge(&mut self, o: &FamilyErrors) {
        self.photo_rho = self.photo_rho.max(o.photo_rho);
        self.photo_host_pose = self.photo_host_pose.max(o.photo_host_pose);
        self.photo_observer_pose = self.photo_observer_pose.max(o.photo_observer_pose);
        self.photo_affine = self.photo_affine.max(o.photo_affine);
        self.depth_rho = self.depth_rho.max(o.depth_rho);
        self.depth_host_pose = self.depth_host_pose.max(o.depth_host_pose);
        self.depth_observer_pose = self.depth_observer_pose.max(o.depth_observer_pose);
        self.depth_host_form = self.depth_host_form.max(o.depth_host_form);
    }
}

fn sub_check<F>(f: F, analytic: &DMatrix<f64>, cols: std::ops::Range<usize>, eps: f64) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let width = cols.len();
    let start = cols.start;
    let sub = analytic.columns(start, width).into_owned();
    fd_check(
        |d: &DVector<f64>| {
            let mut full = DVector::zeros(N_PARAMS);
            full.rows_mut(start, width).copy_from(d);
            f(&full)
        },
        &sub,
        eps,
    )
}

/// Options for [`check_case`].
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Flips the sign of the analytic host-pose photometric Jacobian
    /// (mutation check for the harness itself).
    pub inject_sign_flip: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            inject_sign_flip: false,
        }
    }
}

pub fn check_case(case: &JacobianCase, opts: &CheckOptions) -> FamilyErrors {
    let eps = opts.eps;
    let host = case.host_view(&case.host_pose, case.host_affine);
    let obs = case.observer_view(&case.observer_pose, case.observer_affine);
    let lin = photo_jacobian(&case.point, &host, &obs, &case.camera, case.level)
        .expect("case validated at construction");
    let mut photo_a = DMatrix::zeros(PATTERN_LEN, N_PARAMS);
    for (k, j) in lin.jacobians.iter().enumerate() {
        let mut row = jacobian_row(j);
        if opts.inject_sign_flip {
            for v in &mut row[1..7] {
                *v = -*v;
            }
        }
        for (c, v) in row.iter().enumerate() {
            photo_a[(k, c)] = *v;
        }
    }
    let photo_fn = |d: &DVector<f64>| {
        let p = perturb(case, d);
        let point = PointParams {
            rho: p.rho,
            ..case.point
        };
        let r = photo_residual(
            &point,
            &case.host_view(&p.host_pose, p.host_affine),
            &case.observer_view(&p.observer_pose, p.observer_affine),
            &case.camera,
            case.level,
        )
        .expect("perturbation stays inside the image");
        DVector::from_row_slice(&r.residuals)
    };

    let (_, dj) = depth_jacobian(
        &case.point,
        &case.host_pose,
        &case.observer_pose,
        &case.observer_raster,
        &case.camera,
    )
    .expect("case validated at construction");
    let depth_a = DMatrix::from_row_slice(1, N_PARAMS, &jacobian_row(&dj));
    let depth_fn = |d: &DVector<f64>| {
        let p = perturb(case, d);
        let point = PointParams {
            rho: p.rho,
            ..case.point
        };
        let r = depth_residual_observer(
            &point,
            &p.host_pose,
            &p.observer_pose,
            &case.observer_raster,
            &case.camera,
        )
        .expect("perturbation stays inside the raster");
        DVector::from_element(1, r.residual)
    };

    let host_a = DMatrix::from_row_slice(1, N_PARAMS, &jacobian_row(&depth_host_jacobian()));
    let host_fn = |d: &DVector<f64>| {
        let p = perturb(case, d);
        DVector::from_element(1, depth_residual_host(case.host_raster_value, p.rho).residual)
    };

    FamilyErrors {
        photo_rho: sub_check(photo_fn, &photo_a, 0..1, eps),
        photo_host_pose: sub_check(photo_fn, &photo_a, 1..7, eps),
        photo_observer_pose: sub_check(photo_fn, &photo_a, 7..13, eps),
        photo_affine: sub_check(photo_fn, &photo_a, 13..17, eps),
        depth_rho: sub_check(depth_fn, &depth_a, 0..1, eps),
        depth_host_pose: sub_check(depth_fn, &depth_a, 1..7, eps),
        depth_observer_pose: sub_check(depth_fn, &depth_a, 7..13, eps),
        depth_host_form: sub_check(host_fn, &host_a, 0..N_PARAMS, eps),
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub trials: usize,
    pub worst: FamilyErrors,
    /// Cases where host and observer pose Jacobians are not exact negations.
    pub sign_mismatches: usize,
}

impl CheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst.worst() <= tolerance && self.sign_mismatches == 0
    }
}

/// Checks host/observer Jacobian negation bit for bit on one case.
pub fn sign_symmetric(case: &JacobianCase) -> bool {
    let host = case.host_view(&case.host_pose, case.host_affine);
    let obs = case.observer_view(&case.observer_pose, case.observer_affine);
    let lin = photo_jacobian(&case.point, &host, &obs, &case.camera, case.level)
        .expect("case validated at construction");
    let (_, dj) = depth_jacobian(
        &case.point,
        &case.host_pose,
        &case.observer_pose,
        &case.observer_raster,
        &case.camera,
    )
    .expect("case validated at construction");
    let bitwise_neg = |a: &nalgebra::RowVector6<f64>, b: &nalgebra::RowVector6<f64>| {
        a.iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == (-y).to_bits())
    };
    lin.jacobians
        .iter()
        .chain(std::iter::once(&dj))
        .all(|j| bitwise_neg(&j.d_xi_host, &j.d_xi_observer))
}

pub fn run_checks(trials: usize, seed: u64, opts: &CheckOptions) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = FamilyErrors::default();
    let mut sign_mismatches = 0;
    for _ in 0..trials {
        let case = JacobianCase::random(&mut rng);
        worst.merge(&check_case(&case, opts));
        if !sign_symmetric(&case) {
            sign_mismatches += 1;
        }
    }
    CheckReport {
        trials,
        worst,
        sign_mismatches,
    }
}
