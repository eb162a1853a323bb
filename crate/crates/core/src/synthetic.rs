//! Procedural test scene: a textured floor inside a textured cylindrical wall.
//!
//! Textures are sums of plane waves in surface coordinates. Every wave is
//! attenuated by a Gaussian pixel footprint computed from the local
//! surface-to-pixel Jacobian, so renders are free of aliasing and two views
//! of the same surface point agree up to bilinear interpolation error.

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{CameraModel, Pose};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wave {
    pub amplitude: f64,
    /// Spatial angular frequency, rad/m.
    pub k: Vector2<f64>,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceTexture {
    pub mean: f64,
    pub waves: Vec<Wave>,
}

impl SurfaceTexture {
    /// Random texture whose amplitudes sum to `total_amplitude`.
    pub fn random(
        rng: &mut impl Rng,
        mean: f64,
        total_amplitude: f64,
        wavelengths: (f64, f64),
        count: usize,
    ) -> Self {
        let raw: Vec<f64> = (0..count).map(|_| rng.random_range(0.5..1.0)).collect();
        let norm: f64 = raw.iter().sum();
        let waves = raw
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let lambda = (rng.random_range(wavelengths.0.ln()..wavelengths.1.ln())).exp();
                // Stratified directions avoid a dominant texture orientation.
                let dir = std::f64::consts::PI * (i as f64 + rng.random_range(0.0..1.0)) / count as f64;
                let k = std::f64::consts::TAU / lambda;
                Wave {
                    amplitude: total_amplitude * w / norm,
                    k: Vector2::new(k * dir.cos(), k * dir.sin()),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        Self { mean, waves }
    }

    /// Texture value at surface point `p` seen through a pixel footprint.
    ///
    /// `jac` maps pixel offsets to surface offsets; `sigma` is the footprint
    /// standard deviation in pixels.
    pub fn eval(&self, p: &Vector2<f64>, jac: &Matrix2<f64>, sigma: f64) -> f64 {
        let mut v = self.mean;
        for w in &self.waves {
            let omega = jac.transpose() * w.k;
            let att = (-0.5 * sigma * sigma * omega.norm_squared()).exp();
            v += att * w.amplitude * (w.k.dot(p) + w.phase).sin();
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryShape {
    Straight,
    /// Constant yaw rate along the whole sequence.
    Arc,
    /// Straight first half, then constant yaw rate.
    Turn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Floor plane `y = floor_height` (camera y axis points down).
    pub floor_height: f64,
    pub wall_radius: f64,
    pub num_frames: usize,
    /// Distance travelled per frame, m.
    pub step: f64,
    pub yaw_rate_deg: f64,
    pub shape: TrajectoryShape,
    /// Start position; the camera initially looks along +z.
    pub start: Vector3<f64>,
    pub floor_wavelengths: (f64, f64),
    pub wall_wavelengths: (f64, f64),
    pub waves_per_surface: usize,
    pub texture_amplitude: f64,
    pub footprint_sigma: f64,
    pub intensity_noise: f64,
    /// σ of the multiplicative noise on predicted inverse depth.
    pub depth_noise: f64,
    pub outlier_fraction: f64,
    /// Factor applied to corrupted inverse-depth entries.
    pub outlier_magnitude: f64,
    /// Side of square corrupted blocks; 0 corrupts scattered pixels.
    pub outlier_block: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            focal: 250.0,
            floor_height: 1.6,
            wall_radius: 20.0,
            num_frames: 50,
            step: 0.25,
            yaw_rate_deg: 0.6,
            shape: TrajectoryShape::Arc,
            start: Vector3::new(0.0, 0.0, -5.0),
            floor_wavelengths: (0.3, 2.5),
            wall_wavelengths: (0.8, 5.0),
            waves_per_surface: 12,
            texture_amplitude: 110.0,
            footprint_sigma: 0.7,
            intensity_noise: 0.0,
            depth_noise: 0.0,
            outlier_fraction: 0.0,
            outlier_magnitude: 2.0,
            outlier_block: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub seed: u64,
    pub camera: CameraModel,
    /// World-to-camera pose of every frame.
    pub poses: Vec<Pose>,
    pub floor: SurfaceTexture,
    pub wall: SurfaceTexture,
}

#[derive(Clone, Debug)]
pub struct RenderedView {
    pub image: Image,
    /// Exact inverse z-depth per pixel, m⁻¹.
    pub inverse_depth: Image,
}

#[derive(Clone, Debug)]
pub struct DepthPrediction {
    pub raster: Image,
    /// Row-major flags of entries hit by outlier corruption.
    pub corrupted: Vec<bool>,
}

#[derive(Clone, Copy)]
enum Surface {
    Floor,
    Wall,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_scene(seed: u64, config: SceneConfig) -> SyntheticScene {
    let camera = CameraModel::new(
        config.focal,
        config.focal,
        (config.width as f64 - 1.0) / 2.0,
        (config.height as f64 - 1.0) / 2.0,
        config.width,
        config.height,
    )
    .expect("valid synthetic camera");
    let mut rng = stream_rng(seed, 0);
    let floor = SurfaceTexture::random(
        &mut rng,
        128.0,
        config.texture_amplitude,
        config.floor_wavelengths,
        config.waves_per_surface,
    );
    let wall = SurfaceTexture::random(
        &mut rng,
        128.0,
        config.texture_amplitude,
        config.wall_wavelengths,
        config.waves_per_surface,
    );
    let poses = trajectory(&config);
    SyntheticScene {
        config,
        seed,
        camera,
        poses,
        floor,
        wall,
    }
}

fn camera_to_world(yaw: f64, position: Vector3<f64>) -> Pose {
    Pose::new(
        *nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).matrix(),
        position,
    )
}

fn trajectory(cfg: &SceneConfig) -> Vec<Pose> {
    let rate = cfg.yaw_rate_deg.to_radians();
    let mut yaw = 0.0f64;
    let mut pos = cfg.start;
    let mut out = Vec::with_capacity(cfg.num_frames);
    for i in 0..cfg.num_frames {
        out.push(camera_to_world(yaw, pos).inverse());
        let turning = match cfg.shape {
            TrajectoryShape::Straight => false,
            TrajectoryShape::Arc => true,
            TrajectoryShape::Turn => i >= cfg.num_frames / 2,
        };
        let dyaw = if turning { rate } else { 0.0 };
        let mid = yaw + 0.5 * dyaw;
        pos += Vector3::new(mid.sin(), 0.0, mid.cos()) * cfg.step;
        yaw += dyaw;
    }
    out
}

impl SyntheticScene {
    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }

    /// Summed distance between consecutive camera centers.
    pub fn trajectory_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].inverse().translation - w[0].inverse().translation).norm())
            .sum()
    }

    fn hit(&self, surface: Surface, c: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match surface {
            Surface::Floor => {
                if d.y <= 1e-12 {
                    return None;
                }
                let s = (self.config.floor_height - c.y) / d.y;
                (s > 0.0).then_some(s)
            }
            Surface::Wall => {
                let a = d.x * d.x + d.z * d.z;
                if a <= 1e-15 {
                    return None;
                }
                let b = 2.0 * (c.x * d.x + c.z * d.z);
                let cc = c.x * c.x + c.z * c.z - self.config.wall_radius.powi(2);
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let s = (-b + disc.sqrt()) / (2.0 * a);
                (s > 0.0).then_some(s)
            }
        }
    }

    fn surface_coords(&self, surface: Surface, x: &Vector3<f64>) -> Vector2<f64> {
        match surface {
            Surface::Floor => Vector2::new(x.x, x.z),
            Surface::Wall => Vector2::new(self.config.wall_radius * x.x.atan2(x.z), x.y),
        }
    }

    fn texture(&self, surface: Surface) -> &SurfaceTexture {
        match surface {
            Surface::Floor => &self.floor,
            Surface::Wall => &self.wall,
        }
    }

    /// Noise-free intensity image and exact inverse depth at `pose`.
    pub fn render_view(&self, pose: &Pose) -> RenderedView {
        let (w, h) = (self.camera.width, self.camera.height);
        let cam_to_world = pose.inverse();
        let c = cam_to_world.translation;
        let rot = cam_to_world.rotation;
        let mut image = Image::filled(w, h, 0.0);
        let mut idepth = Image::filled(w, h, f32::NAN);
        for y in 0..h {
            for x in 0..w {
                let u = Vector2::new(x as f64, y as f64);
                let d = rot * self.camera.ray(&u);
                let floor = self.hit(Surface::Floor, &c, &d);
                let wall = self.hit(Surface::Wall, &c, &d);
                let (surface, s) = match (floor, wall) {
                    (Some(f), Some(wl)) if f <= wl => (Surface::Floor, f),
                    (_, Some(wl)) => (Surface::Wall, wl),
                    (Some(f), None) => (Surface::Floor, f),
                    (None, None) => continue,
                };
                let p = self.surface_coords(surface, &(c + d * s));
                let mut jac = Matrix2::zeros();
                for (col, du) in [(0, Vector2::new(1.0, 0.0)), (1, Vector2::new(0.0, 1.0))] {
                    let dn = rot * self.camera.ray(&(u + du));
                    if let Some(sn) = self.hit(surface, &c, &dn) {
                        let mut diff = self.surface_coords(surface, &(c + dn * sn)) - p;
                        if let Surface::Wall = surface {
                            let period = std::f64::consts::TAU * self.config.wall_radius;
                            diff.x -= period * (diff.x / period).round();
                        }
                        jac.set_column(col, &diff);
                    }
                }
                let v = self.texture(surface).eval(&p, &jac, self.config.footprint_sigma);
                image.set(x, y, v.clamp(0.0, 255.0) as f32);
                idepth.set(x, y, (1.0 / s) as f32);
            }
        }
        RenderedView {
            image,
            inverse_depth: idepth,
        }
    }

    /// Render of frame `index` with the configured intensity noise.
    pub fn render_frame(&self, index: usize) -> RenderedView {
        let mut view = self.render_view(&self.poses[index]);
        if self.config.intensity_noise > 0.0 {
            let mut rng = stream_rng(self.seed, 1_000 + index as u64);
            let normal = Normal::new(0.0, self.config.intensity_noise).expect("finite sigma");
            for v in view.image.data_mut() {
                *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 255.0) as f32;
            }
        }
        view
    }

    /// Predicted inverse depth for frame `index`: the exact raster with the
    /// configured multiplicative noise and outlier corruption.
    pub fn predict_depth(&self, index: usize, truth: &Image) -> DepthPrediction {
        let mut rng = stream_rng(self.seed, 1_000_000 + index as u64);
        let mut raster = truth.clone();
        if self.config.depth_noise > 0.0 {
            let normal = Normal::new(0.0, self.config.depth_noise).expect("finite sigma");
            for v in raster.data_mut() {
                let n = normal.sample(&mut rng);
                if v.is_finite() {
                    *v = (*v as f64 * (1.0 + n).max(0.05)) as f32;
                }
            }
        }
        let corrupted = corrupt_raster(
            &mut raster,
            self.config.outlier_fraction,
            self.config.outlier_magnitude,
            self.config.outlier_block,
            &mut rng,
        );
        DepthPrediction { raster, corrupted }
    }
}

/// Multiplies exactly `⌊fraction · N⌋` entries by `magnitude`.
///
/// With `block > 0` whole square blocks are corrupted, visited in random
/// order; the last block is filled only partially.
pub fn corrupt_raster(
    raster: &mut Image,
    fraction: f64,
    magnitude: f64,
    block: usize,
    rng: &mut impl Rng,
) -> Vec<bool> {
    let (w, h) = (raster.width(), raster.height());
    let n = w * h;
    let target = (fraction * n as f64).floor() as usize;
    let mut flags = vec![false; n];
    if target == 0 {
        return flags;
    }
    let order: Vec<usize> = if block == 0 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx
    } else {
        let (bw, bh) = (w.div_ceil(block), h.div_ceil(block));
        let mut blocks: Vec<usize> = (0..bw * bh).collect();
        blocks.shuffle(rng);
        blocks
            .into_iter()
            .flat_map(|b| {
                let (bx, by) = ((b % bw) * block, (b / bw) * block);
                (by..(by + block).min(h))
                    .flat_map(move |y| (bx..(bx + block).min(w)).map(move |x| y * w + x))
            })
            .collect()
    };
    for &i in order.iter().take(target) {
        flags[i] = true;
        let v = &mut raster.data_mut()[i];
        *v = (*v as f64 * magnitude) as f32;
    }
    flags
}
