//! Grayscale images, bilinear sampling and image pyramids.

use std::sync::Arc;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

/// Value and spatial gradient of a field sampled at a sub-pixel location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub gradient: Vector2<f64>,
}

/// Anything that can be sampled at continuous pixel coordinates.
///
/// The gradient returned must be the exact derivative of `value` with
/// respect to `(x, y)`: the residual Jacobians are built from it.
pub trait Sampler {
    fn sample(&self, x: f64, y: f64) -> Option<Sample>;

    fn width(&self) -> usize;

    fn height(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear interpolation with the derivative of the interpolant.
    ///
    /// Returns `None` outside `[0, w-1) × [0, h-1)` or if a tap is NaN.
    #[inline]
    pub fn bilinear(&self, x: f64, y: f64) -> Option<Sample> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let (xi, yi) = (x0 as usize, y0 as usize);
        if xi + 1 >= self.width || yi + 1 >= self.height {
            return None;
        }
        let fx = x - x0;
        let fy = y - y0;
        let i = yi * self.width + xi;
        let p00 = self.data[i] as f64;
        let p10 = self.data[i + 1] as f64;
        let p01 = self.data[i + self.width] as f64;
        let p11 = self.data[i + self.width + 1] as f64;
        let top = p00 + fx * (p10 - p00);
        let bottom = p01 + fx * (p11 - p01);
        let value = top + fy * (bottom - top);
        if value.is_nan() {
            return None;
        }
        let gx = (1.0 - fy) * (p10 - p00) + fy * (p11 - p01);
        let gy = bottom - top;
        Some(Sample {
            value,
            gradient: Vector2::new(gx, gy),
        })
    }

    /// Plain bilinear value without gradient.
    #[inline]
    pub fn interpolate(&self, x: f64, y: f64) -> Option<f64> {
        self.bilinear(x, y).map(|s| s.value)
    }

    /// Half-resolution image by 2×2 box averaging (dims rounded up).
    pub fn downsample(&self) -> Image {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        Image::from_fn(w, h, |x, y| {
            let mut sum = 0.0f32;
            let mut n = 0.0f32;
            for dy in 0..2 {
                for dx in 0..2 {
                    let sx = 2 * x + dx;
                    let sy = 2 * y + dy;
                    if sx < self.width && sy < self.height {
                        sum += self.get(sx, sy);
                        n += 1.0;
                    }
                }
            }
            sum / n
        })
    }

    /// Central-difference gradients (one-sided at the border).
    pub fn central_gradients(&self) -> (Image, Image) {
        let (w, h) = (self.width, self.height);
        let gx = Image::from_fn(w, h, |x, y| {
            if w < 2 {
                return 0.0;
            }
            let l = x.saturating_sub(1);
            let r = (x + 1).min(w - 1);
            (self.get(r, y) - self.get(l, y)) / (r - l) as f32
        });
        let gy = Image::from_fn(w, h, |x, y| {
            if h < 2 {
                return 0.0;
            }
            let t = y.saturating_sub(1);
            let b = (y + 1).min(h - 1);
            (self.get(x, b) - self.get(x, t)) / (b - t) as f32
        });
        (gx, gy)
    }
}

impl Sampler for Image {
    #[inline]
    fn sample(&self, x: f64, y: f64) -> Option<Sample> {
        self.bilinear(x, y)
    }

    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }
}

impl<S: Sampler + ?Sized> Sampler for &S {
    #[inline]
    fn sample(&self, x: f64, y: f64) -> Option<Sample> {
        (**self).sample(x, y)
    }

    fn width(&self) -> usize {
        (**self).width()
    }

    fn height(&self) -> usize {
        (**self).height()
    }
}

impl<S: Sampler + ?Sized> Sampler for Arc<S> {
    #[inline]
    fn sample(&self, x: f64, y: f64) -> Option<Sample> {
        (**self).sample(x, y)
    }

    fn width(&self) -> usize {
        (**self).width()
    }

    fn height(&self) -> usize {
        (**self).height()
    }
}

/// One pyramid level: intensities plus cached central-difference gradients.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub image: Image,
    pub grad_x: Image,
    pub grad_y: Image,
}

impl PyramidLevel {
    fn new(image: Image) -> Self {
        let (grad_x, grad_y) = image.central_gradients();
        Self {
            image,
            grad_x,
            grad_y,
        }
    }

    pub fn gradient_at(&self, x: usize, y: usize) -> Vector2<f64> {
        Vector2::new(self.grad_x.get(x, y) as f64, self.grad_y.get(x, y) as f64)
    }

    pub fn gradient_magnitude(&self, x: usize, y: usize) -> f64 {
        self.gradient_at(x, y).norm()
    }
}

/// Bilinear intensity with bilinearly interpolated central-difference
/// gradients, which are smoother than the piecewise-constant derivative of
/// the bilinear patch.
impl Sampler for PyramidLevel {
    #[inline]
    fn sample(&self, x: f64, y: f64) -> Option<Sample> {
        let value = self.image.interpolate(x, y)?;
        let gx = self.grad_x.interpolate(x, y)?;
        let gy = self.grad_y.interpolate(x, y)?;
        Some(Sample {
            value,
            gradient: Vector2::new(gx, gy),
        })
    }

    fn width(&self) -> usize {
        self.image.width()
    }

    fn height(&self) -> usize {
        self.image.height()
    }
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
}

impl Pyramid {
    /// Builds `num_levels` levels, each half the resolution of the previous.
    pub fn new(image: Image, num_levels: usize) -> Self {
        assert!(num_levels >= 1);
        let mut levels = Vec::with_capacity(num_levels);
        levels.push(PyramidLevel::new(image));
        for _ in 1..num_levels {
            let next = levels.last().expect("level").image.downsample();
            levels.push(PyramidLevel::new(next));
        }
        Self { levels }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &PyramidLevel {
        &self.levels[l]
    }

    pub fn image(&self, l: usize) -> &Image {
        &self.levels[l].image
    }

    pub fn base(&self) -> &Image {
        &self.levels[0].image
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_matches_plane_exactly() {
        let img = Image::from_fn(8, 6, |x, y| 3.0 * x as f32 - 2.0 * y as f32 + 7.0);
        let s = img.bilinear(2.3, 4.75).unwrap();
        assert!((s.value - (3.0 * 2.3 - 2.0 * 4.75 + 7.0)).abs() < 1e-12);
        assert!((s.gradient - Vector2::new(3.0, -2.0)).norm() < 1e-12);
    }

    #[test]
    fn bilinear_bounds_and_nan() {
        let mut img = Image::filled(4, 4, 1.0);
        assert!(img.bilinear(-0.1, 1.0).is_none());
        assert!(img.bilinear(3.0, 1.0).is_none());
        assert!(img.bilinear(2.99, 2.99).is_some());
        img.set(1, 1, f32::NAN);
        assert!(img.bilinear(0.5, 0.5).is_none());
        assert!(img.bilinear(2.5, 2.5).is_some());
    }

    #[test]
    fn pyramid_dimensions_round_up() {
        let p = Pyramid::new(Image::filled(37, 21, 5.0), 5);
        let dims: Vec<_> = (0..5).map(|l| (p.image(l).width(), p.image(l).height())).collect();
        assert_eq!(dims, vec![(37, 21), (19, 11), (10, 6), (5, 3), (3, 2)]);
        assert!(p.image(4).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn central_gradient_of_ramp() {
        let img = Image::from_fn(5, 5, |x, _| 2.0 * x as f32);
        let (gx, gy) = img.central_gradients();
        assert_eq!(gx.get(2, 2), 2.0);
        assert_eq!(gx.get(0, 2), 2.0);
        assert_eq!(gy.get(2, 2), 0.0);
    }
}
