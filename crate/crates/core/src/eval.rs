//! Absolute trajectory error after closed-form alignment.

use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("trajectory lengths differ: {est} estimated vs {gt} ground truth")]
    LengthMismatch { est: usize, gt: usize },
    #[error("need at least one pose")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    /// Rotation and translation.
    Se3,
    /// Rotation, translation and scale.
    Sim3,
}

impl FromStr for Alignment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "se3" => Ok(Self::Se3),
            "sim3" => Ok(Self::Sim3),
            _ => Err(format!("unknown alignment `{s}`")),
        }
    }
}

/// `gt ≈ scale · rotation · est + translation`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub median: f64,
    pub max: f64,
    /// Translational error of every frame after alignment.
    pub errors: Vec<f64>,
    pub alignment: Similarity,
}

/// Least-squares similarity mapping `src` onto `dst` (Umeyama).
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Similarity {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut sign = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let scale = if with_scale && var_s > 0.0 {
        (Matrix3::from_diagonal(&svd.singular_values) * sign).trace() / var_s
    } else {
        1.0
    };
    let translation = mu_d - scale * (rotation * mu_s);
    Similarity {
        scale,
        rotation,
        translation,
    }
}

/// ATE between positions associated by index.
pub fn ate(est: &[Vector3<f64>], gt: &[Vector3<f64>], alignment: Alignment) -> Result<AteReport, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    if est.is_empty() {
        return Err(EvalError::Empty);
    }
    let sim = umeyama(est, gt, alignment == Alignment::Sim3);
    let errors: Vec<f64> = est.iter().zip(gt).map(|(e, g)| (sim.apply(e) - g).norm()).collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    Ok(AteReport {
        rmse,
        median,
        max: sorted[m - 1],
        errors,
        alignment: sim,
    })
}

pub fn ate_rmse(est: &[Vector3<f64>], gt: &[Vector3<f64>], alignment: Alignment) -> Result<f64, EvalError> {
    ate(est, gt, alignment).map(|r| r.rmse)
}

/// `|s − 1|` for the sim3 scale mapping the estimate onto ground truth.
pub fn scale_error(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64, EvalError> {
    ate(est, gt, Alignment::Sim3).map(|r| (r.alignment.scale - 1.0).abs())
}
