//! Odometry configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// How the photometric Huber kernel is applied to a pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PhotoAggregation {
    /// One kernel per pattern pixel.
    PerPixel,
    /// One kernel on the pattern-summed residual.
    PatchSum,
}

impl FromStr for PhotoAggregation {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "per_pixel" => Ok(Self::PerPixel),
            "patch_sum" => Ok(Self::PatchSum),
            _ => Err(()),
        }
    }
}

impl std::fmt::Display for PhotoAggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerPixel => "per_pixel",
            Self::PatchSum => "patch_sum",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignmentMethod {
    InverseCompositional,
    ForwardCompositional,
}

impl FromStr for AlignmentMethod {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "inverse_compositional" | "ic" => Ok(Self::InverseCompositional),
            "forward_compositional" | "fc" => Ok(Self::ForwardCompositional),
            _ => Err(()),
        }
    }
}

impl std::fmt::Display for AlignmentMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::InverseCompositional => "inverse_compositional",
            Self::ForwardCompositional => "forward_compositional",
        })
    }
}

/// Comma-separated list value.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|_| ()))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: std::fmt::Display> std::fmt::Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

macro_rules! odometry_config {
    ($( $(#[$doc:meta])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct OdometryConfig {
            $( $(#[$doc])* pub $name: $ty, )*
        }

        impl Default for OdometryConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl OdometryConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name) ),*];

            /// Sets one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $( stringify!($name) => {
                        self.$name = value.trim().parse::<$ty>().map_err(|_| ConfigError::InvalidValue {
                            key: key.to_string(),
                            value: value.to_string(),
                        })?;
                    } )*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// Serializes every field as `key = value` lines.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{} = {}", stringify!($name), self.$name); )*
                out
            }
        }
    };
}

odometry_config! {
    /// N_a: keyframes whose points are active for tracking.
    active_window: usize = 5,
    /// N_o: keyframes optimized in the windowed bundle adjustment.
    optimization_window: usize = 7,
    /// k: balance between photometric and depth-prediction costs.
    depth_weight: f64 = 5e3,
    /// TLS threshold on depth residuals, m⁻¹.
    tls_tau: f64 = 0.01,
    /// Huber threshold of the windowed optimization, intensity units.
    huber_delta: f64 = 9.0,
    photo_aggregation: PhotoAggregation = PhotoAggregation::PerPixel,

    grid_rows: usize = 16,
    grid_cols: usize = 32,
    /// Decreasing gradient-threshold factors of successive extraction rounds.
    f_schedule: List<f64> = List(vec![10.0, 7.0, 5.0, 3.0, 2.0, 1.0]),
    min_points: usize = 2000,
    /// Side of the square neighborhood masked around each extracted pixel.
    mask_size: usize = 5,
    /// Extraction keeps this many pixels away from the image border.
    border: usize = 4,

    keyframe_inlier_threshold: f64 = 0.70,
    redundancy_ratio: f64 = 0.80,
    redundancy_min_observations: usize = 3,

    cull_min_observations: usize = 2,
    cull_mean_residual: f64 = 9.0,
    cull_information_threshold: f64 = 1e-2,

    outlier_mean_residual: f64 = 9.0,
    outlier_pixel_residual: f64 = 15.0,
    outlier_pixel_fraction: f64 = 0.40,

    pyramid_levels: usize = 5,
    tracking_method: AlignmentMethod = AlignmentMethod::InverseCompositional,
    tracking_huber_delta: f64 = 9.0,
    tracking_max_iterations: usize = 20,
    tracking_lambda_init: f64 = 1e-4,
    tracking_rel_cost_tol: f64 = 1e-5,
    tracking_step_tol: f64 = 1e-6,
    tracking_min_valid: usize = 10,
    /// Mean absolute residual above which a frame counts as lost.
    tracking_max_mean_residual: f64 = 25.0,
    /// Mean residual at the coarsest level above which the rotation retry runs.
    retry_residual_ceiling: f64 = 25.0,
    /// The retry also runs when the coarsest residual exceeds this multiple
    /// of the previous frame's.
    retry_relative_factor: f64 = 1.5,
    retry_angle_deg: f64 = 10.0,
    /// Largest relative log-gain `|a|` accepted from tracking.
    tracking_max_log_gain: f64 = 1.0,
    dilation_radius: usize = 1,
    weight_min: f64 = 1e-2,
    weight_max: f64 = 1e4,

    ba_levels: List<usize> = List(vec![2, 1, 0]),
    ba_iterations: List<usize> = List(vec![8, 8, 15]),
    affine_prior_weight: f64 = 1e4,
    ba_lambda_init: f64 = 1e-4,
    ba_lambda_max: f64 = 1e8,
    ba_rel_cost_tol: f64 = 1e-8,

    /// Worker threads for residual evaluation; 0 runs sequentially.
    threads: usize = 0,
}

impl OdometryConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.active_window == 0 || self.optimization_window < self.active_window {
            return bad("require 0 < active_window <= optimization_window");
        }
        if !(self.depth_weight >= 0.0) {
            return bad("depth_weight must be non-negative");
        }
        for (name, v) in [
            ("tls_tau", self.tls_tau),
            ("huber_delta", self.huber_delta),
            ("tracking_huber_delta", self.tracking_huber_delta),
            ("weight_min", self.weight_min),
            ("affine_prior_weight", self.affine_prior_weight),
        ] {
            if !(v > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.weight_max < self.weight_min {
            return bad("weight_max must be >= weight_min");
        }
        if self.pyramid_levels == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("pyramid levels and grid sizes must be positive");
        }
        if self.f_schedule.0.is_empty() {
            return bad("f_schedule must not be empty");
        }
        if self.ba_levels.0.len() != self.ba_iterations.0.len() {
            return bad("ba_levels and ba_iterations must have equal length");
        }
        if self.ba_levels.0.iter().any(|&l| l >= self.pyramid_levels) {
            return bad("ba_levels must be below pyramid_levels");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = OdometryConfig::default();
        let back = OdometryConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.active_window, 5);
        assert_eq!(cfg.optimization_window, 7);
        assert_eq!(cfg.depth_weight, 5e3);
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = OdometryConfig::from_text("# c\nmin_points = 100\nf_schedule = 4, 2\n").unwrap();
        assert_eq!(cfg.min_points, 100);
        assert_eq!(cfg.f_schedule, List(vec![4.0, 2.0]));
        assert!(matches!(
            OdometryConfig::from_text("nope = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            OdometryConfig::from_text("min_points = x"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            OdometryConfig::from_text("min_points"),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(
            OdometryConfig::from_text("active_window = 9"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
