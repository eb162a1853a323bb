//! JSON snapshots of a problem, for offline diagnostics.
//!
//! Images are stored as raw `f32` bit patterns so NaN raster entries and
//! exact intensities survive the text encoding.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BaFrame, BaParams, BaPoint, BaProblem, Freedom};
use crate::geometry::{CameraModel, Pose};
use crate::image::{Image, Pyramid};
use crate::mapping::KeyframeId;
use crate::residuals::AffineBrightness;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed snapshot: {0}")]
    Format(#[from] serde_json::Error),
    #[error("inconsistent snapshot: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredImage {
    width: usize,
    height: usize,
    bits: Vec<u32>,
}

impl StoredImage {
    fn from_image(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.data().iter().map(|v| v.to_bits()).collect(),
        }
    }

    fn to_image(&self) -> Result<Image, SnapshotError> {
        if self.bits.len() != self.width * self.height {
            return Err(SnapshotError::Invalid(format!(
                "{} values for a {}x{} image",
                self.bits.len(),
                self.width,
                self.height
            )));
        }
        Ok(Image::new(
            self.width,
            self.height,
            self.bits.iter().map(|&b| f32::from_bits(b)).collect(),
        ))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredFrame {
    keyframe: KeyframeId,
    pose: Pose,
    affine: AffineBrightness,
    affine_prior: AffineBrightness,
    freedom: Freedom,
    levels: usize,
    image: StoredImage,
    raster: StoredImage,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemSnapshot {
    camera: CameraModel,
    params: BaParams,
    frames: Vec<StoredFrame>,
    points: Vec<BaPoint>,
}

impl ProblemSnapshot {
    pub fn capture(problem: &BaProblem) -> Self {
        Self {
            camera: problem.camera,
            params: problem.params.clone(),
            frames: problem
                .frames
                .iter()
                .map(|f| StoredFrame {
                    keyframe: f.keyframe,
                    pose: f.pose,
                    affine: f.affine,
                    affine_prior: f.affine_prior,
                    freedom: f.freedom,
                    levels: f.pyramid.num_levels(),
                    image: StoredImage::from_image(f.pyramid.base()),
                    raster: StoredImage::from_image(&f.raster),
                })
                .collect(),
            points: problem.points.clone(),
        }
    }

    pub fn restore(&self) -> Result<BaProblem, SnapshotError> {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                Ok(BaFrame {
                    keyframe: f.keyframe,
                    pose: f.pose,
                    affine: f.affine,
                    affine_prior: f.affine_prior,
                    freedom: f.freedom,
                    pyramid: Arc::new(Pyramid::new(f.image.to_image()?, f.levels.max(1))),
                    raster: Arc::new(f.raster.to_image()?),
                })
            })
            .collect::<Result<Vec<_>, SnapshotError>>()?;
        for p in &self.points {
            if p.host >= frames.len() || p.observers.iter().any(|&o| o >= frames.len()) {
                return Err(SnapshotError::Invalid(format!("point {:?} references a missing frame", p.id)));
            }
        }
        Ok(BaProblem::new(self.camera, frames, self.points.clone(), self.params.clone()))
    }

    pub fn to_json(&self) -> Result<String, SnapshotError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SnapshotError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SnapshotError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SnapshotError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
