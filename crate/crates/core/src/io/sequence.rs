//! Image sequence loaders.
//!
//! Two layouts are understood: a KITTI odometry sequence directory
//! (`image_0/` plus `calib.txt`) and a plain directory of numerically named
//! images with an explicitly supplied camera.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::CameraModel;
use crate::image::Image;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("no calibration found at {0}")]
    MissingCalibration(PathBuf),
    #[error("malformed calibration: {0}")]
    BadCalibration(String),
    #[error("image names must be distinct integers: {0}")]
    NonMonotonicNames(String),
    #[error("cannot read image {path}: {msg}")]
    UnreadableImage { path: PathBuf, msg: String },
    #[error("no images in {0}")]
    Empty(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceFormat {
    KittiGray,
    ImageDir,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    /// Integer stem of the source file name.
    pub id: u64,
    pub image: Image,
    pub camera: CameraModel,
}

/// Ordered list of frame files; images are decoded on demand.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub camera: CameraModel,
    pub files: Vec<(u64, PathBuf)>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn frame(&self, index: usize) -> Result<Frame, SequenceError> {
        let (id, path) = &self.files[index];
        let image = read_gray(path)?;
        if image.width() != self.camera.width || image.height() != self.camera.height {
            return Err(SequenceError::UnreadableImage {
                path: path.clone(),
                msg: format!(
                    "size {}x{} does not match camera {}x{}",
                    image.width(),
                    image.height(),
                    self.camera.width,
                    self.camera.height
                ),
            });
        }
        Ok(Frame {
            index,
            id: *id,
            image,
            camera: self.camera,
        })
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<Frame, SequenceError>> + '_ {
        (0..self.len()).map(|i| self.frame(i))
    }
}

/// Decodes any supported image file to grayscale intensities in [0, 255].
pub fn read_gray(path: &Path) -> Result<Image, SequenceError> {
    let img = image::open(path).map_err(|e| SequenceError::UnreadableImage {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Image::new(
        w as usize,
        h as usize,
        gray.into_raw().into_iter().map(f32::from).collect(),
    ))
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "pgm", "ppm", "tif", "tiff", "bmp"];

/// Files with image extensions sorted by their integer stem.
pub fn numbered_files(dir: &Path) -> Result<Vec<(u64, PathBuf)>, SequenceError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let id: u64 = stem
            .parse()
            .map_err(|_| SequenceError::NonMonotonicNames(format!("`{stem}` is not an integer")))?;
        files.push((id, path));
    }
    files.sort();
    if let Some(w) = files.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(SequenceError::NonMonotonicNames(format!("duplicate index {}", w[0].0)));
    }
    if files.is_empty() {
        return Err(SequenceError::Empty(dir.to_path_buf()));
    }
    Ok(files)
}

/// Parses the `P0:` projection matrix of a KITTI `calib.txt`.
pub fn parse_kitti_calib(text: &str) -> Result<[f64; 4], SequenceError> {
    let line = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("P0:"))
        .ok_or_else(|| SequenceError::BadCalibration("no P0 row".into()))?;
    let p: Vec<f64> = line
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| SequenceError::BadCalibration(format!("{e}")))?;
    if p.len() != 12 {
        return Err(SequenceError::BadCalibration(format!("P0 has {} values", p.len())));
    }
    Ok([p[0], p[5], p[2], p[6]])
}

/// Opens a sequence; `camera` is required for `ImageDir` and ignored otherwise.
pub fn load_sequence(
    path: &Path,
    format: SequenceFormat,
    camera: Option<CameraModel>,
) -> Result<Sequence, SequenceError> {
    match format {
        SequenceFormat::KittiGray => {
            let calib = path.join("calib.txt");
            if !calib.exists() {
                return Err(SequenceError::MissingCalibration(calib));
            }
            let [fx, fy, cx, cy] = parse_kitti_calib(&fs::read_to_string(&calib)?)?;
            let files = numbered_files(&path.join("image_0"))?;
            let first = read_gray(&files[0].1)?;
            let camera = CameraModel::new(fx, fy, cx, cy, first.width(), first.height())
                .map_err(|e| SequenceError::BadCalibration(e.to_string()))?;
            Ok(Sequence { camera, files })
        }
        SequenceFormat::ImageDir => {
            let camera = camera.ok_or_else(|| SequenceError::MissingCalibration(path.to_path_buf()))?;
            let files = numbered_files(path)?;
            Ok(Sequence { camera, files })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CALIB: &str = "P0: 7.188560000000e+02 0.000000000000e+00 6.071928000000e+02 0.000000000000e+00 0.000000000000e+00 7.188560000000e+02 1.852157000000e+02 0.000000000000e+00 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 0.000000000000e+00\nP1: 7.188560000000e+02 0 6.071928000000e+02 -3.861448000000e+02 0 7.188560000000e+02 1.852157000000e+02 0 0 0 1 0\n";

    fn write_png(path: &Path, w: u32, h: u32) {
        let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([((x * 7 + y * 3) % 256) as u8]));
        img.save(path).unwrap();
    }

    #[test]
    fn kitti_calibration_values() {
        let [fx, fy, cx, cy] = parse_kitti_calib(CALIB).unwrap();
        assert_eq!((fx, fy, cx, cy), (718.856, 718.856, 607.1928, 185.2157));
    }

    #[test]
    fn kitti_layout_loads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("image_0")).unwrap();
        for i in [2, 0, 1] {
            write_png(&dir.path().join(format!("image_0/{i:06}.png")), 1241, 376);
        }
        assert!(matches!(
            load_sequence(dir.path(), SequenceFormat::KittiGray, None),
            Err(SequenceError::MissingCalibration(_))
        ));
        fs::write(dir.path().join("calib.txt"), CALIB).unwrap();
        let seq = load_sequence(dir.path(), SequenceFormat::KittiGray, None).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.camera.fx, 718.856);
        let ids: Vec<u64> = seq.frames().map(|f| f.unwrap().id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(seq.frame(1).unwrap().image.get(3, 2), ((3 * 7 + 2 * 3) % 256) as f32);
    }

    #[test]
    fn image_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cam = CameraModel::new(100.0, 100.0, 15.5, 11.5, 32, 24).unwrap();
        assert!(matches!(
            load_sequence(dir.path(), SequenceFormat::ImageDir, Some(cam)),
            Err(SequenceError::Empty(_))
        ));
        write_png(&dir.path().join("1.png"), 32, 24);
        write_png(&dir.path().join("10.png"), 32, 24);
        let seq = load_sequence(dir.path(), SequenceFormat::ImageDir, Some(cam)).unwrap();
        assert_eq!(seq.files.iter().map(|f| f.0).collect::<Vec<_>>(), vec![1, 10]);
        assert!(matches!(
            load_sequence(dir.path(), SequenceFormat::ImageDir, None),
            Err(SequenceError::MissingCalibration(_))
        ));
        write_png(&dir.path().join("01.png"), 32, 24);
        assert!(matches!(
            load_sequence(dir.path(), SequenceFormat::ImageDir, Some(cam)),
            Err(SequenceError::NonMonotonicNames(_))
        ));
        fs::remove_file(dir.path().join("01.png")).unwrap();
        write_png(&dir.path().join("frame.png"), 32, 24);
        assert!(matches!(
            load_sequence(dir.path(), SequenceFormat::ImageDir, Some(cam)),
            Err(SequenceError::NonMonotonicNames(_))
        ));
        fs::remove_file(dir.path().join("frame.png")).unwrap();
        fs::write(dir.path().join("11.png"), b"not a png").unwrap();
        let seq = load_sequence(dir.path(), SequenceFormat::ImageDir, Some(cam)).unwrap();
        assert!(matches!(seq.frame(2), Err(SequenceError::UnreadableImage { .. })));
    }
}
