//! File formats and dataset ingestion.

pub mod raster;
pub mod sequence;
pub mod trajectory;

pub use raster::{numbered_rasters, read_depth_raster, write_depth_raster, DepthRaster, RasterError, RasterMeta};
pub use sequence::{load_sequence, Frame, SequenceError, SequenceFormat};
pub use trajectory::{read_trajectory, write_trajectory, Trajectory, TrajectoryError, TrajectoryFormat};
