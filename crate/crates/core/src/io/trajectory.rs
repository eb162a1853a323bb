//! Trajectory text formats.
//!
//! KITTI: one row-major 3×4 camera-to-world matrix per line.
//! TUM: `timestamp tx ty tz qx qy qz qw` per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trajectory is empty")]
    Empty,
    #[error("frame indices must be strictly increasing")]
    NonMonotonic,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Kitti,
    Tum,
}

impl FromStr for TrajectoryFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kitti" => Ok(Self::Kitti),
            "tum" => Ok(Self::Tum),
            _ => Err(format!("unknown trajectory format `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub frame: usize,
    pub timestamp: f64,
    /// Camera-to-world pose.
    pub pose: Pose,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    pub fn push(&mut self, frame: usize, timestamp: f64, pose: Pose) -> Result<(), TrajectoryError> {
        if self.entries.last().is_some_and(|e| e.frame >= frame) {
            return Err(TrajectoryError::NonMonotonic);
        }
        self.entries.push(TrajectoryEntry {
            frame,
            timestamp,
            pose,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|e| e.pose.translation).collect()
    }

    /// Builds a trajectory from world-to-camera poses indexed by frame.
    pub fn from_world_to_camera(poses: &[Pose]) -> Self {
        Self {
            entries: poses
                .iter()
                .enumerate()
                .map(|(i, p)| TrajectoryEntry {
                    frame: i,
                    timestamp: i as f64,
                    pose: p.inverse(),
                })
                .collect(),
        }
    }
}

pub fn format_trajectory(traj: &Trajectory, format: TrajectoryFormat) -> String {
    let mut out = String::new();
    for e in &traj.entries {
        let (r, t) = (e.pose.rotation, e.pose.translation);
        match format {
            TrajectoryFormat::Kitti => {
                let vals = [
                    r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
                    r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
                    r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
                ];
                let line: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
            TrajectoryFormat::Tum => {
                let q = e.pose.quaternion();
                let _ = writeln!(
                    out,
                    "{} {} {} {} {} {} {} {}",
                    e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
                );
            }
        }
    }
    out
}

pub fn parse_trajectory(text: &str, format: TrajectoryFormat) -> Result<Trajectory, TrajectoryError> {
    let mut traj = Trajectory::default();
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    for (n, (i, line)) in rows.enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TrajectoryError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let expected = match format {
            TrajectoryFormat::Kitti => 12,
            TrajectoryFormat::Tum => 8,
        };
        if vals.len() != expected {
            return Err(TrajectoryError::Parse {
                line: i + 1,
                msg: format!("expected {expected} values, found {}", vals.len()),
            });
        }
        let (timestamp, pose) = match format {
            TrajectoryFormat::Kitti => {
                let r = Matrix3::new(
                    vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
                );
                (n as f64, Pose::new(r, Vector3::new(vals[3], vals[7], vals[11])))
            }
            TrajectoryFormat::Tum => {
                let q = UnitQuaternion::from_quaternion(Quaternion::new(vals[7], vals[4], vals[5], vals[6]));
                (vals[0], Pose::from_quaternion(&q, Vector3::new(vals[1], vals[2], vals[3])))
            }
        };
        traj.push(n, timestamp, pose)?;
    }
    Ok(traj)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, format: TrajectoryFormat) -> Result<(), TrajectoryError> {
    if traj.is_empty() {
        return Err(TrajectoryError::Empty);
    }
    fs::write(path, format_trajectory(traj, format))?;
    Ok(())
}

pub fn read_trajectory(path: &Path, format: TrajectoryFormat) -> Result<Trajectory, TrajectoryError> {
    parse_trajectory(&fs::read_to_string(path)?, format)
}
