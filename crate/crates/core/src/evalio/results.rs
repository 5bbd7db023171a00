use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::metrics::{association_scores, class_accuracy, trajectory_error, Alignment, ErrorStats};
use crate::error::Result;
use crate::geometry::Pose2;
use crate::pipeline::{MethodKind, RunResult};

/// Minimum observations for a landmark to count towards class accuracy.
pub const CLASS_ACCURACY_MIN_OBSERVATIONS: usize = 3;

/// Sweep coordinates of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub odom_scale: f64,
    pub misclass_rate: f64,
    pub runtime_s: f64,
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: String,
    pub seed: u64,
    pub odom_scale: f64,
    pub misclass_rate: f64,
    pub translation: Option<ErrorStats>,
    pub rotation: Option<ErrorStats>,
    pub association_accuracy: Option<f64>,
    pub association_precision: Option<f64>,
    pub association_recall: Option<f64>,
    pub class_accuracy: Option<f64>,
    pub landmark_count: usize,
    pub num_poses: usize,
    pub num_detections: usize,
    pub final_error: f64,
    pub runtime_s: f64,
}

impl ResultRecord {
    /// Scores `result` against whatever ground truth `dataset` carries.
    pub fn new(result: &RunResult, dataset: &Dataset, info: RunInfo) -> Result<Self> {
        let (translation, rotation) = match dataset.reference_trajectory() {
            Some(reference) => {
                let (t, r) = trajectory_error(&result.trajectory, &reference, Alignment::Origin)?;
                (Some(t), Some(r))
            }
            None => (None, None),
        };
        let scores = association_scores(result);
        let has_truth = scores.total > 0;
        Ok(Self {
            method: result.method.name().to_string(),
            seed: info.seed,
            odom_scale: info.odom_scale,
            misclass_rate: info.misclass_rate,
            translation,
            rotation,
            association_accuracy: scores.accuracy(),
            association_precision: if has_truth { scores.precision() } else { None },
            association_recall: if has_truth { scores.recall() } else { None },
            class_accuracy: class_accuracy(
                result,
                &dataset.landmark_classes(),
                CLASS_ACCURACY_MIN_OBSERVATIONS,
            ),
            landmark_count: result.landmarks.len(),
            num_poses: result.trajectory.len(),
            num_detections: result.associations.len(),
            final_error: result.final_error,
            runtime_s: info.runtime_s,
        })
    }

    pub fn method_kind(&self) -> Result<MethodKind> {
        self.method.parse()
    }
}

fn write_lines(mut out: impl Write, records: &[ResultRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes records as JSON lines, replacing the file.
pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    write_lines(BufWriter::new(File::create(path)?), records)
}

/// Appends records as JSON lines; each record is one `write` call.
pub fn append_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        file.write_all(&line)?;
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    t: usize,
    x: f64,
    y: f64,
    theta: f64,
}

/// Writes `t,x,y,theta` rows.
pub fn write_trajectory_csv(path: &Path, poses: &[Pose2]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for (t, p) in poses.iter().enumerate() {
        w.serialize(TrajectoryRow {
            t,
            x: p.x,
            y: p.y,
            theta: p.theta,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<Pose2>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut poses = Vec::new();
    for (i, row) in r.deserialize::<TrajectoryRow>().enumerate() {
        let row = row.map_err(|e| crate::error::SlamError::Parse {
            line: i + 2,
            reason: e.to_string(),
        })?;
        if row.t != i {
            return Err(crate::error::SlamError::Parse {
                line: i + 2,
                reason: format!("expected t = {i}, got {}", row.t),
            });
        }
        poses.push(Pose2::new(row.x, row.y, row.theta));
    }
    Ok(poses)
}

fn csv_error(e: csv::Error) -> crate::error::SlamError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::error::SlamError::Domain(format!("csv: {other:?}")),
    }
}
