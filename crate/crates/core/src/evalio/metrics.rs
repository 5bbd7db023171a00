use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::geometry::{wrap_angle, Pose2};
use crate::pipeline::{Association, RunResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub rmse: f64,
}

impl ErrorStats {
    /// Statistics of non-negative errors; all zero when empty.
    pub fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let n = errors.len() as f64;
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        Self {
            max: sorted[sorted.len() - 1],
            mean: errors.iter().sum::<f64>() / n,
            median,
            rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alignment {
    /// Move the estimate so its first pose coincides with the reference's.
    #[default]
    Origin,
    /// Least-squares rigid fit of positions.
    Umeyama,
}

fn umeyama(estimate: &[Pose2], reference: &[Pose2]) -> Pose2 {
    let n = estimate.len() as f64;
    let mean = |ps: &[Pose2]| {
        let (sx, sy) = ps.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
        (sx / n, sy / n)
    };
    let (ex, ey) = mean(estimate);
    let (rx, ry) = mean(reference);
    let (mut dot, mut cross) = (0.0, 0.0);
    for (e, r) in estimate.iter().zip(reference) {
        let (ax, ay) = (e.x - ex, e.y - ey);
        let (bx, by) = (r.x - rx, r.y - ry);
        dot += ax * bx + ay * by;
        cross += ax * by - ay * bx;
    }
    let angle = cross.atan2(dot);
    let (s, c) = angle.sin_cos();
    Pose2::new(rx - (c * ex - s * ey), ry - (s * ex + c * ey), angle)
}

/// Per-pose translation and heading errors after alignment.
pub fn trajectory_errors(
    estimate: &[Pose2],
    reference: &[Pose2],
    align: Alignment,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if estimate.len() != reference.len() {
        return Err(SlamError::LengthMismatch {
            estimate: estimate.len(),
            reference: reference.len(),
        });
    }
    if estimate.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let transform = match align {
        Alignment::Origin => reference[0].compose(&estimate[0].inverse()),
        Alignment::Umeyama => umeyama(estimate, reference),
    };
    Ok(estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let a = transform.compose(e);
            let dt = ((a.x - r.x).powi(2) + (a.y - r.y).powi(2)).sqrt();
            (dt, wrap_angle(a.theta - r.theta).abs())
        })
        .unzip())
}

/// Translation (m) and rotation (rad) error statistics.
pub fn trajectory_error(
    estimate: &[Pose2],
    reference: &[Pose2],
    align: Alignment,
) -> Result<(ErrorStats, ErrorStats)> {
    let (t, r) = trajectory_errors(estimate, reference, align)?;
    Ok((ErrorStats::from_errors(&t), ErrorStats::from_errors(&r)))
}

/// Scores of the final associations against ground-truth ids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationScores {
    /// Detections with a known true landmark.
    pub total: usize,
    pub correct: usize,
    /// Associations to an existing landmark.
    pub associated: usize,
    pub associated_correct: usize,
    /// Detections whose true landmark was already mapped.
    pub revisits: usize,
}

impl AssociationScores {
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.correct, self.total)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.associated_correct, self.associated)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.associated_correct, self.revisits)
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// A detection is correct when it lands on the landmark created from the
/// same true id, or starts (or is rejected as) a new landmark when that id
/// has not been mapped yet.
pub fn association_scores(result: &RunResult) -> AssociationScores {
    let owners: BTreeMap<usize, Option<usize>> =
        result.landmarks.iter().map(|l| (l.id, l.owner)).collect();
    let mut mapped: BTreeSet<usize> = BTreeSet::new();
    let mut s = AssociationScores::default();
    for rec in &result.associations {
        let Some(truth) = rec.true_landmark else {
            continue;
        };
        let seen = mapped.contains(&truth);
        s.total += 1;
        if seen {
            s.revisits += 1;
        }
        let correct = match rec.outcome {
            Association::New(_) | Association::Null => !seen,
            Association::Existing(j) => {
                s.associated += 1;
                let ok = owners.get(&j).copied().flatten() == Some(truth);
                if ok {
                    s.associated_correct += 1;
                }
                ok
            }
        };
        if correct {
            s.correct += 1;
        }
        if let Association::New(_) = rec.outcome {
            mapped.insert(truth);
        }
    }
    s
}

/// Fraction of ground-truth-owned landmarks with at least `min_observations`
/// whose MAP class equals the true class.
pub fn class_accuracy(
    result: &RunResult,
    true_classes: &BTreeMap<usize, usize>,
    min_observations: usize,
) -> Option<f64> {
    let (mut n, mut ok) = (0, 0);
    for lm in &result.landmarks {
        let Some(class) = lm.owner.and_then(|o| true_classes.get(&o)) else {
            continue;
        };
        if lm.observations < min_observations {
            continue;
        }
        n += 1;
        if lm.class == *class {
            ok += 1;
        }
    }
    ratio(ok, n)
}
