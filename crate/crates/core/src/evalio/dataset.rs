//! Line-oriented dataset format.
//!
//! ```text
//! HEADER C <C> CONFUSION <C*C row-major> GAMMA <4 row-major>
//! LANDMARK_GT <j> <x> <y> <class>
//! POSE_GT <t> <x> <y> <theta>
//! ODOM <t> <dx> <dy> <dtheta> <xx> <xy> <xt> <yy> <yt> <tt>
//! DET <t> <k> <range> <bearing> <class> <true_landmark_id|-1>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. `ODOM t` is the
//! motion from keyframe `t - 1` to `t`; keyframe 0 has no odometry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix3};

use crate::association::{ConfusionMatrix, SemanticMeasurement};
use crate::error::{Result, SlamError};
use crate::geometry::{check_spd, Point2, Pose2};
use crate::pipeline::{Keyframe, Odometry};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub confusion: ConfusionMatrix,
    pub gamma: Matrix2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkTruth {
    pub id: usize,
    pub position: Point2,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdometryRecord {
    pub t: usize,
    pub delta: Pose2,
    pub cov: Matrix3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionRecord {
    pub t: usize,
    pub k: usize,
    pub range: f64,
    pub bearing: f64,
    pub class: usize,
    pub true_landmark: Option<usize>,
}

/// Parsed dataset. Records keep file order within each kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub header: Option<DatasetHeader>,
    pub landmarks: Vec<LandmarkTruth>,
    pub poses: Vec<(usize, Pose2)>,
    pub odometry: Vec<OdometryRecord>,
    pub detections: Vec<DetectionRecord>,
}

fn parse_err(line: usize, reason: impl Into<String>) -> SlamError {
    SlamError::Parse {
        line,
        reason: reason.into(),
    }
}

struct Fields<'a> {
    line: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn next<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self
            .tokens
            .next()
            .ok_or_else(|| parse_err(self.line, format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| parse_err(self.line, format!("invalid {what} '{tok}'")))
    }

    fn float(&mut self, what: &str) -> Result<f64> {
        let v: f64 = self.next(what)?;
        if !v.is_finite() {
            return Err(parse_err(self.line, format!("{what} is not finite")));
        }
        Ok(v)
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        match self.tokens.next() {
            Some(t) if t == kw => Ok(()),
            other => Err(parse_err(
                self.line,
                format!(
                    "expected '{kw}', found '{}'",
                    other.unwrap_or("end of line")
                ),
            )),
        }
    }

    fn finish(mut self) -> Result<()> {
        match self.tokens.next() {
            None => Ok(()),
            Some(t) => Err(parse_err(self.line, format!("unexpected trailing '{t}'"))),
        }
    }
}

fn spd(line: usize, what: &str, m: nalgebra::DMatrix<f64>) -> Result<()> {
    if (&m - m.transpose()).amax() > 0.0 {
        return Err(parse_err(line, format!("{what} is not symmetric")));
    }
    check_spd(&m).map_err(|_| parse_err(line, format!("{what} is not positive definite")))
}

/// Parses dataset text; errors name the offending line (1-based).
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut d = Dataset::default();
    let mut gt_lines: BTreeMap<usize, usize> = BTreeMap::new();
    let mut det_lines = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let kind = tokens.next().expect("non-empty line");
        let mut f = Fields { line, tokens };
        match kind {
            "HEADER" => {
                if d.header.is_some() {
                    return Err(parse_err(line, "duplicate HEADER"));
                }
                f.keyword("C")?;
                let c: usize = f.next("class count")?;
                f.keyword("CONFUSION")?;
                let entries = (0..c * c)
                    .map(|_| f.float("confusion entry"))
                    .collect::<Result<Vec<_>>>()?;
                let confusion =
                    ConfusionMatrix::new(c, entries).map_err(|e| parse_err(line, e.to_string()))?;
                f.keyword("GAMMA")?;
                let g = (0..4)
                    .map(|_| f.float("gamma entry"))
                    .collect::<Result<Vec<_>>>()?;
                f.finish()?;
                let gamma = Matrix2::new(g[0], g[1], g[2], g[3]);
                spd(line, "GAMMA", nalgebra::DMatrix::from_row_slice(2, 2, &g))?;
                d.header = Some(DatasetHeader { confusion, gamma });
            }
            "LANDMARK_GT" => {
                let id: usize = f.next("landmark id")?;
                let x = f.float("x")?;
                let y = f.float("y")?;
                let class: usize = f.next("class")?;
                f.finish()?;
                if gt_lines.insert(id, line).is_some() {
                    return Err(parse_err(line, format!("duplicate landmark {id}")));
                }
                d.landmarks.push(LandmarkTruth {
                    id,
                    position: Point2::new(x, y),
                    class,
                });
            }
            "POSE_GT" => {
                let t: usize = f.next("time")?;
                let x = f.float("x")?;
                let y = f.float("y")?;
                let theta = f.float("theta")?;
                f.finish()?;
                if d.poses.last().is_some_and(|(prev, _)| *prev >= t) {
                    return Err(parse_err(line, "POSE_GT times must be strictly increasing"));
                }
                d.poses.push((t, Pose2::new(x, y, theta)));
            }
            "ODOM" => {
                let t: usize = f.next("time")?;
                let dx = f.float("dx")?;
                let dy = f.float("dy")?;
                let dtheta = f.float("dtheta")?;
                let u = (0..6)
                    .map(|_| f.float("covariance entry"))
                    .collect::<Result<Vec<_>>>()?;
                f.finish()?;
                let expected = d.odometry.last().map_or(1, |o| o.t + 1);
                if t != expected {
                    return Err(parse_err(
                        line,
                        format!("expected ODOM time {expected}, got {t}"),
                    ));
                }
                let cov = Matrix3::new(u[0], u[1], u[2], u[1], u[3], u[4], u[2], u[4], u[5]);
                spd(
                    line,
                    "odometry covariance",
                    nalgebra::DMatrix::from_iterator(3, 3, cov.iter().copied()),
                )?;
                d.odometry.push(OdometryRecord {
                    t,
                    delta: Pose2::new(dx, dy, dtheta),
                    cov,
                });
            }
            "DET" => {
                let t: usize = f.next("time")?;
                let k: usize = f.next("index")?;
                let range = f.float("range")?;
                let bearing = f.float("bearing")?;
                let class: usize = f.next("class")?;
                let truth: i64 = f.next("true landmark id")?;
                f.finish()?;
                if !(range > 0.0) {
                    return Err(parse_err(line, "range must be positive"));
                }
                let true_landmark = match truth {
                    -1 => None,
                    id if id >= 0 => Some(id as usize),
                    _ => return Err(parse_err(line, "true landmark id must be >= -1")),
                };
                if let Some(prev) = d.detections.last() {
                    if (t, k) <= (prev.t, prev.k) {
                        return Err(parse_err(
                            line,
                            "DET records must be ordered by time, then index",
                        ));
                    }
                }
                d.detections.push(DetectionRecord {
                    t,
                    k,
                    range,
                    bearing,
                    class,
                    true_landmark,
                });
                det_lines.push(line);
            }
            other => return Err(parse_err(line, format!("unknown record '{other}'"))),
        }
    }

    let classes = d.header.as_ref().map(|h| h.confusion.classes());
    for lm in &d.landmarks {
        if classes.is_some_and(|c| lm.class >= c) {
            return Err(parse_err(gt_lines[&lm.id], "landmark class out of range"));
        }
    }
    let last_t = d.odometry.last().map_or(0, |o| o.t);
    for (det, &line) in d.detections.iter().zip(&det_lines) {
        let Some(c) = classes else {
            return Err(parse_err(line, "DET record requires a HEADER"));
        };
        if det.class >= c {
            return Err(parse_err(line, "detected class out of range"));
        }
        if det.t > last_t {
            return Err(parse_err(
                line,
                format!("no keyframe {} for detection", det.t),
            ));
        }
        if let Some(j) = det.true_landmark {
            if !d.landmarks.is_empty() && !gt_lines.contains_key(&j) {
                return Err(parse_err(line, format!("unknown true landmark {j}")));
            }
        }
    }
    Ok(d)
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes with 17 significant digits so that parsing is exact.
pub fn serialize_dataset(d: &Dataset) -> String {
    let mut out = String::new();
    if let Some(h) = &d.header {
        let c = h.confusion.classes();
        let _ = write!(out, "HEADER C {c} CONFUSION");
        for v in h.confusion.entries() {
            let _ = write!(out, " {}", num(*v));
        }
        out.push_str(" GAMMA");
        for v in [
            h.gamma[(0, 0)],
            h.gamma[(0, 1)],
            h.gamma[(1, 0)],
            h.gamma[(1, 1)],
        ] {
            let _ = write!(out, " {}", num(v));
        }
        out.push('\n');
    }
    for lm in &d.landmarks {
        let _ = writeln!(
            out,
            "LANDMARK_GT {} {} {} {}",
            lm.id,
            num(lm.position.x),
            num(lm.position.y),
            lm.class
        );
    }
    for (t, p) in &d.poses {
        let _ = writeln!(
            out,
            "POSE_GT {t} {} {} {}",
            num(p.x),
            num(p.y),
            num(p.theta)
        );
    }
    for o in &d.odometry {
        let c = &o.cov;
        let _ = write!(
            out,
            "ODOM {} {} {} {}",
            o.t,
            num(o.delta.x),
            num(o.delta.y),
            num(o.delta.theta)
        );
        for v in [
            c[(0, 0)],
            c[(0, 1)],
            c[(0, 2)],
            c[(1, 1)],
            c[(1, 2)],
            c[(2, 2)],
        ] {
            let _ = write!(out, " {}", num(v));
        }
        out.push('\n');
    }
    for det in &d.detections {
        let truth = det.true_landmark.map_or(-1, |j| j as i64);
        let _ = writeln!(
            out,
            "DET {} {} {} {} {} {truth}",
            det.t,
            det.k,
            num(det.range),
            num(det.bearing),
            det.class
        );
    }
    out
}

impl Dataset {
    pub fn num_keyframes(&self) -> usize {
        if self.header.is_none() && self.odometry.is_empty() && self.poses.is_empty() {
            0
        } else {
            self.odometry.len() + 1
        }
    }

    /// Ground-truth trajectory, if every keyframe has a true pose.
    pub fn reference_trajectory(&self) -> Option<Vec<Pose2>> {
        let n = self.num_keyframes();
        let by_t: BTreeMap<usize, Pose2> = self.poses.iter().copied().collect();
        (0..n).map(|t| by_t.get(&t).copied()).collect()
    }

    pub fn landmark_classes(&self) -> BTreeMap<usize, usize> {
        self.landmarks.iter().map(|l| (l.id, l.class)).collect()
    }

    /// Distinct true landmark ids referenced by detections.
    pub fn observed_landmarks(&self) -> BTreeSet<usize> {
        self.detections
            .iter()
            .filter_map(|d| d.true_landmark)
            .collect()
    }

    /// Keyframes in time order, ready for the pipeline.
    pub fn keyframes(&self) -> Result<Vec<Keyframe>> {
        let n = self.num_keyframes();
        if n == 0 {
            return Ok(Vec::new());
        }
        let header = self
            .header
            .as_ref()
            .ok_or_else(|| SlamError::Domain("dataset has no HEADER".into()))?;
        let truth: BTreeMap<usize, Pose2> = self.poses.iter().copied().collect();
        let mut frames: Vec<Keyframe> = (0..n)
            .map(|t| Keyframe {
                t,
                odometry: None,
                detections: Vec::new(),
                true_pose: truth.get(&t).copied(),
                true_landmarks: Vec::new(),
            })
            .collect();
        for o in &self.odometry {
            frames[o.t].odometry = Some(Odometry {
                delta: o.delta,
                cov: o.cov,
            });
        }
        for det in &self.detections {
            let frame = &mut frames[det.t];
            frame.detections.push(SemanticMeasurement {
                range: det.range,
                bearing: det.bearing,
                detected_class: det.class,
                geometric_cov: header.gamma,
                t: det.t,
                k: det.k,
            });
            frame.true_landmarks.push(det.true_landmark);
        }
        Ok(frames)
    }
}
