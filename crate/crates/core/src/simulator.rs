//! Synthetic worlds and noisy semantic range-bearing datasets.
//!
//! Every random draw comes from a ChaCha stream selected by
//! `(channel, step, index)`, so changing one noise source (for example the
//! misclassification rate) leaves all other draws untouched.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::association::ConfusionMatrix;
use crate::error::{Result, SlamError};
use crate::evalio::{Dataset, DatasetHeader, DetectionRecord, LandmarkTruth, OdometryRecord};
use crate::geometry::{range_bearing, Point2, Pose2};

/// Per-step odometry standard deviations `(x m, y m, yaw rad)` at scale 1.
pub const ODOM_BASE_SIGMAS: [f64; 3] = [1.5e-3, 0.75e-3, 2.25e-3];

/// Smallest odometry scale used when reporting covariances.
pub const MIN_REPORTED_ODOM_SCALE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub num_landmarks: usize,
    pub num_classes: usize,
    /// Half-width of the square arena centred at the origin.
    pub arena: f64,
    pub laps: usize,
    pub step_length: f64,
    pub loop_radius: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Full field of view, centred on the heading.
    pub field_of_view: f64,
    /// Range-bearing noise covariance.
    pub gamma: [f64; 4],
    /// When false, detections are exact; `gamma` is still reported.
    pub detection_noise: bool,
    pub odom_base: [f64; 3],
    pub odom_scale: f64,
    pub misclass_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_landmarks: 60,
            num_classes: 2,
            arena: 15.0,
            laps: 3,
            step_length: 1.0,
            loop_radius: 10.0,
            min_range: 1.0,
            max_range: 8.0,
            field_of_view: 2.0,
            gamma: [0.2 * 0.2, 0.0, 0.0, 0.05 * 0.05],
            detection_noise: true,
            odom_base: ODOM_BASE_SIGMAS,
            odom_scale: 1.0,
            misclass_rate: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SlamError::Domain(msg));
        if !(0.0..=0.5).contains(&self.misclass_rate) {
            return bad(format!(
                "misclass rate must lie in [0, 0.5], got {}",
                self.misclass_rate
            ));
        }
        if !(self.odom_scale >= 0.0 && self.odom_scale.is_finite()) {
            return bad(format!("odom scale must be >= 0, got {}", self.odom_scale));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(self.arena > 0.0 && self.step_length > 0.0 && self.loop_radius > 0.0) {
            return bad("arena, step length and loop radius must be positive".into());
        }
        if self.laps == 0 {
            return bad("need at least one lap".into());
        }
        if !(self.min_range > 0.0 && self.max_range > self.min_range) {
            return bad("sensor ranges must satisfy 0 < min_range < max_range".into());
        }
        if !(self.field_of_view > 0.0 && self.field_of_view <= TAU) {
            return bad("field of view must lie in (0, 2 pi]".into());
        }
        if self.odom_base.iter().any(|s| !(*s > 0.0)) {
            return bad("odometry base sigmas must be positive".into());
        }
        crate::geometry::check_spd(&nalgebra::DMatrix::from_row_slice(2, 2, &self.gamma))?;
        Ok(())
    }

    pub fn gamma_matrix(&self) -> Matrix2<f64> {
        let g = self.gamma;
        Matrix2::new(g[0], g[1], g[2], g[3])
    }

    pub fn confusion(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::symmetric(self.num_classes, self.misclass_rate)
    }

    /// Covariance reported with each odometry record: the true noise, with
    /// the scale floored so that exact odometry still has an SPD covariance.
    pub fn odometry_cov(&self) -> Matrix3<f64> {
        let s = self.odom_scale.max(MIN_REPORTED_ODOM_SCALE);
        let [a, b, c] = self.odom_base;
        Matrix3::from_diagonal(&Vector3::new(
            (a * s).powi(2),
            (b * s).powi(2),
            (c * s).powi(2),
        ))
    }

    /// Keyframes per lap of the circular loop.
    pub fn steps_per_lap(&self) -> usize {
        ((TAU * self.loop_radius / self.step_length).round() as usize).max(3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub poses: Vec<Pose2>,
    pub landmarks: Vec<(Point2, usize)>,
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Channel {
    World = 1,
    Odometry = 2,
    Geometry = 3,
    Class = 4,
}

fn stream(seed: u64, channel: Channel, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((channel as u64) << 56) ^ ((step as u64) << 24) ^ index as u64);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Counter-clockwise circular loop starting at `(0, -r)` heading along +x,
/// plus uniformly scattered landmarks with uniform classes.
pub fn generate_world(config: &SimConfig) -> Result<GroundTruth> {
    config.validate()?;
    let n = config.steps_per_lap();
    let dphi = TAU / n as f64;
    let r = config.loop_radius;
    let poses = (0..=n * config.laps)
        .map(|i| {
            let phi = -PI / 2.0 + dphi * (i % n) as f64;
            Pose2::new(r * phi.cos(), r * phi.sin(), phi + PI / 2.0)
        })
        .collect();
    let landmarks = (0..config.num_landmarks)
        .map(|j| {
            let mut rng = stream(config.seed, Channel::World, 0, j);
            let x = rng.random_range(-config.arena..=config.arena);
            let y = rng.random_range(-config.arena..=config.arena);
            let class = rng.random_range(0..config.num_classes);
            (Point2::new(x, y), class)
        })
        .collect();
    Ok(GroundTruth { poses, landmarks })
}

/// True if `p` is inside the sensor footprint of `pose`.
pub fn visible(config: &SimConfig, pose: &Pose2, p: &Point2) -> bool {
    match range_bearing(pose, p) {
        Ok(rb) => {
            rb.range >= config.min_range
                && rb.range <= config.max_range
                && rb.bearing.abs() <= config.field_of_view / 2.0
        }
        Err(_) => false,
    }
}

/// Noisy odometry and detections along `truth`.
pub fn simulate(truth: &GroundTruth, config: &SimConfig) -> Result<Dataset> {
    config.validate()?;
    let confusion = config.confusion()?;
    let gamma = config.gamma_matrix();
    let gamma_l = gamma.cholesky().ok_or(SlamError::NotPositiveDefinite)?.l();
    let odom_cov = config.odometry_cov();
    let sig = config.odom_base.map(|s| s * config.odom_scale);

    let mut d = Dataset {
        header: Some(DatasetHeader {
            confusion: confusion.clone(),
            gamma,
        }),
        landmarks: truth
            .landmarks
            .iter()
            .enumerate()
            .map(|(id, (position, class))| LandmarkTruth {
                id,
                position: *position,
                class: *class,
            })
            .collect(),
        poses: truth.poses.iter().copied().enumerate().collect(),
        ..Default::default()
    };

    for (t, pose) in truth.poses.iter().enumerate() {
        if t > 0 {
            let inc = truth.poses[t - 1].between(pose);
            let mut rng = stream(config.seed, Channel::Odometry, t, 0);
            let noise = Pose2::new(
                sig[0] * normal(&mut rng),
                sig[1] * normal(&mut rng),
                sig[2] * normal(&mut rng),
            );
            d.odometry.push(OdometryRecord {
                t,
                delta: inc.compose(&noise),
                cov: odom_cov,
            });
        }
        let mut k = 0;
        for (j, (position, class)) in truth.landmarks.iter().enumerate() {
            if !visible(config, pose, position) {
                continue;
            }
            let rb = range_bearing(pose, position)?;
            let mut rng = stream(config.seed, Channel::Geometry, t, j);
            // redraw the rare samples that would put the range below half the
            // minimum sensing range
            let n = loop {
                let n = gamma_l * nalgebra::Vector2::new(normal(&mut rng), normal(&mut rng));
                if !config.detection_noise {
                    break nalgebra::Vector2::zeros();
                }
                if rb.range + n[0] > 0.5 * config.min_range {
                    break n;
                }
            };
            let mut rng = stream(config.seed, Channel::Class, t, j);
            let u: f64 = rng.random();
            let detected = sample_row(confusion.row(*class), u);
            d.detections.push(DetectionRecord {
                t,
                k,
                range: rb.range + n[0],
                bearing: crate::geometry::wrap_angle(rb.bearing + n[1]),
                class: detected,
                true_landmark: Some(j),
            });
            k += 1;
        }
    }
    Ok(d)
}

/// Inverse-CDF draw from a probability row.
fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// `generate_world` followed by `simulate`.
pub fn generate(config: &SimConfig) -> Result<(GroundTruth, Dataset)> {
    let truth = generate_world(config)?;
    let data = simulate(&truth, config)?;
    Ok((truth, data))
}

/// Out-and-back run past two same-class landmarks `separation` apart, with
/// odometry that drifts by exactly that separation over the run so the
/// first landmark is predicted onto the second at the revisit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AliasingConfig {
    pub separation: f64,
    /// Lateral distance from the path to every landmark.
    pub standoff: f64,
    /// Straight steps per leg; two in-place quarter turns join the legs.
    pub leg_steps: usize,
    /// Reported per-step odometry standard deviations `(x, y, yaw)`.
    pub odom_sigmas: [f64; 3],
    /// Realized per-step odometry noise on top of the drift.
    pub odom_noise: [f64; 3],
    /// Reported range and bearing standard deviations.
    pub detection_sigmas: [f64; 2],
    /// Realized detection noise as a fraction of the reported sigmas.
    pub detection_noise_scale: f64,
    pub misclass_rate: f64,
}

impl Default for AliasingConfig {
    fn default() -> Self {
        Self {
            separation: 3.0,
            standoff: 9.0,
            leg_steps: 10,
            odom_sigmas: [0.4, 0.4, 0.01],
            odom_noise: [0.005, 0.005, 0.001],
            detection_sigmas: [0.3, 0.05],
            detection_noise_scale: 0.3,
            misclass_rate: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AliasingScenario {
    pub dataset: Dataset,
    /// Keyframe and index of the detection of landmark 0 at the revisit.
    pub aliased: (usize, usize),
    /// Same-class landmark the aliased detection is predicted onto.
    pub decoy: usize,
}

/// Builds the aliasing scenario. Landmarks 0 and 1 share class 0; landmarks
/// 2 and 3 have classes 1 and 2. All four are detected at the first and the
/// last keyframe only.
pub fn aliasing_scenario(seed: u64, config: &AliasingConfig) -> Result<AliasingScenario> {
    if config.leg_steps == 0 || !(config.separation > 0.0 && config.standoff > 0.0) {
        return Err(SlamError::Domain(
            "aliasing scenario needs positive legs, separation and standoff".into(),
        ));
    }
    let confusion = ConfusionMatrix::symmetric(3, config.misclass_rate)?;
    let [sr, sb] = config.detection_sigmas;
    let gamma = Matrix2::new(sr * sr, 0.0, 0.0, sb * sb);
    let [ox, oy, oth] = config.odom_sigmas;
    let odom_cov = Matrix3::from_diagonal(&Vector3::new(ox * ox, oy * oy, oth * oth));

    let (d, sep) = (config.standoff, config.separation);
    let landmarks = [
        (Point2::new(0.0, d), 0),
        (Point2::new(sep, d), 0),
        (Point2::new(1.0, -d), 1),
        (Point2::new(-8.0, -d), 2),
    ];

    let mut poses = vec![Pose2::new(0.0, 0.0, PI)];
    let forward = Pose2::new(1.0, 0.0, 0.0);
    let turn = Pose2::new(0.0, 0.0, PI / 2.0);
    let moves = std::iter::repeat_n(forward, config.leg_steps)
        .chain(std::iter::repeat_n(turn, 2))
        .chain(std::iter::repeat_n(forward, config.leg_steps));
    for m in moves {
        let next = poses.last().expect("non-empty").compose(&m);
        poses.push(next);
    }
    let last = poses.len() - 1;
    // constant world-frame drift along +x, expressed in each robot frame
    let drift = sep / last as f64;

    let mut dataset = Dataset {
        header: Some(DatasetHeader { confusion, gamma }),
        landmarks: landmarks
            .iter()
            .enumerate()
            .map(|(id, &(position, class))| LandmarkTruth {
                id,
                position,
                class,
            })
            .collect(),
        poses: poses.iter().copied().enumerate().collect(),
        ..Default::default()
    };
    for t in 1..=last {
        let inc = poses[t - 1].between(&poses[t]);
        let bias =
            crate::geometry::rotation(-poses[t - 1].theta) * nalgebra::Vector2::new(drift, 0.0);
        let mut rng = stream(seed, Channel::Odometry, t, 0);
        let [nx, ny, nth] = config.odom_noise;
        let delta = Pose2::new(
            inc.x + bias.x + nx * normal(&mut rng),
            inc.y + bias.y + ny * normal(&mut rng),
            inc.theta + nth * normal(&mut rng),
        );
        dataset.odometry.push(OdometryRecord {
            t,
            delta,
            cov: odom_cov,
        });
    }
    for t in [0, last] {
        for (j, &(position, class)) in landmarks.iter().enumerate() {
            let rb = range_bearing(&poses[t], &position)?;
            let mut rng = stream(seed, Channel::Geometry, t, j);
            let scale = config.detection_noise_scale;
            dataset.detections.push(DetectionRecord {
                t,
                k: j,
                range: rb.range + scale * sr * normal(&mut rng),
                bearing: crate::geometry::wrap_angle(rb.bearing + scale * sb * normal(&mut rng)),
                class,
                true_landmark: Some(j),
            });
        }
    }
    Ok(AliasingScenario {
        dataset,
        aliased: (last, 0),
        decoy: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let c = SimConfig::default();
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
        let other = SimConfig {
            seed: 1,
            ..c.clone()
        };
        assert_ne!(generate_world(&c).unwrap(), generate_world(&other).unwrap());
    }

    #[test]
    fn empty_world_has_valid_trajectory() {
        let c = SimConfig {
            num_landmarks: 0,
            ..Default::default()
        };
        let (truth, data) = generate(&c).unwrap();
        assert!(truth.landmarks.is_empty());
        assert!(data.detections.is_empty());
        assert_eq!(truth.poses.len(), c.laps * c.steps_per_lap() + 1);
        assert_eq!(data.keyframes().unwrap().len(), truth.poses.len());
    }

    #[test]
    fn loop_closes_and_steps_are_bounded() {
        let c = SimConfig::default();
        let truth = generate_world(&c).unwrap();
        let first = truth.poses[0];
        let last = *truth.poses.last().unwrap();
        assert!(first.position().distance(&last.position()) <= c.step_length);
        for w in truth.poses.windows(2) {
            let step = w[0].position().distance(&w[1].position());
            assert!(step <= c.step_length * 1.01);
        }
        for (p, class) in &truth.landmarks {
            assert!(p.x.abs() <= c.arena && p.y.abs() <= c.arena);
            assert!(*class < c.num_classes);
        }
    }

    #[test]
    fn exact_odometry_at_zero_scale() {
        let c = SimConfig {
            odom_scale: 0.0,
            ..Default::default()
        };
        let (truth, data) = generate(&c).unwrap();
        for o in &data.odometry {
            let inc = truth.poses[o.t - 1].between(&truth.poses[o.t]);
            assert_eq!(o.delta, inc);
        }
    }

    #[test]
    fn clean_labels_at_zero_rate() {
        let (truth, data) = generate(&SimConfig::default()).unwrap();
        assert!(!data.detections.is_empty());
        for det in &data.detections {
            assert_eq!(det.class, truth.landmarks[det.true_landmark.unwrap()].1);
        }
    }

    #[test]
    fn misclassification_rate_is_respected() {
        // 10^4 draws at alpha = 0.3
        let c = ConfusionMatrix::symmetric(2, 0.3).unwrap();
        let wrong = (0..10_000)
            .filter(|&i| {
                let mut rng = stream(7, Channel::Class, i, 0);
                sample_row(c.row(0), rng.random()) != 0
            })
            .count();
        let frac = wrong as f64 / 1e4;
        assert!((0.29..=0.31).contains(&frac), "{frac}");
    }

    #[test]
    fn class_noise_does_not_perturb_geometry() {
        let a = SimConfig {
            misclass_rate: 0.0,
            odom_scale: 3.0,
            ..Default::default()
        };
        let b = SimConfig {
            misclass_rate: 0.4,
            ..a.clone()
        };
        let (_, da) = generate(&a).unwrap();
        let (_, db) = generate(&b).unwrap();
        assert_eq!(da.odometry, db.odometry);
        assert_eq!(da.detections.len(), db.detections.len());
        for (x, y) in da.detections.iter().zip(&db.detections) {
            assert_eq!((x.range, x.bearing), (y.range, y.bearing));
        }
    }

    #[test]
    fn detections_respect_sensor_limits() {
        let c = SimConfig {
            field_of_view: 1.5,
            ..Default::default()
        };
        let (truth, data) = generate(&c).unwrap();
        let mut expected = 0;
        for pose in &truth.poses {
            for (p, _) in &truth.landmarks {
                let rb = range_bearing(pose, p).unwrap();
                if rb.range >= c.min_range && rb.range <= c.max_range && rb.bearing.abs() <= 0.75 {
                    expected += 1;
                }
            }
        }
        assert_eq!(data.detections.len(), expected);
    }

    #[test]
    fn odometry_noise_matches_configured_sigmas() {
        let c = SimConfig {
            odom_scale: 4.0,
            num_landmarks: 0,
            laps: 160,
            ..Default::default()
        };
        let (truth, data) = generate(&c).unwrap();
        assert!(data.odometry.len() >= 10_000);
        let mut sums = [0.0; 3];
        for o in &data.odometry {
            let inc = truth.poses[o.t - 1].between(&truth.poses[o.t]);
            let noise = inc.inverse().compose(&o.delta);
            for (i, v) in [noise.x, noise.y, noise.theta].iter().enumerate() {
                sums[i] += v * v;
            }
        }
        for i in 0..3 {
            let sigma = c.odom_base[i] * c.odom_scale;
            let var = sums[i] / data.odometry.len() as f64;
            let rel = (var / (sigma * sigma) - 1.0).abs();
            assert!(rel < 0.05, "axis {i}: {rel}");
        }
    }

    #[test]
    fn aliasing_drift_maps_the_first_landmark_onto_the_second() {
        let config = AliasingConfig {
            odom_noise: [0.0; 3],
            detection_noise_scale: 0.0,
            ..AliasingConfig::default()
        };
        let s = aliasing_scenario(0, &config).unwrap();
        let data = &s.dataset;
        let truth = data.reference_trajectory().unwrap();
        let mut dr = truth[0];
        for o in &data.odometry {
            dr = dr.compose(&o.delta);
        }
        let end = *truth.last().unwrap();
        assert!((dr.x - end.x - config.separation).abs() < 1e-9);
        assert!((dr.y - end.y).abs() < 1e-9);
        assert!(crate::geometry::wrap_angle(dr.theta - end.theta).abs() < 1e-12);

        // seen from the drifted pose, the revisit detection of A lands on B
        let (t, k) = s.aliased;
        let z = data
            .detections
            .iter()
            .find(|d| d.t == t && d.k == k)
            .unwrap();
        let projected = dr.project(z.range, z.bearing);
        assert!(projected.distance(&data.landmarks[s.decoy].position) < 1e-9);

        let times: std::collections::BTreeSet<usize> =
            data.detections.iter().map(|d| d.t).collect();
        assert_eq!(times.into_iter().collect::<Vec<_>>(), vec![0, t]);
    }

    #[test]
    fn aliasing_rejects_degenerate_layouts() {
        let bad = AliasingConfig {
            leg_steps: 0,
            ..AliasingConfig::default()
        };
        assert!(aliasing_scenario(0, &bad).is_err());
    }
}
