//! The incremental SLAM loop and the association strategies it compares.
//!
//! Every keyframe appends a pose, scores each detection against the map at
//! the current estimate, commits the detection according to the method, and
//! re-optimizes the whole graph.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix3, Matrix5};
use serde::{Deserialize, Serialize};

use crate::association::{
    compute_hypotheses, map_class, normalize_scores, score_candidate, update_class_belief,
    AssociationConfig, ClassBelief, ConfusionMatrix, HypothesisSet, LandmarkCandidate,
    SemanticMeasurement,
};
use crate::error::{Result, SlamError};
use crate::evalio::Dataset;
use crate::factor_graph::{
    optimize, BetweenPose2Factor, Factor, FactorGraph, MarginalSolver, OptStats, OptimizerConfig,
    PriorPose2Factor, RangeBearingFactor, Values, VariableId,
};
use crate::geometry::{NoiseModel, Point2, Pose2};
use crate::mixture::{MixtureComponent, NullComponent, SemanticMaxMixtureFactor};

const MIN_SURROGATE_WEIGHT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    KnownDA,
    MaxLikelihood,
    Gpda,
    MaxMixture,
    MaxMixtureNull,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::KnownDA,
        MethodKind::MaxLikelihood,
        MethodKind::Gpda,
        MethodKind::MaxMixture,
        MethodKind::MaxMixtureNull,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::KnownDA => "known",
            MethodKind::MaxLikelihood => "ml",
            MethodKind::Gpda => "gpda",
            MethodKind::MaxMixture => "mm",
            MethodKind::MaxMixtureNull => "mm-nh",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = SlamError;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SlamError::Domain(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlamConfig {
    pub gate_confidence: f64,
    /// Null-hypothesis weight used by `MaxMixtureNull`.
    pub null_weight: f64,
    pub null_sigma: f64,
    pub confusion: ConfusionMatrix,
    pub optimizer: OptimizerConfig,
    /// Re-optimize after every `optimize_every` keyframes.
    pub optimize_every: usize,
    /// Standard deviations of the prior on the first pose.
    pub prior_sigmas: [f64; 3],
    pub gpda_max_rounds: usize,
    pub gpda_weight_tol: f64,
}

impl SlamConfig {
    pub fn new(confusion: ConfusionMatrix) -> Self {
        Self {
            gate_confidence: 0.9,
            null_weight: 0.1,
            null_sigma: crate::mixture::DEFAULT_NULL_SIGMA,
            confusion,
            optimizer: OptimizerConfig::default(),
            optimize_every: 1,
            prior_sigmas: [1e-3; 3],
            gpda_max_rounds: 10,
            gpda_weight_tol: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gate_confidence > 0.0 && self.gate_confidence < 1.0) {
            return Err(SlamError::Domain(format!(
                "gate confidence must lie in (0, 1), got {}",
                self.gate_confidence
            )));
        }
        if !(0.0..1.0).contains(&self.null_weight) {
            return Err(SlamError::Domain(format!(
                "null weight must lie in [0, 1), got {}",
                self.null_weight
            )));
        }
        if self.optimize_every == 0 {
            return Err(SlamError::Domain(
                "optimize_every must be at least 1".into(),
            ));
        }
        NullComponent::new(self.null_weight.max(f64::MIN_POSITIVE), self.null_sigma)?;
        Ok(())
    }

    fn prior_cov(&self) -> Matrix3<f64> {
        let [a, b, c] = self.prior_sigmas;
        Matrix3::from_diagonal(&nalgebra::Vector3::new(a * a, b * b, c * c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Odometry {
    pub delta: Pose2,
    pub cov: Matrix3<f64>,
}

/// One step of input: odometry since the previous keyframe plus detections.
#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub t: usize,
    /// `None` only for the first keyframe.
    pub odometry: Option<Odometry>,
    pub detections: Vec<SemanticMeasurement>,
    pub true_pose: Option<Pose2>,
    /// True landmark of each detection, when known.
    pub true_landmarks: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkInfo {
    pub belief: ClassBelief,
    pub created_at: usize,
    /// True id of the detection that created the landmark.
    pub owner: Option<usize>,
    /// Detections committed to this landmark (argmax for soft methods).
    pub observations: usize,
}

/// How a detection entered the graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Commitment {
    Created {
        landmark: usize,
        factor: usize,
    },
    Plain {
        landmark: usize,
        factor: usize,
    },
    Mixture {
        factor: usize,
    },
    /// One weighted factor per candidate; weights are refined by EM.
    Surrogate {
        landmarks: Vec<usize>,
        factors: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementLog {
    pub t: usize,
    pub k: usize,
    pub range: f64,
    pub bearing: f64,
    pub detected_class: usize,
    /// Measurement covariance, row-major.
    pub gamma: [f64; 4],
    pub true_landmark: Option<usize>,
    pub hypotheses: HypothesisSet,
    pub commitment: Commitment,
}

impl MeasurementLog {
    pub fn measurement(&self) -> SemanticMeasurement {
        let g = self.gamma;
        SemanticMeasurement {
            range: self.range,
            bearing: self.bearing,
            detected_class: self.detected_class,
            geometric_cov: Matrix2::new(g[0], g[1], g[2], g[3]),
            t: self.t,
            k: self.k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub num_landmarks: usize,
    pub stats: Option<OptStats>,
    pub gpda_rounds: usize,
}

/// Final interpretation of one detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Association {
    New(usize),
    Existing(usize),
    Null,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub t: usize,
    pub k: usize,
    pub true_landmark: Option<usize>,
    pub outcome: Association,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkEstimate {
    pub id: usize,
    pub position: Point2,
    pub class: usize,
    pub belief: ClassBelief,
    pub owner: Option<usize>,
    pub observations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: MethodKind,
    pub trajectory: Vec<Pose2>,
    pub landmarks: Vec<LandmarkEstimate>,
    pub associations: Vec<AssociationRecord>,
    pub measurements: Vec<MeasurementLog>,
    pub steps: Vec<StepLog>,
    pub final_error: f64,
}

/// Graph, estimate, map and logs of one run.
#[derive(Clone, Debug)]
pub struct SlamState {
    method: MethodKind,
    config: SlamConfig,
    graph: FactorGraph,
    values: Values,
    landmarks: Vec<LandmarkInfo>,
    known: BTreeMap<usize, usize>,
    measurements: Vec<MeasurementLog>,
    steps: Vec<StepLog>,
    pending: usize,
}

impl SlamState {
    pub fn new(method: MethodKind, config: SlamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            method,
            config,
            graph: FactorGraph::new(),
            values: Values::new(),
            landmarks: Vec::new(),
            known: BTreeMap::new(),
            measurements: Vec::new(),
            steps: Vec::new(),
            pending: 0,
        })
    }

    pub fn method(&self) -> MethodKind {
        self.method
    }

    pub fn config(&self) -> &SlamConfig {
        &self.config
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn landmarks(&self) -> &[LandmarkInfo] {
        &self.landmarks
    }

    pub fn measurements(&self) -> &[MeasurementLog] {
        &self.measurements
    }

    pub fn steps(&self) -> &[StepLog] {
        &self.steps
    }

    pub fn num_poses(&self) -> usize {
        self.values.poses().count()
    }

    fn association_config(&self) -> AssociationConfig {
        AssociationConfig {
            gate_confidence: self.config.gate_confidence,
            null_weight: match self.method {
                MethodKind::MaxMixtureNull => self.config.null_weight,
                _ => 0.0,
            },
            confusion: self.config.confusion.clone(),
        }
    }

    /// Processes one keyframe.
    pub fn step(&mut self, keyframe: &Keyframe) -> Result<()> {
        let t = keyframe.t;
        let expected = self.num_poses();
        if t != expected {
            return Err(SlamError::Domain(format!(
                "expected keyframe {expected}, got {t}"
            )));
        }
        match (t, &keyframe.odometry) {
            (0, None) => {
                let anchor = keyframe.true_pose.unwrap_or_default();
                self.values.insert_pose(0, anchor);
                self.graph
                    .add(PriorPose2Factor::new(0, anchor, &self.config.prior_cov())?);
            }
            (0, Some(_)) => {
                return Err(SlamError::Domain(
                    "the first keyframe cannot carry odometry".into(),
                ))
            }
            (_, None) => {
                return Err(SlamError::Domain(format!("keyframe {t} has no odometry")));
            }
            (_, Some(odo)) => {
                let prev = self.values.pose(t - 1)?;
                self.values.insert_pose(t, prev.compose(&odo.delta));
                self.graph
                    .add(BetweenPose2Factor::new(t - 1, t, odo.delta, &odo.cov)?);
            }
        }

        let pose = self.values.pose(t)?;
        let snapshot = if keyframe.detections.is_empty() {
            Vec::new()
        } else {
            self.snapshot(t)?
        };
        let assoc = self.association_config();
        for (k, z) in keyframe.detections.iter().enumerate() {
            if z.detected_class >= self.config.confusion.classes() {
                return Err(SlamError::Domain(format!(
                    "detected class {} out of range",
                    z.detected_class
                )));
            }
            let truth = keyframe.true_landmarks.get(k).copied().flatten();
            let hypotheses = compute_hypotheses(z, &pose, &snapshot, &assoc)?;
            let commitment = self.commit(t, z, truth, &hypotheses)?;
            let g = &z.geometric_cov;
            self.measurements.push(MeasurementLog {
                t,
                k,
                range: z.range,
                bearing: z.bearing,
                gamma: [g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)]],
                detected_class: z.detected_class,
                true_landmark: truth,
                hypotheses,
                commitment,
            });
        }

        self.pending += 1;
        let mut log = StepLog {
            t,
            num_landmarks: self.landmarks.len(),
            stats: None,
            gpda_rounds: 0,
        };
        if self.pending >= self.config.optimize_every {
            let (stats, rounds) = self.reoptimize()?;
            log.stats = Some(stats);
            log.gpda_rounds = rounds;
        }
        self.steps.push(log);
        Ok(())
    }

    /// Optimizes any keyframes added since the last optimization.
    pub fn finish(&mut self) -> Result<()> {
        if self.pending > 0 {
            let (stats, rounds) = self.reoptimize()?;
            if let Some(last) = self.steps.last_mut() {
                last.stats = Some(stats);
                last.gpda_rounds = rounds;
            }
        }
        Ok(())
    }

    fn reoptimize(&mut self) -> Result<(OptStats, usize)> {
        let (values, stats) = optimize(&self.graph, &self.values, &self.config.optimizer)?;
        self.values = values;
        self.pending = 0;
        let rounds = if self.method == MethodKind::Gpda {
            self.gpda_refine()?
        } else {
            0
        };
        Ok((stats, rounds))
    }

    /// Every mapped landmark with its joint covariance against pose `t`.
    fn snapshot(&self, t: usize) -> Result<Vec<LandmarkCandidate>> {
        if self.landmarks.is_empty() {
            return Ok(Vec::new());
        }
        let ids: Vec<VariableId> = (0..self.landmarks.len())
            .map(VariableId::landmark)
            .collect();
        let solver = MarginalSolver::new(&self.graph, &self.values)?;
        let blocks = solver.paired(VariableId::pose(t), &ids)?;
        blocks
            .into_iter()
            .enumerate()
            .map(|(j, block)| {
                Ok(LandmarkCandidate {
                    landmark: j,
                    position: self.values.point(j)?,
                    belief: self.landmarks[j].belief.clone(),
                    joint_cov: Matrix5::from_iterator(block.iter().copied()),
                })
            })
            .collect()
    }

    fn commit(
        &mut self,
        t: usize,
        z: &SemanticMeasurement,
        truth: Option<usize>,
        hyp: &HypothesisSet,
    ) -> Result<Commitment> {
        match self.method {
            MethodKind::KnownDA => {
                let truth = truth.ok_or_else(|| {
                    SlamError::Domain("known association requires true landmark ids".into())
                })?;
                match self.known.get(&truth) {
                    Some(&j) => self.plain(t, z, j),
                    None => self.create(t, z, Some(truth)),
                }
            }
            _ if hyp.is_new_landmark => self.create(t, z, truth),
            MethodKind::MaxLikelihood => {
                let best = hyp.best().expect("non-empty hypothesis set");
                self.plain(t, z, best.landmark)
            }
            MethodKind::MaxMixture | MethodKind::MaxMixtureNull => self.mixture(t, z, hyp),
            MethodKind::Gpda => self.surrogate(t, z, hyp),
        }
    }

    fn create(
        &mut self,
        t: usize,
        z: &SemanticMeasurement,
        owner: Option<usize>,
    ) -> Result<Commitment> {
        let j = self.landmarks.len();
        let position = self.values.pose(t)?.project(z.range, z.bearing);
        self.values.insert_point(j, position);
        let factor = self.graph.add(RangeBearingFactor::new(
            t,
            j,
            z.geometric(),
            &z.geometric_cov,
        )?);
        let belief = update_class_belief(
            &ClassBelief::uniform(self.config.confusion.classes()),
            z.detected_class,
            &self.config.confusion,
            1.0,
        );
        self.landmarks.push(LandmarkInfo {
            belief,
            created_at: t,
            owner,
            observations: 1,
        });
        if self.method == MethodKind::KnownDA {
            if let Some(owner) = owner {
                self.known.insert(owner, j);
            }
        }
        Ok(Commitment::Created {
            landmark: j,
            factor,
        })
    }

    fn observe(&mut self, j: usize, detected_class: usize, weight: f64) {
        let info = &mut self.landmarks[j];
        info.belief =
            update_class_belief(&info.belief, detected_class, &self.config.confusion, weight);
    }

    fn plain(&mut self, t: usize, z: &SemanticMeasurement, j: usize) -> Result<Commitment> {
        let factor = self.graph.add(RangeBearingFactor::new(
            t,
            j,
            z.geometric(),
            &z.geometric_cov,
        )?);
        self.observe(j, z.detected_class, 1.0);
        self.landmarks[j].observations += 1;
        Ok(Commitment::Plain {
            landmark: j,
            factor,
        })
    }

    fn mixture(
        &mut self,
        t: usize,
        z: &SemanticMeasurement,
        hyp: &HypothesisSet,
    ) -> Result<Commitment> {
        let noise = NoiseModel::from_matrix2(&z.geometric_cov)?;
        let components = hyp
            .candidates
            .iter()
            .map(|c| MixtureComponent {
                landmark: c.landmark,
                weight: c.weight,
                noise: noise.clone(),
            })
            .collect();
        let null = if hyp.null_weight > 0.0 {
            Some(NullComponent::new(hyp.null_weight, self.config.null_sigma)?)
        } else {
            None
        };
        let factor = self
            .graph
            .add(Factor::SemanticMaxMixture(SemanticMaxMixtureFactor::new(
                t,
                z.geometric(),
                components,
                null,
            )?));
        for c in &hyp.candidates {
            self.observe(c.landmark, z.detected_class, c.weight);
        }
        if let Some(best) = hyp.best() {
            self.landmarks[best.landmark].observations += 1;
        }
        Ok(Commitment::Mixture { factor })
    }

    fn surrogate(
        &mut self,
        t: usize,
        z: &SemanticMeasurement,
        hyp: &HypothesisSet,
    ) -> Result<Commitment> {
        let mut landmarks = Vec::with_capacity(hyp.candidates.len());
        let mut factors = Vec::with_capacity(hyp.candidates.len());
        let mut weights = Vec::with_capacity(hyp.candidates.len());
        for c in &hyp.candidates {
            let factor = self
                .graph
                .add(surrogate_factor(t, c.landmark, z, c.weight)?);
            landmarks.push(c.landmark);
            factors.push(factor);
            weights.push(c.weight);
            self.observe(c.landmark, z.detected_class, c.weight);
        }
        if let Some(best) = hyp.best() {
            self.landmarks[best.landmark].observations += 1;
        }
        Ok(Commitment::Surrogate {
            landmarks,
            factors,
            weights,
        })
    }

    /// EM refinement of the weights of every multi-candidate surrogate
    /// measurement. Returns the number of rounds run.
    pub fn gpda_refine(&mut self) -> Result<usize> {
        let multi: Vec<usize> = self
            .measurements
            .iter()
            .enumerate()
            .filter(|(_, m)| {
                matches!(&m.commitment, Commitment::Surrogate { landmarks, .. } if landmarks.len() > 1)
            })
            .map(|(i, _)| i)
            .collect();
        if multi.is_empty() {
            return Ok(1);
        }
        let mut rounds = 0;
        while rounds < self.config.gpda_max_rounds {
            rounds += 1;
            let change = self.gpda_expectation(&multi)?;
            if change < self.config.gpda_weight_tol {
                break;
            }
            let (values, _) = optimize(&self.graph, &self.values, &self.config.optimizer)?;
            self.values = values;
        }
        Ok(rounds)
    }

    /// Recomputes surrogate weights at the current estimate and rebuilds the
    /// factors. Returns the largest weight change.
    fn gpda_expectation(&mut self, multi: &[usize]) -> Result<f64> {
        let solver = MarginalSolver::new(&self.graph, &self.values)?;
        let mut max_change: f64 = 0.0;
        let mut updates = Vec::with_capacity(multi.len());
        for &i in multi {
            let m = &self.measurements[i];
            let Commitment::Surrogate {
                landmarks, weights, ..
            } = &m.commitment
            else {
                unreachable!("filtered to surrogate commitments")
            };
            let z = m.measurement();
            let pose = self.values.pose(m.t)?;
            let ids: Vec<VariableId> = landmarks.iter().map(|&j| VariableId::landmark(j)).collect();
            let blocks = solver.paired(VariableId::pose(m.t), &ids)?;
            let mut scores = Vec::with_capacity(landmarks.len());
            for (&j, block) in landmarks.iter().zip(blocks) {
                let cand = LandmarkCandidate {
                    landmark: j,
                    position: self.values.point(j)?,
                    belief: self.landmarks[j].belief.clone(),
                    joint_cov: Matrix5::from_iterator(block.iter().copied()),
                };
                if let Some(s) =
                    score_candidate(&z, &pose, &cand, &self.config.confusion, f64::INFINITY)
                {
                    scores.push(s);
                }
            }
            let normalized = normalize_scores(&scores, 0.0);
            let new_weights: Vec<f64> = landmarks
                .iter()
                .map(|j| {
                    normalized
                        .iter()
                        .find(|c| c.landmark == *j)
                        .map_or(0.0, |c| c.weight)
                })
                .collect();
            for (a, b) in weights.iter().zip(&new_weights) {
                max_change = max_change.max((a - b).abs());
            }
            updates.push((i, z, new_weights));
        }

        for (i, z, new_weights) in updates {
            let Commitment::Surrogate {
                landmarks,
                factors,
                weights,
            } = &mut self.measurements[i].commitment
            else {
                unreachable!("filtered to surrogate commitments")
            };
            for ((j, f), w) in landmarks.iter().zip(factors.iter()).zip(&new_weights) {
                self.graph.replace(*f, surrogate_factor(z.t, *j, &z, *w)?);
            }
            *weights = new_weights;
        }
        Ok(max_change)
    }

    /// Interpretation of every detection at the current estimate.
    pub fn final_associations(&self) -> Result<Vec<AssociationRecord>> {
        self.measurements
            .iter()
            .map(|m| {
                let outcome = match &m.commitment {
                    Commitment::Created { landmark, .. } => Association::New(*landmark),
                    Commitment::Plain { landmark, .. } => Association::Existing(*landmark),
                    Commitment::Mixture { factor } => {
                        let Some(Factor::SemanticMaxMixture(f)) = self.graph.get(*factor) else {
                            unreachable!("mixture commitment points at a mixture factor")
                        };
                        match f.selected_landmark(&self.values)? {
                            Some(j) => Association::Existing(j),
                            None => Association::Null,
                        }
                    }
                    Commitment::Surrogate {
                        landmarks, weights, ..
                    } => {
                        let mut best = 0;
                        for (i, w) in weights.iter().enumerate() {
                            if *w > weights[best] {
                                best = i;
                            }
                        }
                        Association::Existing(landmarks[best])
                    }
                };
                Ok(AssociationRecord {
                    t: m.t,
                    k: m.k,
                    true_landmark: m.true_landmark,
                    outcome,
                })
            })
            .collect()
    }

    pub fn result(&self) -> Result<RunResult> {
        let trajectory = self.values.poses().map(|(_, p)| p).collect();
        let landmarks = self
            .landmarks
            .iter()
            .enumerate()
            .map(|(j, info)| {
                Ok(LandmarkEstimate {
                    id: j,
                    position: self.values.point(j)?,
                    class: map_class(&info.belief),
                    belief: info.belief.clone(),
                    owner: info.owner,
                    observations: info.observations,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RunResult {
            method: self.method,
            trajectory,
            landmarks,
            associations: self.final_associations()?,
            measurements: self.measurements.clone(),
            steps: self.steps.clone(),
            final_error: self.graph.error(&self.values)?,
        })
    }
}

/// Range-bearing factor with covariance `gamma / w`.
fn surrogate_factor(
    t: usize,
    landmark: usize,
    z: &SemanticMeasurement,
    weight: f64,
) -> Result<RangeBearingFactor> {
    let w = weight.max(MIN_SURROGATE_WEIGHT);
    RangeBearingFactor::new(t, landmark, z.geometric(), &(z.geometric_cov / w))
}

/// Runs `method` over every keyframe of `dataset`.
pub fn run(dataset: &Dataset, method: MethodKind, config: &SlamConfig) -> Result<RunResult> {
    let mut state = SlamState::new(method, config.clone())?;
    for keyframe in dataset.keyframes()? {
        let t = keyframe.t;
        state.step(&keyframe).map_err(|e| SlamError::Step {
            step: t,
            source: Box::new(e),
        })?;
    }
    state.finish()?;
    state.result()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalio::{
        trajectory_error, Alignment, DatasetHeader, DetectionRecord, OdometryRecord,
    };
    use crate::geometry::range_bearing;
    use crate::simulator::{aliasing_scenario, generate, AliasingConfig, SimConfig};

    fn small_world(seed: u64, odom_scale: f64, misclass_rate: f64) -> (SimConfig, Dataset) {
        let c = SimConfig {
            seed,
            num_landmarks: 15,
            laps: 1,
            odom_scale,
            misclass_rate,
            ..SimConfig::default()
        };
        let (_, data) = generate(&c).unwrap();
        (c, data)
    }

    fn config_for(d: &Dataset) -> SlamConfig {
        SlamConfig::new(d.header.as_ref().unwrap().confusion.clone())
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodKind::ALL {
            assert_eq!(m.name().parse::<MethodKind>().unwrap(), m);
        }
        assert!("mmnh".parse::<MethodKind>().is_err());
    }

    #[test]
    fn first_detection_creates_a_landmark_at_the_projection() {
        let confusion = ConfusionMatrix::symmetric(2, 0.1).unwrap();
        let mut state =
            SlamState::new(MethodKind::MaxMixtureNull, SlamConfig::new(confusion)).unwrap();
        let pose = Pose2::new(1.0, 2.0, 0.5);
        let z = SemanticMeasurement {
            range: 4.0,
            bearing: -0.3,
            detected_class: 1,
            geometric_cov: Matrix2::new(0.01, 0.0, 0.0, 0.001),
            t: 0,
            k: 0,
        };
        let frame = Keyframe {
            t: 0,
            odometry: None,
            detections: vec![z],
            true_pose: Some(pose),
            true_landmarks: vec![None],
        };
        state.step(&frame).unwrap();
        assert_eq!(state.landmarks().len(), 1);
        assert!(state.measurements()[0].hypotheses.is_new_landmark);
        let expected = pose.project(4.0, -0.3);
        assert!(state.values().point(0).unwrap().distance(&expected) < 1e-9);
        // uniform prior updated once with the creating detection
        assert!((state.landmarks()[0].belief.probs()[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn keyframes_must_arrive_in_order() {
        let confusion = ConfusionMatrix::symmetric(2, 0.1).unwrap();
        let mut state =
            SlamState::new(MethodKind::MaxLikelihood, SlamConfig::new(confusion)).unwrap();
        let frame = |t| Keyframe {
            t,
            odometry: None,
            detections: vec![],
            true_pose: None,
            true_landmarks: vec![],
        };
        assert!(state.step(&frame(1)).is_err());
        state.step(&frame(0)).unwrap();
        // keyframe 1 without odometry
        assert!(state.step(&frame(1)).is_err());
    }

    #[test]
    fn zero_noise_is_exact_for_every_method() {
        let c = SimConfig {
            num_landmarks: 15,
            laps: 1,
            odom_scale: 0.0,
            gamma: [1e-12, 0.0, 0.0, 1e-12],
            detection_noise: false,
            ..SimConfig::default()
        };
        let (_, data) = generate(&c).unwrap();
        let reference = data.reference_trajectory().unwrap();
        for m in MethodKind::ALL {
            let r = run(&data, m, &config_for(&data)).unwrap();
            let (t, _) = trajectory_error(&r.trajectory, &reference, Alignment::Origin).unwrap();
            assert!(t.max < 1e-6, "{m}: {}", t.max);
            let scores = crate::evalio::association_scores(&r);
            assert_eq!(scores.correct, scores.total, "{m}");
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (_, data) = small_world(2, 3.0, 0.2);
        for m in [
            MethodKind::MaxLikelihood,
            MethodKind::MaxMixtureNull,
            MethodKind::Gpda,
        ] {
            let a = run(&data, m, &config_for(&data)).unwrap();
            let b = run(&data, m, &config_for(&data)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn landmark_count_grows_and_every_landmark_is_observed() {
        let (_, data) = small_world(3, 3.0, 0.2);
        let r = run(&data, MethodKind::MaxMixtureNull, &config_for(&data)).unwrap();
        for w in r.steps.windows(2) {
            assert!(w[0].num_landmarks <= w[1].num_landmarks);
        }
        let created: Vec<usize> = r
            .measurements
            .iter()
            .filter_map(|m| match m.commitment {
                Commitment::Created { landmark, .. } => Some(landmark),
                _ => None,
            })
            .collect();
        assert_eq!(created, (0..r.landmarks.len()).collect::<Vec<_>>());
    }

    #[test]
    fn mixture_weights_stay_frozen() {
        let (_, data) = small_world(4, 3.0, 0.3);
        let mut state = SlamState::new(MethodKind::MaxMixtureNull, config_for(&data)).unwrap();
        let mut mixtures = 0;
        for frame in data.keyframes().unwrap() {
            state.step(&frame).unwrap();
            for m in state.measurements() {
                let Commitment::Mixture { factor } = m.commitment else {
                    continue;
                };
                let Some(Factor::SemanticMaxMixture(f)) = state.graph().get(factor) else {
                    panic!("mixture commitment without a mixture factor");
                };
                let mut expected: Vec<f64> =
                    m.hypotheses.candidates.iter().map(|c| c.weight).collect();
                expected.push(m.hypotheses.null_weight);
                assert_eq!(f.weights(), expected);
            }
        }
        for m in state.measurements() {
            if matches!(m.commitment, Commitment::Mixture { .. }) {
                mixtures += 1;
            }
        }
        assert!(mixtures > 0);
    }

    #[test]
    fn zero_null_weight_reduces_to_plain_mixtures() {
        let (_, data) = small_world(5, 3.0, 0.3);
        let mm = run(&data, MethodKind::MaxMixture, &config_for(&data)).unwrap();
        let config = SlamConfig {
            null_weight: 0.0,
            ..config_for(&data)
        };
        let nh = run(&data, MethodKind::MaxMixtureNull, &config).unwrap();
        assert_eq!(mm.trajectory, nh.trajectory);
        assert_eq!(mm.associations, nh.associations);
        assert_eq!(mm.final_error, nh.final_error);
    }

    #[test]
    fn singleton_mixtures_match_maximum_likelihood() {
        let c = SimConfig {
            seed: 6,
            num_landmarks: 10,
            laps: 1,
            odom_scale: 1.0,
            detection_noise: false,
            ..SimConfig::default()
        };
        let (_, data) = generate(&c).unwrap();
        let mm = run(&data, MethodKind::MaxMixture, &config_for(&data)).unwrap();
        assert!(mm
            .measurements
            .iter()
            .all(|m| m.hypotheses.candidates.len() <= 1));
        let ml = run(&data, MethodKind::MaxLikelihood, &config_for(&data)).unwrap();
        assert_eq!(mm.trajectory, ml.trajectory);
        assert_eq!(mm.associations, ml.associations);
    }

    #[test]
    fn singleton_gpda_matches_known_association() {
        let c = SimConfig {
            seed: 6,
            num_landmarks: 10,
            laps: 1,
            odom_scale: 1.0,
            detection_noise: false,
            ..SimConfig::default()
        };
        let (_, data) = generate(&c).unwrap();
        let gpda = run(&data, MethodKind::Gpda, &config_for(&data)).unwrap();
        assert!(gpda.steps.iter().all(|s| s.gpda_rounds == 1));
        let known = run(&data, MethodKind::KnownDA, &config_for(&data)).unwrap();
        assert_eq!(gpda.trajectory, known.trajectory);
    }

    /// Two landmarks mirrored about the x axis, then a loosely constrained
    /// second pose that sees a single detection straight ahead.
    fn mirrored_pair() -> Dataset {
        let gamma = Matrix2::new(0.01, 0.0, 0.0, 0.01);
        let mut d = Dataset {
            header: Some(DatasetHeader {
                confusion: ConfusionMatrix::symmetric(2, 0.1).unwrap(),
                gamma,
            }),
            ..Default::default()
        };
        for (k, y) in [0.5, -0.5].into_iter().enumerate() {
            let rb = range_bearing(&Pose2::identity(), &Point2::new(5.0, y)).unwrap();
            d.detections.push(DetectionRecord {
                t: 0,
                k,
                range: rb.range,
                bearing: rb.bearing,
                class: 0,
                true_landmark: None,
            });
        }
        d.odometry.push(OdometryRecord {
            t: 1,
            delta: Pose2::identity(),
            cov: Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, 1e-6)),
        });
        d.detections.push(DetectionRecord {
            t: 1,
            k: 0,
            range: 5.0,
            bearing: 0.0,
            class: 0,
            true_landmark: None,
        });
        d
    }

    #[test]
    fn gpda_settles_between_equal_hypotheses() {
        let data = mirrored_pair();
        let gpda = run(&data, MethodKind::Gpda, &config_for(&data)).unwrap();
        let Commitment::Surrogate { weights, .. } = &gpda.measurements[2].commitment else {
            panic!("expected surrogate factors");
        };
        assert_eq!(weights.len(), 2);
        assert!((weights[0] - 0.5).abs() < 1e-6);
        assert!(gpda.trajectory[1].y.abs() < 1e-6);

        let ml = run(&data, MethodKind::MaxLikelihood, &config_for(&data)).unwrap();
        // ties go to the first landmark, which then drags the pose toward it
        assert!(ml.trajectory[1].y > 0.2);
    }

    #[test]
    fn gpda_expectation_is_idempotent_at_a_fixed_point() {
        let (_, data) = small_world(7, 4.0, 0.3);
        let config = SlamConfig {
            gpda_weight_tol: 1e-9,
            gpda_max_rounds: 200,
            optimizer: OptimizerConfig {
                relative_decrease_tol: 1e-14,
                absolute_error_tol: 0.0,
                ..OptimizerConfig::default()
            },
            ..config_for(&data)
        };
        let mut state = SlamState::new(MethodKind::Gpda, config).unwrap();
        for frame in data.keyframes().unwrap() {
            state.step(&frame).unwrap();
        }
        let last = state.steps().last().unwrap();
        assert!(last.gpda_rounds < 200);
        let multi: Vec<usize> = state
            .measurements()
            .iter()
            .enumerate()
            .filter(|(_, m)| {
                matches!(&m.commitment, Commitment::Surrogate { landmarks, .. } if landmarks.len() > 1)
            })
            .map(|(i, _)| i)
            .collect();
        assert!(!multi.is_empty());
        assert!(state.gpda_expectation(&multi).unwrap() < 1e-8);
    }

    #[test]
    fn mixture_switches_to_the_original_landmark() {
        let config = AliasingConfig {
            odom_noise: [0.0; 3],
            detection_noise_scale: 0.0,
            ..AliasingConfig::default()
        };
        let scenario = aliasing_scenario(0, &config).unwrap();
        let data = &scenario.dataset;
        let (t, k) = scenario.aliased;
        let r = run(data, MethodKind::MaxMixtureNull, &config_for(data)).unwrap();
        let log = r
            .measurements
            .iter()
            .find(|m| m.t == t && m.k == k)
            .unwrap();
        // at insertion the decoy looks more likely than the true landmark
        assert_eq!(log.hypotheses.best().unwrap().landmark, scenario.decoy);
        let record = r
            .associations
            .iter()
            .find(|a| a.t == t && a.k == k)
            .unwrap();
        assert_eq!(record.outcome, Association::Existing(0));
    }
}
