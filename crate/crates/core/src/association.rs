//! Data-association weights from fused semantic and geometric likelihoods.
//!
//! Each detection is scored against every mapped landmark using the product
//! of a semantic term (class belief pushed through the confusion matrix) and
//! a geometric term (Gaussian density of the innovation under the joint
//! pose-landmark marginal). Candidates outside the chi-square gate are
//! dropped and the survivors are normalized, optionally leaving a fixed share
//! of probability for the null hypothesis.

use nalgebra::{Matrix2, Matrix5, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::factor_graph::RangeBearingMeasurement;
use crate::geometry::{chi2_quantile, range_bearing, Point2, Pose2};

const STOCHASTIC_TOL: f64 = 1e-9;

/// Row-stochastic classifier confusion matrix; entry `(i, k)` is the
/// probability that a landmark of true class `i` is detected as class `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    entries: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, row_major: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(SlamError::Domain(format!(
                "confusion matrix needs at least 2 classes, got {classes}"
            )));
        }
        if row_major.len() != classes * classes {
            return Err(SlamError::Domain(format!(
                "confusion matrix for {classes} classes needs {} entries, got {}",
                classes * classes,
                row_major.len()
            )));
        }
        for (i, row) in row_major.chunks(classes).enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(SlamError::Domain(format!(
                    "confusion row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(SlamError::Domain(format!(
                    "confusion row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self {
            classes,
            entries: row_major,
        })
    }

    /// `1 - alpha` on the diagonal, `alpha / (C - 1)` elsewhere.
    pub fn symmetric(classes: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(SlamError::Domain(format!(
                "misclassification rate must lie in [0, 1], got {alpha}"
            )));
        }
        let off = if classes > 1 {
            alpha / (classes - 1) as f64
        } else {
            0.0
        };
        let entries = (0..classes * classes)
            .map(|n| {
                if n / classes == n % classes {
                    1.0 - alpha
                } else {
                    off
                }
            })
            .collect();
        Self::new(classes, entries)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// P(detected | true).
    pub fn prob(&self, true_class: usize, detected: usize) -> f64 {
        self.entries[true_class * self.classes + detected]
    }

    pub fn row(&self, true_class: usize) -> &[f64] {
        &self.entries[true_class * self.classes..(true_class + 1) * self.classes]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Categorical belief over a landmark's class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBelief {
    probs: Vec<f64>,
}

impl ClassBelief {
    pub fn uniform(classes: usize) -> Self {
        Self {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL
        {
            return Err(SlamError::Domain(format!(
                "class belief must be a probability vector, got {probs:?}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemanticMeasurement {
    pub range: f64,
    pub bearing: f64,
    pub detected_class: usize,
    pub geometric_cov: Matrix2<f64>,
    pub t: usize,
    pub k: usize,
}

impl SemanticMeasurement {
    pub fn geometric(&self) -> RangeBearingMeasurement {
        RangeBearingMeasurement::new(self.range, self.bearing)
    }
}

/// `sum_c P(detected | c) P(c)`.
pub fn semantic_likelihood(
    detected_class: usize,
    belief: &ClassBelief,
    confusion: &ConfusionMatrix,
) -> f64 {
    belief
        .probs
        .iter()
        .enumerate()
        .map(|(c, p)| confusion.prob(c, detected_class) * p)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricLikelihood {
    pub likelihood: f64,
    pub log_likelihood: f64,
    pub mahalanobis_sq: f64,
    /// Innovation covariance `H Sigma H^T + Gamma`.
    pub innovation_cov: Matrix2<f64>,
}

/// Marginal likelihood of a range-bearing measurement given the joint
/// Gaussian over `[pose tangent (3), landmark (2)]`.
pub fn geometric_likelihood(
    z: &RangeBearingMeasurement,
    pose: &Pose2,
    landmark: &Point2,
    joint_cov: &Matrix5<f64>,
    gamma: &Matrix2<f64>,
) -> Result<GeometricLikelihood> {
    let rb = range_bearing(pose, landmark)?;
    let r = z.residual(rb.range, rb.bearing);
    let h = rb.stacked_jacobian();
    let innovation_cov = h * joint_cov * h.transpose() + gamma;
    let chol = innovation_cov
        .cholesky()
        .ok_or(SlamError::NotPositiveDefinite)?;
    let whitened: Vector2<f64> = chol
        .l()
        .solve_lower_triangular(&r)
        .ok_or(SlamError::NotPositiveDefinite)?;
    let mahalanobis_sq = whitened.norm_squared();
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_likelihood = -0.5 * mahalanobis_sq - 0.5 * (2.0 * std::f64::consts::TAU.ln() + log_det);
    Ok(GeometricLikelihood {
        likelihood: log_likelihood.exp(),
        log_likelihood,
        mahalanobis_sq,
        innovation_cov,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    pub gate_confidence: f64,
    /// Probability reserved for the null hypothesis; 0 disables it.
    pub null_weight: f64,
    pub confusion: ConfusionMatrix,
}

impl AssociationConfig {
    pub fn new(confusion: ConfusionMatrix) -> Self {
        Self {
            gate_confidence: 0.9,
            null_weight: 0.1,
            confusion,
        }
    }

    pub fn gate(&self) -> Result<f64> {
        chi2_quantile(self.gate_confidence, 2)
    }
}

/// A mapped landmark as seen by the association step.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkCandidate {
    pub landmark: usize,
    pub position: Point2,
    pub belief: ClassBelief,
    /// Joint covariance of `[pose tangent, landmark]`.
    pub joint_cov: Matrix5<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub landmark: usize,
    pub semantic: f64,
    pub log_geometric: f64,
    pub mahalanobis_sq: f64,
    pub gated_in: bool,
}

impl CandidateScore {
    pub fn log_likelihood(&self) -> f64 {
        self.semantic.ln() + self.log_geometric
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedCandidate {
    pub landmark: usize,
    pub weight: f64,
}

/// Candidate associations for one measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    /// Surviving candidates, sorted by landmark id.
    pub candidates: Vec<WeightedCandidate>,
    pub null_weight: f64,
    pub is_new_landmark: bool,
    /// Every evaluated landmark, gated in or not.
    pub scores: Vec<CandidateScore>,
}

impl HypothesisSet {
    pub fn new_landmark(scores: Vec<CandidateScore>) -> Self {
        Self {
            candidates: Vec::new(),
            null_weight: 0.0,
            is_new_landmark: true,
            scores,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.null_weight + self.candidates.iter().map(|c| c.weight).sum::<f64>()
    }

    /// Highest-weight candidate; ties go to the lowest landmark id.
    pub fn best(&self) -> Option<WeightedCandidate> {
        let mut best: Option<WeightedCandidate> = None;
        for c in &self.candidates {
            if best.is_none_or(|b| c.weight > b.weight) {
                best = Some(*c);
            }
        }
        best
    }

    pub fn weight_of(&self, landmark: usize) -> Option<f64> {
        self.candidates
            .iter()
            .find(|c| c.landmark == landmark)
            .map(|c| c.weight)
    }
}

/// Scores one landmark against a measurement. `None` when the likelihood is
/// undefined (measurement taken from on top of the landmark estimate).
pub fn score_candidate(
    z: &SemanticMeasurement,
    pose: &Pose2,
    candidate: &LandmarkCandidate,
    confusion: &ConfusionMatrix,
    gate: f64,
) -> Option<CandidateScore> {
    let semantic = semantic_likelihood(z.detected_class, &candidate.belief, confusion);
    let geo = geometric_likelihood(
        &z.geometric(),
        pose,
        &candidate.position,
        &candidate.joint_cov,
        &z.geometric_cov,
    )
    .ok()?;
    Some(CandidateScore {
        landmark: candidate.landmark,
        semantic,
        log_geometric: geo.log_likelihood,
        mahalanobis_sq: geo.mahalanobis_sq,
        gated_in: geo.mahalanobis_sq <= gate,
    })
}

/// Normalizes the scores of the given candidates so they sum to
/// `1 - null_weight`. Candidates whose weight is zero (or underflows) are
/// dropped.
pub fn normalize_scores(scores: &[CandidateScore], null_weight: f64) -> Vec<WeightedCandidate> {
    let mut kept: Vec<(usize, f64)> = scores
        .iter()
        .filter(|s| s.semantic > 0.0 && s.log_geometric.is_finite())
        .map(|s| (s.landmark, s.log_likelihood()))
        .collect();
    kept.sort_by_key(|(j, _)| *j);
    if kept.is_empty() {
        return Vec::new();
    }
    let max = kept
        .iter()
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = kept.iter().map(|(_, l)| (l - max).exp()).sum();
    kept.into_iter()
        .map(|(landmark, l)| WeightedCandidate {
            landmark,
            weight: (1.0 - null_weight) * (l - max).exp() / total,
        })
        .filter(|c| c.weight > 0.0)
        .collect()
}

/// Gated, normalized association hypotheses for one measurement.
pub fn compute_hypotheses(
    z: &SemanticMeasurement,
    pose: &Pose2,
    landmarks: &[LandmarkCandidate],
    config: &AssociationConfig,
) -> Result<HypothesisSet> {
    if !(0.0..1.0).contains(&config.null_weight) {
        return Err(SlamError::Domain(format!(
            "null weight must lie in [0, 1), got {}",
            config.null_weight
        )));
    }
    let gate = config.gate()?;
    let scores: Vec<CandidateScore> = landmarks
        .iter()
        .filter_map(|c| score_candidate(z, pose, c, &config.confusion, gate))
        .collect();
    let gated: Vec<CandidateScore> = scores.iter().copied().filter(|s| s.gated_in).collect();
    let candidates = normalize_scores(&gated, config.null_weight);
    if candidates.is_empty() {
        return Ok(HypothesisSet::new_landmark(scores));
    }
    Ok(HypothesisSet {
        candidates,
        null_weight: config.null_weight,
        is_new_landmark: false,
        scores,
    })
}

/// Soft Bayes update: `p(c) * (w * P(detected | c) + 1 - w)`, normalized.
pub fn update_class_belief(
    belief: &ClassBelief,
    detected_class: usize,
    confusion: &ConfusionMatrix,
    weight: f64,
) -> ClassBelief {
    let w = weight.clamp(0.0, 1.0);
    let unnorm: Vec<f64> = belief
        .probs
        .iter()
        .enumerate()
        .map(|(c, p)| p * (w * confusion.prob(c, detected_class) + (1.0 - w)))
        .collect();
    let total: f64 = unnorm.iter().sum();
    if !(total > 0.0) {
        return belief.clone();
    }
    ClassBelief {
        probs: unnorm.into_iter().map(|p| p / total).collect(),
    }
}

/// Most probable class; ties go to the lowest index.
pub fn map_class(belief: &ClassBelief) -> usize {
    let mut best = 0;
    for (c, p) in belief.probs.iter().enumerate() {
        if *p > belief.probs[best] {
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn binary(alpha: f64) -> ConfusionMatrix {
        ConfusionMatrix::symmetric(2, alpha).unwrap()
    }

    #[test]
    fn confusion_validation() {
        assert!(ConfusionMatrix::new(1, vec![1.0]).is_err());
        assert!(ConfusionMatrix::new(2, vec![0.9, 0.2, 0.1, 0.9]).is_err());
        assert!(ConfusionMatrix::new(2, vec![1.1, -0.1, 0.1, 0.9]).is_err());
        let c = ConfusionMatrix::symmetric(4, 0.3).unwrap();
        assert!((c.prob(1, 1) - 0.7).abs() < 1e-15);
        assert!((c.prob(1, 2) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn semantic_likelihood_examples() {
        let c = binary(0.1);
        let uniform = ClassBelief::uniform(2);
        assert!((semantic_likelihood(0, &uniform, &c) - 0.5).abs() < 1e-15);
        assert!((semantic_likelihood(1, &uniform, &c) - 0.5).abs() < 1e-15);
        let certain = ClassBelief::new(vec![1.0, 0.0]).unwrap();
        assert!((semantic_likelihood(0, &certain, &c) - 0.9).abs() < 1e-15);
        let skew = ClassBelief::new(vec![0.8, 0.2]).unwrap();
        assert!((semantic_likelihood(0, &skew, &c) - 0.74).abs() < 1e-15);
    }

    #[test]
    fn geometric_likelihood_closed_forms() {
        let pose = Pose2::identity();
        let lm = Point2::new(4.0, 0.0);
        let zero = Matrix5::zeros();
        let i2 = Matrix2::identity();

        let g = geometric_likelihood(
            &RangeBearingMeasurement::new(4.0, 0.0),
            &pose,
            &lm,
            &zero,
            &i2,
        )
        .unwrap();
        assert!(g.mahalanobis_sq.abs() < 1e-15);
        assert!((g.likelihood - 1.0 / TAU).abs() < 1e-12);
        assert!((g.likelihood - 0.15915).abs() < 1e-5);

        let g = geometric_likelihood(
            &RangeBearingMeasurement::new(3.0, 0.0),
            &pose,
            &lm,
            &zero,
            &i2,
        )
        .unwrap();
        assert!((g.mahalanobis_sq - 1.0).abs() < 1e-12);
        assert!((g.likelihood - (-0.5f64).exp() / TAU).abs() < 1e-12);
    }

    fn candidate(landmark: usize, position: Point2, belief: ClassBelief) -> LandmarkCandidate {
        LandmarkCandidate {
            landmark,
            position,
            belief,
            joint_cov: Matrix5::identity() * 1e-4,
        }
    }

    fn measurement(range: f64, bearing: f64, class: usize) -> SemanticMeasurement {
        SemanticMeasurement {
            range,
            bearing,
            detected_class: class,
            geometric_cov: Matrix2::new(0.01, 0.0, 0.0, 0.0004),
            t: 0,
            k: 0,
        }
    }

    #[test]
    fn single_candidate_gets_remaining_mass() {
        let cfg = AssociationConfig::new(binary(0.1));
        let z = measurement(5.0, 0.0, 0);
        let lms = [candidate(7, Point2::new(5.0, 0.0), ClassBelief::uniform(2))];
        let h = compute_hypotheses(&z, &Pose2::identity(), &lms, &cfg).unwrap();
        assert!(!h.is_new_landmark);
        assert_eq!(h.candidates.len(), 1);
        assert_eq!(h.candidates[0].landmark, 7);
        assert!((h.candidates[0].weight - 0.9).abs() < 1e-12);
        assert!((h.null_weight - 0.1).abs() < 1e-15);
    }

    #[test]
    fn symmetric_candidates_split_evenly() {
        let cfg = AssociationConfig::new(binary(0.1));
        let z = measurement(5.0, 0.0, 0);
        // mirror images about the x axis at equal likelihood
        let lms = [
            candidate(0, Point2::new(5.0, 0.05), ClassBelief::uniform(2)),
            candidate(1, Point2::new(5.0, -0.05), ClassBelief::uniform(2)),
        ];
        let h = compute_hypotheses(&z, &Pose2::identity(), &lms, &cfg).unwrap();
        assert_eq!(h.candidates.len(), 2);
        for c in &h.candidates {
            assert!((c.weight - 0.45).abs() < 1e-9);
        }
    }

    #[test]
    fn far_candidates_trigger_new_landmark() {
        let cfg = AssociationConfig::new(binary(0.1));
        let z = measurement(5.0, 0.0, 0);
        // range residual 1 m at sigma 0.1 m -> mahalanobis ~ 100
        let lms = [
            candidate(0, Point2::new(6.0, 0.0), ClassBelief::uniform(2)),
            candidate(1, Point2::new(4.0, 0.0), ClassBelief::uniform(2)),
        ];
        let h = compute_hypotheses(&z, &Pose2::identity(), &lms, &cfg).unwrap();
        assert!(h.scores.iter().all(|s| s.mahalanobis_sq > 90.0));
        assert!(h.is_new_landmark);
        assert!(h.candidates.is_empty());

        let empty = compute_hypotheses(&z, &Pose2::identity(), &[], &cfg).unwrap();
        assert!(empty.is_new_landmark);
    }

    #[test]
    fn plain_mixture_normalizes_to_one() {
        let mut cfg = AssociationConfig::new(binary(0.1));
        cfg.null_weight = 0.0;
        let z = measurement(5.0, 0.0, 0);
        let lms = [
            candidate(0, Point2::new(5.0, 0.02), ClassBelief::uniform(2)),
            candidate(
                1,
                Point2::new(5.05, -0.01),
                ClassBelief::new(vec![0.2, 0.8]).unwrap(),
            ),
        ];
        let h = compute_hypotheses(&z, &Pose2::identity(), &lms, &cfg).unwrap();
        assert_eq!(h.null_weight, 0.0);
        assert!((h.total_weight() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_belief_updates() {
        let c = binary(0.1);
        let b = ClassBelief::uniform(2);
        assert_eq!(update_class_belief(&b, 0, &c, 0.0), b);
        let once = update_class_belief(&b, 0, &c, 1.0);
        assert!((once.probs()[0] - 0.9).abs() < 1e-15);
        let twice = update_class_belief(&once, 0, &c, 1.0);
        assert!((twice.probs()[0] - 0.81 / 0.82).abs() < 1e-15);
        assert!((twice.probs()[1] - 0.01 / 0.82).abs() < 1e-15);
    }

    #[test]
    fn map_class_examples() {
        assert_eq!(map_class(&ClassBelief::new(vec![0.9, 0.1]).unwrap()), 0);
        assert_eq!(map_class(&ClassBelief::new(vec![0.5, 0.5]).unwrap()), 0);
        assert_eq!(
            map_class(&ClassBelief::new(vec![0.2, 0.3, 0.5]).unwrap()),
            2
        );
        let c = binary(0.1);
        let mut b = ClassBelief::uniform(2);
        for _ in 0..10 {
            b = update_class_belief(&b, 0, &c, 1.0);
        }
        assert_eq!(map_class(&b), 0);
    }

    fn arb_belief(classes: usize) -> impl Strategy<Value = ClassBelief> {
        proptest::collection::vec(0.01..1.0f64, classes).prop_map(|v| {
            let s: f64 = v.iter().sum();
            ClassBelief::new(v.into_iter().map(|p| p / s).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn exact_update_is_bayes(b in arb_belief(3), alpha in 0.0..0.6f64, det in 0usize..3) {
            let c = ConfusionMatrix::symmetric(3, alpha).unwrap();
            let got = update_class_belief(&b, det, &c, 1.0);
            let joint: Vec<f64> = (0..3).map(|k| b.probs()[k] * c.prob(k, det)).collect();
            let evidence: f64 = joint.iter().sum();
            for k in 0..3 {
                prop_assert!((got.probs()[k] - joint[k] / evidence).abs() < 1e-12);
            }
            prop_assert!((got.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn weights_sum_to_one(
            offsets in proptest::collection::vec((-0.3..0.3f64, -0.3..0.3f64), 1..6),
            null in 0.0..0.5f64,
            det in 0usize..2,
        ) {
            let mut cfg = AssociationConfig::new(binary(0.2));
            cfg.null_weight = null;
            let lms: Vec<_> = offsets.iter().enumerate().map(|(j, (dx, dy))| {
                candidate(j, Point2::new(5.0 + dx, dy * 0.2), ClassBelief::uniform(2))
            }).collect();
            let h = compute_hypotheses(&measurement(5.0, 0.0, det), &Pose2::identity(), &lms, &cfg).unwrap();
            if !h.is_new_landmark {
                prop_assert!((h.total_weight() - 1.0).abs() < 1e-9);
                prop_assert!(h.candidates.iter().all(|c| c.weight > 0.0));
            }
        }

        #[test]
        fn enumeration_order_is_irrelevant(
            offsets in proptest::collection::vec((-0.2..0.2f64, -0.2..0.2f64), 2..6),
            seed in 0usize..100,
        ) {
            let cfg = AssociationConfig::new(binary(0.2));
            let lms: Vec<_> = offsets.iter().enumerate().map(|(j, (dx, dy))| {
                candidate(j, Point2::new(5.0 + dx, dy * 0.2), ClassBelief::uniform(2))
            }).collect();
            let mut shuffled = lms.clone();
            shuffled.rotate_left(seed % lms.len());
            shuffled.reverse();
            let z = measurement(5.0, 0.0, 1);
            let a = compute_hypotheses(&z, &Pose2::identity(), &lms, &cfg).unwrap();
            let b = compute_hypotheses(&z, &Pose2::identity(), &shuffled, &cfg).unwrap();
            prop_assert_eq!(a.candidates.len(), b.candidates.len());
            for (x, y) in a.candidates.iter().zip(&b.candidates) {
                prop_assert_eq!(x.landmark, y.landmark);
                prop_assert!((x.weight - y.weight).abs() < 1e-12);
            }
        }

        #[test]
        fn semantic_boost_never_lowers_weight(p in 0.05..0.95f64, boost in 0.0..0.5f64) {
            let cfg = AssociationConfig::new(binary(0.1));
            let z = measurement(5.0, 0.0, 0);
            let make = |q: f64| vec![
                candidate(0, Point2::new(5.0, 0.02), ClassBelief::new(vec![q, 1.0 - q]).unwrap()),
                candidate(1, Point2::new(5.02, -0.01), ClassBelief::uniform(2)),
            ];
            let q2 = (p + boost).min(1.0);
            let a = compute_hypotheses(&z, &Pose2::identity(), &make(p), &cfg).unwrap();
            let b = compute_hypotheses(&z, &Pose2::identity(), &make(q2), &cfg).unwrap();
            prop_assert!(b.weight_of(0).unwrap() >= a.weight_of(0).unwrap() - 1e-15);
        }
    }
}
