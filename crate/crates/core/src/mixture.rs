//! Semantic max-mixture factor.
//!
//! A measurement whose association is uncertain becomes one factor whose
//! density is the largest of its weighted Gaussian components: one per
//! candidate landmark plus, optionally, a very broad null component. Weights
//! are fixed when the factor is built; only the choice of dominant component
//! changes as the estimate moves.

use crate::error::{Result, SlamError};
use crate::factor_graph::{
    linearize_range_bearing, range_bearing_residual, LinearizedFactor, RangeBearingMeasurement,
    Values, VariableId,
};
use crate::geometry::NoiseModel;

/// Default standard deviation of the null component.
pub const DEFAULT_NULL_SIGMA: f64 = 1e5;
const MIN_NULL_SIGMA: f64 = 1e3;
const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub landmark: usize,
    pub weight: f64,
    pub noise: NoiseModel,
}

/// "Matches no landmark". Evaluated against the prediction of the first
/// landmark component with isotropic covariance `sigma^2 I`.
#[derive(Clone, Debug, PartialEq)]
pub struct NullComponent {
    pub weight: f64,
    pub sigma: f64,
    noise: NoiseModel,
}

impl NullComponent {
    pub fn new(weight: f64, sigma: f64) -> Result<Self> {
        if !(sigma >= MIN_NULL_SIGMA) {
            return Err(SlamError::Domain(format!(
                "null sigma must be at least {MIN_NULL_SIGMA}, got {sigma}"
            )));
        }
        Ok(Self {
            weight,
            sigma,
            noise: NoiseModel::isotropic(2, sigma)?,
        })
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMaxMixtureFactor {
    pub pose: usize,
    pub measured: RangeBearingMeasurement,
    components: Vec<MixtureComponent>,
    null: Option<NullComponent>,
}

impl SemanticMaxMixtureFactor {
    pub fn new(
        pose: usize,
        measured: RangeBearingMeasurement,
        components: Vec<MixtureComponent>,
        null: Option<NullComponent>,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(SlamError::Domain(
                "mixture factor needs at least one landmark component".into(),
            ));
        }
        let weights = components
            .iter()
            .map(|c| c.weight)
            .chain(null.iter().map(|n| n.weight));
        let mut total = 0.0;
        for w in weights {
            if !(w > 0.0 && w <= 1.0) {
                return Err(SlamError::Domain(format!(
                    "component weights must lie in (0, 1], got {w}"
                )));
            }
            total += w;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(SlamError::Domain(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            pose,
            measured,
            components,
            null,
        })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn null(&self) -> Option<&NullComponent> {
        self.null.as_ref()
    }

    /// Landmark components plus the null component, if any.
    pub fn num_components(&self) -> usize {
        self.components.len() + usize::from(self.null.is_some())
    }

    pub fn null_index(&self) -> Option<usize> {
        self.null.as_ref().map(|_| self.components.len())
    }

    /// Landmark of component `index`, `None` for the null component.
    pub fn component_landmark(&self, index: usize) -> Option<usize> {
        self.components.get(index).map(|c| c.landmark)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.weight)
            .chain(self.null.iter().map(|n| n.weight))
            .collect()
    }

    pub fn keys(&self) -> Vec<VariableId> {
        let mut keys = vec![VariableId::pose(self.pose)];
        for c in &self.components {
            let id = VariableId::landmark(c.landmark);
            if !keys.contains(&id) {
                keys.push(id);
            }
        }
        keys
    }

    fn component_parts(&self, index: usize) -> Result<(usize, &NoiseModel, f64)> {
        if let Some(c) = self.components.get(index) {
            return Ok((c.landmark, &c.noise, c.weight));
        }
        match (&self.null, index == self.components.len()) {
            (Some(n), true) => Ok((self.components[0].landmark, &n.noise, n.weight)),
            _ => Err(SlamError::Domain(format!(
                "component index {index} out of range ({} components)",
                self.num_components()
            ))),
        }
    }

    /// `-log w + gaussian_nll(residual, cov)` of one component.
    pub fn component_nll(&self, values: &Values, index: usize) -> Result<f64> {
        let (landmark, noise, weight) = self.component_parts(index)?;
        let r = range_bearing_residual(self.pose, landmark, &self.measured, values)?;
        Ok(noise.nll(&r) - weight.ln())
    }

    /// Most probable component and its negative log-likelihood. Ties go to
    /// the lowest index.
    pub fn select_component(&self, values: &Values) -> Result<(usize, f64)> {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.num_components() {
            let nll = self.component_nll(values, i)?;
            if nll < best.1 {
                best = (i, nll);
            }
        }
        Ok(best)
    }

    /// Landmark of the dominant component, `None` when the null wins.
    pub fn selected_landmark(&self, values: &Values) -> Result<Option<usize>> {
        let (i, _) = self.select_component(values)?;
        Ok(self.component_landmark(i))
    }

    /// Whitened system of the dominant component, with its selection index.
    pub fn linearize_selected(&self, values: &Values) -> Result<(usize, LinearizedFactor)> {
        let (index, _) = self.select_component(values)?;
        let (landmark, noise, weight) = self.component_parts(index)?;
        let constant = noise.log_normalizer() - weight.ln();
        let lf =
            linearize_range_bearing(self.pose, landmark, &self.measured, noise, values, constant)?;
        Ok((index, lf))
    }

    pub fn linearize(&self, values: &Values) -> Result<LinearizedFactor> {
        self.linearize_selected(values).map(|(_, lf)| lf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::RangeBearingFactor;
    use crate::geometry::{Point2, Pose2};
    use nalgebra::Matrix2;
    use std::f64::consts::TAU;

    fn values_with(landmarks: &[Point2]) -> Values {
        let mut v = Values::new();
        v.insert_pose(0, Pose2::identity());
        for (j, p) in landmarks.iter().enumerate() {
            v.insert_point(j, *p);
        }
        v
    }

    fn unit() -> NoiseModel {
        NoiseModel::from_matrix2(&Matrix2::identity()).unwrap()
    }

    #[test]
    fn single_component_matches_plain_factor() {
        let v = values_with(&[Point2::new(3.0, 1.0)]);
        let z = RangeBearingMeasurement::new(3.5, 0.2);
        let cov = Matrix2::new(0.04, 0.001, 0.001, 0.0009);
        let plain = RangeBearingFactor::new(0, 0, z, &cov).unwrap();
        let mix = SemanticMaxMixtureFactor::new(
            0,
            z,
            vec![MixtureComponent {
                landmark: 0,
                weight: 1.0,
                noise: NoiseModel::from_matrix2(&cov).unwrap(),
            }],
            None,
        )
        .unwrap();
        let a = plain.nll(&v).unwrap();
        let b = mix.component_nll(&v, 0).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(plain.linearize(&v).unwrap(), mix.linearize(&v).unwrap());
    }

    #[test]
    fn weighted_component_at_zero_residual() {
        let v = values_with(&[Point2::new(2.0, 0.0)]);
        let z = RangeBearingMeasurement::new(2.0, 0.0);
        let mix = SemanticMaxMixtureFactor::new(
            0,
            z,
            vec![MixtureComponent {
                landmark: 0,
                weight: 0.9,
                noise: unit(),
            }],
            Some(NullComponent::new(0.1, DEFAULT_NULL_SIGMA).unwrap()),
        )
        .unwrap();
        let nll = mix.component_nll(&v, 0).unwrap();
        assert!((nll - (-(0.9f64.ln()) + TAU.ln())).abs() < 1e-12);

        let null = mix.component_nll(&v, 1).unwrap();
        let expected = -(0.1f64.ln()) + (TAU * 1e10).ln();
        assert!((null - expected).abs() < 1e-6);
    }

    #[test]
    fn null_residual_term_is_negligible() {
        let v = values_with(&[Point2::new(10.0, 0.0)]);
        let z = RangeBearingMeasurement::new(4.0, 1.0);
        let mix = SemanticMaxMixtureFactor::new(
            0,
            z,
            vec![MixtureComponent {
                landmark: 0,
                weight: 0.9,
                noise: unit(),
            }],
            Some(NullComponent::new(0.1, DEFAULT_NULL_SIGMA).unwrap()),
        )
        .unwrap();
        let null = mix.component_nll(&v, 1).unwrap();
        let constant = -(0.1f64.ln()) + (TAU * 1e10).ln();
        assert!((null - constant).abs() < 1e-6);
    }

    #[test]
    fn invalid_construction() {
        let z = RangeBearingMeasurement::new(1.0, 0.0);
        assert!(SemanticMaxMixtureFactor::new(0, z, vec![], None).is_err());
        let c = |w| MixtureComponent {
            landmark: 0,
            weight: w,
            noise: unit(),
        };
        assert!(SemanticMaxMixtureFactor::new(0, z, vec![c(0.5)], None).is_err());
        assert!(SemanticMaxMixtureFactor::new(0, z, vec![c(0.5), c(0.4)], None).is_err());
        assert!(SemanticMaxMixtureFactor::new(0, z, vec![c(0.5), c(0.5)], None).is_ok());
        assert!(NullComponent::new(0.1, 10.0).is_err());
    }

    #[test]
    fn missing_landmark_is_reported() {
        let v = values_with(&[]);
        let mix = SemanticMaxMixtureFactor::new(
            0,
            RangeBearingMeasurement::new(1.0, 0.0),
            vec![MixtureComponent {
                landmark: 3,
                weight: 1.0,
                noise: unit(),
            }],
            None,
        )
        .unwrap();
        assert!(matches!(
            mix.select_component(&v),
            Err(SlamError::MissingVariable(id)) if id == VariableId::landmark(3)
        ));
    }
}
