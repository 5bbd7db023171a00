use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use super::{Ordering, Values, VariableId};
use crate::error::Result;
use crate::geometry::{range_bearing, rotation, wrap_angle, NoiseModel, Pose2};
use crate::mixture::SemanticMaxMixtureFactor;

/// A geometric landmark observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeBearingMeasurement {
    pub range: f64,
    pub bearing: f64,
}

impl RangeBearingMeasurement {
    pub fn new(range: f64, bearing: f64) -> Self {
        Self { range, bearing }
    }

    /// `predicted - measured`, bearing wrapped.
    pub fn residual(&self, range: f64, bearing: f64) -> Vector2<f64> {
        Vector2::new(range - self.range, wrap_angle(bearing - self.bearing))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianBlock {
    pub var: VariableId,
    pub jacobian: DMatrix<f64>,
}

/// Whitened residual and Jacobians of one factor at a linearization point.
///
/// The factor's negative log-likelihood there is `0.5 |residual|^2 + constant`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedFactor {
    pub residual: DVector<f64>,
    pub blocks: Vec<JacobianBlock>,
    pub constant: f64,
}

impl LinearizedFactor {
    pub fn nll(&self) -> f64 {
        0.5 * self.residual.norm_squared() + self.constant
    }

    fn whitened(
        noise: &NoiseModel,
        residual: DVector<f64>,
        blocks: Vec<(VariableId, DMatrix<f64>)>,
        constant: f64,
    ) -> Self {
        Self {
            residual: noise.whiten(&residual),
            blocks: blocks
                .into_iter()
                .map(|(var, j)| JacobianBlock {
                    var,
                    jacobian: noise.whiten_matrix(&j),
                })
                .collect(),
            constant,
        }
    }
}

fn pose_error_vector(e: &Pose2) -> DVector<f64> {
    DVector::from_vec(vec![e.x, e.y, e.theta])
}

/// d(x, y, theta of E) for a right perturbation of E.
fn right_jacobian_of_coords(e: &Pose2) -> DMatrix<f64> {
    let r = rotation(e.theta);
    let mut j = DMatrix::zeros(3, 3);
    j.view_mut((0, 0), (2, 2)).copy_from(&r);
    j[(2, 2)] = 1.0;
    j
}

fn dmatrix<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_iterator(R, C, m.iter().copied())
}

/// Anchors a pose. Residual: coordinates of `prior^-1 * pose`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorPose2Factor {
    pub pose: usize,
    pub prior: Pose2,
    pub noise: NoiseModel,
}

impl PriorPose2Factor {
    pub fn new(pose: usize, prior: Pose2, cov: &Matrix3<f64>) -> Result<Self> {
        Ok(Self {
            pose,
            prior,
            noise: NoiseModel::from_matrix3(cov)?,
        })
    }

    pub fn linearize(&self, values: &Values) -> Result<LinearizedFactor> {
        let p = values.pose(self.pose)?;
        let e = self.prior.between(&p);
        Ok(LinearizedFactor::whitened(
            &self.noise,
            pose_error_vector(&e),
            vec![(VariableId::pose(self.pose), right_jacobian_of_coords(&e))],
            self.noise.log_normalizer(),
        ))
    }

    pub fn nll(&self, values: &Values) -> Result<f64> {
        let e = self.prior.between(&values.pose(self.pose)?);
        Ok(self.noise.nll(&pose_error_vector(&e)))
    }
}

/// Odometry between consecutive poses. Residual: coordinates of
/// `measured^-1 * from^-1 * to`.
#[derive(Clone, Debug, PartialEq)]
pub struct BetweenPose2Factor {
    pub from: usize,
    pub to: usize,
    pub measured: Pose2,
    pub noise: NoiseModel,
}

impl BetweenPose2Factor {
    pub fn new(from: usize, to: usize, measured: Pose2, cov: &Matrix3<f64>) -> Result<Self> {
        Ok(Self {
            from,
            to,
            measured,
            noise: NoiseModel::from_matrix3(cov)?,
        })
    }

    fn error(&self, values: &Values) -> Result<(Pose2, Pose2)> {
        let a = values.pose(self.from)?;
        let b = values.pose(self.to)?;
        let f = a.between(&b);
        Ok((self.measured.between(&f), f))
    }

    pub fn linearize(&self, values: &Values) -> Result<LinearizedFactor> {
        let (e, f) = self.error(values)?;
        let d_to = right_jacobian_of_coords(&e);

        // E = Z^-1 Exp(-d) F for a right perturbation d of `from`.
        let rz_t = rotation(self.measured.theta).transpose();
        let jt = Vector2::new(-f.y, f.x);
        let mut d_from = DMatrix::zeros(3, 3);
        d_from.view_mut((0, 0), (2, 2)).copy_from(&(-rz_t));
        let col = -(rz_t * jt);
        d_from[(0, 2)] = col[0];
        d_from[(1, 2)] = col[1];
        d_from[(2, 2)] = -1.0;

        Ok(LinearizedFactor::whitened(
            &self.noise,
            pose_error_vector(&e),
            vec![
                (VariableId::pose(self.from), d_from),
                (VariableId::pose(self.to), d_to),
            ],
            self.noise.log_normalizer(),
        ))
    }

    pub fn nll(&self, values: &Values) -> Result<f64> {
        let (e, _) = self.error(values)?;
        Ok(self.noise.nll(&pose_error_vector(&e)))
    }
}

/// A committed landmark observation.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeBearingFactor {
    pub pose: usize,
    pub landmark: usize,
    pub measured: RangeBearingMeasurement,
    pub noise: NoiseModel,
}

impl RangeBearingFactor {
    pub fn new(
        pose: usize,
        landmark: usize,
        measured: RangeBearingMeasurement,
        cov: &Matrix2<f64>,
    ) -> Result<Self> {
        Ok(Self {
            pose,
            landmark,
            measured,
            noise: NoiseModel::from_matrix2(cov)?,
        })
    }

    pub fn with_noise(
        pose: usize,
        landmark: usize,
        measured: RangeBearingMeasurement,
        noise: NoiseModel,
    ) -> Self {
        Self {
            pose,
            landmark,
            measured,
            noise,
        }
    }

    pub fn linearize(&self, values: &Values) -> Result<LinearizedFactor> {
        linearize_range_bearing(
            self.pose,
            self.landmark,
            &self.measured,
            &self.noise,
            values,
            self.noise.log_normalizer(),
        )
    }

    pub fn nll(&self, values: &Values) -> Result<f64> {
        let r = range_bearing_residual(self.pose, self.landmark, &self.measured, values)?;
        Ok(self.noise.nll(&r))
    }
}

pub(crate) fn range_bearing_residual(
    pose: usize,
    landmark: usize,
    measured: &RangeBearingMeasurement,
    values: &Values,
) -> Result<DVector<f64>> {
    let p = values.pose(pose)?;
    let l = values.point(landmark)?;
    let rb = range_bearing(&p, &l)?;
    let r = measured.residual(rb.range, rb.bearing);
    Ok(DVector::from_vec(vec![r[0], r[1]]))
}

pub(crate) fn linearize_range_bearing(
    pose: usize,
    landmark: usize,
    measured: &RangeBearingMeasurement,
    noise: &NoiseModel,
    values: &Values,
    constant: f64,
) -> Result<LinearizedFactor> {
    let p = values.pose(pose)?;
    let l = values.point(landmark)?;
    let rb = range_bearing(&p, &l)?;
    let r = measured.residual(rb.range, rb.bearing);
    Ok(LinearizedFactor::whitened(
        noise,
        DVector::from_vec(vec![r[0], r[1]]),
        vec![
            (VariableId::pose(pose), dmatrix(&rb.d_pose)),
            (VariableId::landmark(landmark), dmatrix(&rb.d_point)),
        ],
        constant,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    PriorPose2(PriorPose2Factor),
    BetweenPose2(BetweenPose2Factor),
    RangeBearing(RangeBearingFactor),
    SemanticMaxMixture(SemanticMaxMixtureFactor),
}

impl Factor {
    /// Residual dimension.
    pub fn dim(&self) -> usize {
        match self {
            Factor::PriorPose2(_) | Factor::BetweenPose2(_) => 3,
            Factor::RangeBearing(_) | Factor::SemanticMaxMixture(_) => 2,
        }
    }

    /// Every variable the factor may touch.
    pub fn keys(&self) -> Vec<VariableId> {
        match self {
            Factor::PriorPose2(f) => vec![VariableId::pose(f.pose)],
            Factor::BetweenPose2(f) => vec![VariableId::pose(f.from), VariableId::pose(f.to)],
            Factor::RangeBearing(f) => {
                vec![VariableId::pose(f.pose), VariableId::landmark(f.landmark)]
            }
            Factor::SemanticMaxMixture(f) => f.keys(),
        }
    }

    pub fn linearize(&self, values: &Values) -> Result<LinearizedFactor> {
        match self {
            Factor::PriorPose2(f) => f.linearize(values),
            Factor::BetweenPose2(f) => f.linearize(values),
            Factor::RangeBearing(f) => f.linearize(values),
            Factor::SemanticMaxMixture(f) => f.linearize(values),
        }
    }

    /// Negative log-likelihood including normalization constants.
    pub fn nll(&self, values: &Values) -> Result<f64> {
        match self {
            Factor::PriorPose2(f) => f.nll(values),
            Factor::BetweenPose2(f) => f.nll(values),
            Factor::RangeBearing(f) => f.nll(values),
            Factor::SemanticMaxMixture(f) => f.select_component(values).map(|(_, nll)| nll),
        }
    }
}

impl From<PriorPose2Factor> for Factor {
    fn from(f: PriorPose2Factor) -> Self {
        Factor::PriorPose2(f)
    }
}

impl From<BetweenPose2Factor> for Factor {
    fn from(f: BetweenPose2Factor) -> Self {
        Factor::BetweenPose2(f)
    }
}

impl From<RangeBearingFactor> for Factor {
    fn from(f: RangeBearingFactor) -> Self {
        Factor::RangeBearing(f)
    }
}

impl From<SemanticMaxMixtureFactor> for Factor {
    fn from(f: SemanticMaxMixtureFactor) -> Self {
        Factor::SemanticMaxMixture(f)
    }
}

/// Central-difference Jacobians of the whitened residual of `factor`'s
/// currently selected linearization, one block per variable in the order
/// `linearize` reports them. Poses are perturbed through the retraction.
pub fn numerical_jacobians(
    factor: &Factor,
    values: &Values,
    step: f64,
) -> Result<Vec<JacobianBlock>> {
    let base = factor.linearize(values)?;
    let ordering = Ordering::from_values(values);
    let m = base.residual.len();
    let mut out = Vec::with_capacity(base.blocks.len());
    for block in &base.blocks {
        let offset = ordering
            .offset(&block.var)
            .ok_or(crate::error::SlamError::MissingVariable(block.var))?;
        let mut jacobian = DMatrix::zeros(m, block.var.dim());
        for i in 0..block.var.dim() {
            let mut delta = DVector::zeros(ordering.dim());
            delta[offset + i] = step;
            let plus = factor
                .linearize(&values.retract(&ordering, &delta))?
                .residual;
            delta[offset + i] = -step;
            let minus = factor
                .linearize(&values.retract(&ordering, &delta))?
                .residual;
            jacobian.set_column(i, &((plus - minus) / (2.0 * step)));
        }
        out.push(JacobianBlock {
            var: block.var,
            jacobian,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::mixture::{MixtureComponent, NullComponent};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose2 {
        Pose2::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-3.0..3.0),
        )
    }

    fn random_cov3(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        a * a.transpose() + Matrix3::identity() * 0.05
    }

    fn random_cov2(rng: &mut ChaCha8Rng) -> Matrix2<f64> {
        let a = Matrix2::from_fn(|_, _| rng.random_range(-0.2..0.2));
        a * a.transpose() + Matrix2::identity() * 0.01
    }

    fn assert_jacobians_match(factor: &Factor, values: &Values) {
        let analytic = factor.linearize(values).unwrap();
        let numeric = numerical_jacobians(factor, values, 1e-6).unwrap();
        assert_eq!(analytic.blocks.len(), numeric.len());
        for (a, n) in analytic.blocks.iter().zip(&numeric) {
            assert_eq!(a.var, n.var);
            let err = (&a.jacobian - &n.jacobian).norm() / a.jacobian.norm().max(1.0);
            assert!(err < 1e-5, "{:?}: relative error {err}", a.var);
        }
    }

    #[test]
    fn prior_and_between_jacobians() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut values = Values::new();
            values.insert_pose(0, random_pose(&mut rng));
            values.insert_pose(1, random_pose(&mut rng));
            let prior = PriorPose2Factor::new(0, random_pose(&mut rng), &random_cov3(&mut rng));
            let between =
                BetweenPose2Factor::new(0, 1, random_pose(&mut rng), &random_cov3(&mut rng));
            assert_jacobians_match(&prior.unwrap().into(), &values);
            assert_jacobians_match(&between.unwrap().into(), &values);
        }
    }

    #[test]
    fn range_bearing_and_mixture_jacobians() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let mut values = Values::new();
            let pose = random_pose(&mut rng);
            values.insert_pose(0, pose);
            for j in 0..2 {
                let range = rng.random_range(1.0..10.0);
                let bearing = rng.random_range(-3.0..3.0);
                values.insert_point(j, pose.project(range, bearing));
            }
            // keep the measured bearing well away from the wrap point
            let z = RangeBearingMeasurement::new(
                rng.random_range(1.0..10.0),
                rng.random_range(-2.5..2.5),
            );
            let rb = RangeBearingFactor::new(0, 0, z, &random_cov2(&mut rng)).unwrap();
            assert_jacobians_match(&rb.into(), &values);

            let gamma = NoiseModel::from_matrix2(&random_cov2(&mut rng)).unwrap();
            let mixture = SemanticMaxMixtureFactor::new(
                0,
                z,
                vec![
                    MixtureComponent {
                        landmark: 0,
                        weight: 0.5,
                        noise: gamma.clone(),
                    },
                    MixtureComponent {
                        landmark: 1,
                        weight: 0.4,
                        noise: gamma,
                    },
                ],
                Some(NullComponent::new(0.1, 1e5).unwrap()),
            )
            .unwrap();
            assert_jacobians_match(&mixture.into(), &values);
        }
    }

    #[test]
    fn numerical_jacobian_of_landmark_is_rotation_free() {
        // range-bearing with respect to a point at unit range straight ahead
        let mut values = Values::new();
        values.insert_pose(0, Pose2::identity());
        values.insert_point(0, Point2::new(1.0, 0.0));
        let f: Factor = RangeBearingFactor::new(
            0,
            0,
            RangeBearingMeasurement::new(1.0, 0.0),
            &Matrix2::identity(),
        )
        .unwrap()
        .into();
        let blocks = numerical_jacobians(&f, &values, 1e-6).unwrap();
        let d_point = &blocks[1].jacobian;
        assert!((d_point - DMatrix::identity(2, 2)).norm() < 1e-8);
    }
}
