use nalgebra::{DMatrix, DVector};

use super::{FactorGraph, LinearizedFactor, Ordering, Values};
use crate::error::{Result, SlamError};

/// Whitened Jacobian and residual stacked over all factors.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub ordering: Ordering,
    pub factors: Vec<LinearizedFactor>,
}

/// Linearizes every factor at `values`. Mixture factors contribute their
/// currently dominant component.
pub fn linearize(graph: &FactorGraph, values: &Values) -> Result<LinearSystem> {
    let ordering = Ordering::from_values(values);
    let factors = graph
        .factors()
        .iter()
        .map(|f| f.linearize(values))
        .collect::<Result<Vec<_>>>()?;
    for lf in &factors {
        for b in &lf.blocks {
            if ordering.offset(&b.var).is_none() {
                return Err(SlamError::MissingVariable(b.var));
            }
        }
    }
    Ok(LinearSystem { ordering, factors })
}

impl LinearSystem {
    pub fn residual_dim(&self) -> usize {
        self.factors.iter().map(|f| f.residual.len()).sum()
    }

    pub fn residual(&self) -> DVector<f64> {
        let mut r = DVector::zeros(self.residual_dim());
        let mut row = 0;
        for f in &self.factors {
            r.rows_mut(row, f.residual.len()).copy_from(&f.residual);
            row += f.residual.len();
        }
        r
    }

    pub fn dense_jacobian(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.residual_dim(), self.ordering.dim());
        let mut row = 0;
        for f in &self.factors {
            for b in &f.blocks {
                let col = self.ordering.offset(&b.var).expect("checked in linearize");
                let mut view = j.view_mut((row, col), b.jacobian.shape());
                view += &b.jacobian;
            }
            row += f.residual.len();
        }
        j
    }

    /// Objective at the linearization point.
    pub fn error(&self) -> f64 {
        self.factors.iter().map(|f| f.nll()).sum()
    }

    /// `J^T r`.
    pub fn gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.ordering.dim());
        for f in &self.factors {
            for b in &f.blocks {
                let col = self.ordering.offset(&b.var).expect("checked in linearize");
                let mut seg = g.rows_mut(col, b.jacobian.ncols());
                seg += b.jacobian.tr_mul(&f.residual);
            }
        }
        g
    }

    /// Lower-triangular entries of `J^T J`, duplicates not merged.
    pub fn hessian_lower(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for f in &self.factors {
            for a in &f.blocks {
                let ca = self.ordering.offset(&a.var).expect("checked in linearize");
                for b in &f.blocks {
                    let cb = self.ordering.offset(&b.var).expect("checked in linearize");
                    if ca < cb {
                        continue;
                    }
                    let block = a.jacobian.tr_mul(&b.jacobian);
                    for i in 0..block.nrows() {
                        for j in 0..block.ncols() {
                            let (r, c) = (ca + i, cb + j);
                            if r >= c {
                                out.push((r, c, block[(i, j)]));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn hessian_diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.ordering.dim());
        for f in &self.factors {
            for b in &f.blocks {
                let col = self.ordering.offset(&b.var).expect("checked in linearize");
                for j in 0..b.jacobian.ncols() {
                    d[col + j] += b.jacobian.column(j).norm_squared();
                }
            }
        }
        d
    }

    /// Dense `J^T J`.
    pub fn dense_hessian(&self) -> DMatrix<f64> {
        let n = self.ordering.dim();
        let mut h = DMatrix::zeros(n, n);
        for (r, c, v) in self.hessian_lower() {
            h[(r, c)] += v;
            if r != c {
                h[(c, r)] += v;
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::{Matrix2, Matrix3};

    use super::*;
    use crate::factor_graph::{
        BetweenPose2Factor, PriorPose2Factor, RangeBearingFactor, RangeBearingMeasurement,
    };
    use crate::geometry::{Point2, Pose2};

    #[test]
    fn prior_at_its_mean_has_zero_residual() {
        let p = Pose2::new(1.0, -2.0, 0.3);
        let mut graph = FactorGraph::new();
        graph.add(PriorPose2Factor::new(0, p, &Matrix3::from_diagonal_element(0.25)).unwrap());
        let mut values = Values::new();
        values.insert_pose(0, p);
        let sys = linearize(&graph, &values).unwrap();
        assert_eq!(sys.residual().norm(), 0.0);
        let j = sys.dense_jacobian();
        assert!((j - DMatrix::identity(3, 3) * 2.0).norm() < 1e-12);
    }

    #[test]
    fn doubling_covariance_scales_whitened_residual() {
        let z = RangeBearingMeasurement::new(2.0, 0.1);
        let mut values = Values::new();
        values.insert_pose(0, Pose2::identity());
        values.insert_point(0, Point2::new(3.0, 1.0));
        let residual = |cov: Matrix2<f64>| {
            let mut graph = FactorGraph::new();
            graph.add(RangeBearingFactor::new(0, 0, z, &cov).unwrap());
            linearize(&graph, &values).unwrap().residual().norm()
        };
        let cov = Matrix2::new(0.04, 0.01, 0.01, 0.02);
        let ratio = residual(cov * 2.0) / residual(cov);
        assert!((ratio - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stacked_dimensions() {
        let (t, k) = (5, 7);
        let mut graph = FactorGraph::new();
        let mut values = Values::new();
        graph.add(PriorPose2Factor::new(0, Pose2::identity(), &Matrix3::identity()).unwrap());
        for i in 0..t {
            values.insert_pose(i, Pose2::new(i as f64, 0.0, 0.0));
            if i > 0 {
                graph.add(
                    BetweenPose2Factor::new(
                        i - 1,
                        i,
                        Pose2::new(1.0, 0.0, 0.0),
                        &Matrix3::identity(),
                    )
                    .unwrap(),
                );
            }
        }
        values.insert_point(0, Point2::new(2.0, 3.0));
        for n in 0..k {
            let z = RangeBearingMeasurement::new(3.0, 1.0);
            graph.add(RangeBearingFactor::new(n % t, 0, z, &Matrix2::identity()).unwrap());
        }
        let sys = linearize(&graph, &values).unwrap();
        assert_eq!(sys.residual_dim(), 3 + 3 * (t - 1) + 2 * k);
        assert_eq!(sys.ordering.dim(), 3 * t + 2);
        let j = sys.dense_jacobian();
        assert!((sys.gradient() - j.transpose() * sys.residual()).norm() < 1e-12);
        assert!((sys.dense_hessian() - j.transpose() * &j).norm() < 1e-12);
    }

    #[test]
    fn missing_variable_is_reported() {
        let mut graph = FactorGraph::new();
        graph.add(BetweenPose2Factor::new(0, 1, Pose2::identity(), &Matrix3::identity()).unwrap());
        let mut values = Values::new();
        values.insert_pose(0, Pose2::identity());
        assert!(matches!(
            linearize(&graph, &values),
            Err(SlamError::MissingVariable(v)) if v == crate::factor_graph::VariableId::pose(1)
        ));
    }
}
