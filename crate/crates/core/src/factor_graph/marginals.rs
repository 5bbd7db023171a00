use nalgebra::DMatrix;

use super::{linearize, FactorGraph, Ordering, SparseCholesky, Values, VariableId};
use crate::error::{Result, SlamError};

/// Dense Gauss-Newton information matrix `J^T J` at `values`.
pub fn information_matrix(
    graph: &FactorGraph,
    values: &Values,
) -> Result<(Ordering, DMatrix<f64>)> {
    let sys = linearize(graph, values)?;
    let h = sys.dense_hessian();
    Ok((sys.ordering, h))
}

/// Factorized information matrix for repeated covariance queries.
pub struct MarginalSolver {
    ordering: Ordering,
    chol: SparseCholesky,
}

impl MarginalSolver {
    pub fn new(graph: &FactorGraph, values: &Values) -> Result<Self> {
        let sys = linearize(graph, values)?;
        let chol = SparseCholesky::factor(sys.ordering.dim(), &sys.hessian_lower())?;
        Ok(Self {
            ordering: sys.ordering,
            chol,
        })
    }

    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    fn columns(&self, ids: &[VariableId]) -> Result<Vec<usize>> {
        let mut cols = Vec::new();
        for id in ids {
            let off = self
                .ordering
                .offset(id)
                .ok_or(SlamError::MissingVariable(*id))?;
            cols.extend(off..off + id.dim());
        }
        Ok(cols)
    }

    /// Joint covariance over `ids`, blocks laid out in the given order.
    pub fn joint(&self, ids: &[VariableId]) -> Result<DMatrix<f64>> {
        if ids.is_empty() {
            return Err(SlamError::Domain("no variables requested".into()));
        }
        let cols = self.columns(ids)?;
        let inv = self.chol.inverse_columns(&cols);
        let k = cols.len();
        let mut out = DMatrix::from_fn(k, k, |i, j| inv[(cols[i], j)]);
        symmetrize(&mut out);
        Ok(out)
    }

    /// Joint covariances of `anchor` paired with each of `others`, computed
    /// from a single multi-column solve. Each block is ordered
    /// `[anchor, other]`.
    pub fn paired(&self, anchor: VariableId, others: &[VariableId]) -> Result<Vec<DMatrix<f64>>> {
        let mut ids = vec![anchor];
        ids.extend_from_slice(others);
        let cols = self.columns(&ids)?;
        let inv = self.chol.inverse_columns(&cols);
        let a = anchor.dim();
        let mut out = Vec::with_capacity(others.len());
        let mut start = a;
        for other in others {
            let d = other.dim();
            let local: Vec<usize> = (0..a).chain(start..start + d).collect();
            let mut block = DMatrix::from_fn(a + d, a + d, |i, j| inv[(cols[local[i]], local[j])]);
            symmetrize(&mut block);
            out.push(block);
            start += d;
        }
        Ok(out)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

/// Joint marginal covariance over `ids` from the inverse information matrix.
pub fn joint_marginal_covariance(
    graph: &FactorGraph,
    values: &Values,
    ids: &[VariableId],
) -> Result<DMatrix<f64>> {
    MarginalSolver::new(graph, values)?.joint(ids)
}
