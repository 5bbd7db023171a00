use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SlamError};

/// Sparse Cholesky factorization of a symmetric positive-definite matrix,
/// with a fill-reducing ordering chosen by the backend.
pub struct SparseCholesky {
    llt: Llt<usize, f64>,
    n: usize,
}

impl SparseCholesky {
    /// Factors the matrix given by its lower-triangular entries (`row >= col`).
    /// Duplicate entries are summed.
    pub fn factor(n: usize, lower: &[(usize, usize, f64)]) -> Result<Self> {
        let triplets: Vec<Triplet<usize, usize, f64>> = lower
            .iter()
            .map(|&(r, c, v)| {
                debug_assert!(r >= c);
                Triplet::new(r, c, v)
            })
            .collect();
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| SlamError::SingularSystem(format!("sparse assembly failed: {e:?}")))?;
        let llt = mat
            .sp_cholesky(Side::Lower)
            .map_err(|e| SlamError::SingularSystem(format!("cholesky failed: {e}")))?;
        Ok(Self { llt, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut m = Mat::<f64>::zeros(self.n, 1);
        for i in 0..self.n {
            m[(i, 0)] = rhs[i];
        }
        self.llt.solve_in_place(&mut m);
        DVector::from_fn(self.n, |i, _| m[(i, 0)])
    }

    /// Columns `cols` of the inverse, as an `n x cols.len()` matrix.
    pub fn inverse_columns(&self, cols: &[usize]) -> DMatrix<f64> {
        let mut m = Mat::<f64>::zeros(self.n, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            m[(c, j)] = 1.0;
        }
        self.llt.solve_in_place(&mut m);
        DMatrix::from_fn(self.n, cols.len(), |i, j| m[(i, j)])
    }
}
