use serde::{Deserialize, Serialize};

use super::{linearize, FactorGraph, LinearSystem, SparseCholesky, Values};
use crate::error::{Result, SlamError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the squared-residual part of the
    /// objective by less than this fraction.
    pub relative_decrease_tol: f64,
    /// Stop once half the squared whitened residual drops below this value.
    pub absolute_error_tol: f64,
    pub initial_lm_lambda: f64,
    pub lm_lambda_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_decrease_tol: 1e-6,
            absolute_error_tol: 1e-8,
            initial_lm_lambda: 1e-4,
            lm_lambda_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptStats {
    pub iterations: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub converged: bool,
    /// Objective after every accepted step.
    pub accepted_errors: Vec<f64>,
}

const MAX_LAMBDA: f64 = 1e12;

fn least_squares_part(sys: &LinearSystem) -> f64 {
    sys.factors
        .iter()
        .map(|f| 0.5 * f.residual.norm_squared())
        .sum()
}

/// Levenberg-Marquardt with multiplicative diagonal damping.
///
/// The objective is the full negative log-likelihood, so accepted steps never
/// increase it even when mixture factors switch components between
/// iterations.
pub fn optimize(
    graph: &FactorGraph,
    initial: &Values,
    config: &OptimizerConfig,
) -> Result<(Values, OptStats)> {
    graph.check_gauge(initial)?;

    let mut values = initial.clone();
    let mut sys = linearize(graph, &values)?;
    let mut error = sys.error();
    let mut stats = OptStats {
        initial_error: error,
        final_error: error,
        ..Default::default()
    };
    let mut lambda = config.initial_lm_lambda;
    let n = sys.ordering.dim();

    'outer: while stats.iterations < config.max_iterations {
        let ls = least_squares_part(&sys);
        if ls <= config.absolute_error_tol {
            stats.converged = true;
            break;
        }
        stats.iterations += 1;

        let gradient = sys.gradient();
        let neg_gradient = -&gradient;
        let diag = sys.hessian_diagonal();
        let lower = sys.hessian_lower();

        loop {
            let mut damped = lower.clone();
            damped.extend((0..n).map(|i| (i, i, lambda * diag[i].max(1e-12))));
            let step = match SparseCholesky::factor(n, &damped) {
                Ok(chol) => Some(chol.solve(&neg_gradient)),
                Err(_) => None,
            };

            let candidate = step.and_then(|delta| {
                if delta.iter().all(|d| d.is_finite()) {
                    let v = values.retract(&sys.ordering, &delta);
                    linearize(graph, &v).ok().map(|s| (v, s))
                } else {
                    None
                }
            });

            match candidate {
                Some((new_values, new_sys)) if new_sys.error() <= error => {
                    let new_error = new_sys.error();
                    let decrease = error - new_error;
                    values = new_values;
                    sys = new_sys;
                    error = new_error;
                    stats.accepted_errors.push(error);
                    lambda = (lambda / config.lm_lambda_factor).max(1e-12);
                    if decrease <= config.relative_decrease_tol * ls {
                        stats.converged = true;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= config.lm_lambda_factor;
                    if lambda > MAX_LAMBDA {
                        // no descent direction left at this point
                        if SparseCholesky::factor(n, &lower).is_err() {
                            return Err(SlamError::SingularSystem(
                                "information matrix is rank deficient".into(),
                            ));
                        }
                        stats.converged = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    stats.final_error = error;
    Ok((values, stats))
}
