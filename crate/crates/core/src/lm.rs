//! Damped least squares (Levenberg-Marquardt) with analytic Jacobians.
//!
//! Small dense problems only: the normal equations are formed explicitly and
//! solved by Cholesky factorization with Marquardt diagonal scaling.

use nalgebra::{DMatrix, DVector};

/// A residual vector `r(p)` and its Jacobian `dr/dp`.
pub trait LeastSquares {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;

    /// Writes `r(params)` into `residuals` and, when requested, the row-major
    /// `n_residuals x n_params` Jacobian into `jacobian`.
    fn evaluate(&self, params: &[f64], residuals: &mut [f64], jacobian: Option<&mut [f64]>);

    /// Maps a trial point back into the feasible set (box constraints).
    fn project(&self, _params: &mut [f64]) {}
}

#[derive(Clone, Debug)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Relative step length below which the iteration stops.
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            step_tolerance: 1e-8,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LmOutcome {
    pub fn residual_norm(&self) -> f64 {
        self.cost.sqrt()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn minimize<P: LeastSquares + ?Sized>(problem: &P, initial: &[f64], config: &LmConfig) -> LmOutcome {
    let n = problem.n_params();
    let m = problem.n_residuals();
    assert_eq!(initial.len(), n, "initial guess length");

    let mut params = initial.to_vec();
    problem.project(&mut params);
    let mut residuals = vec![0.0; m];
    let mut jacobian = vec![0.0; m * n];
    let mut trial_residuals = vec![0.0; m];
    problem.evaluate(&params, &mut residuals, Some(&mut jacobian));
    let mut cost: f64 = residuals.iter().map(|r| r * r).sum();
    let mut damping = config.initial_damping;
    let tol = config.step_tolerance;

    let mut iterations = 0;
    let mut converged = false;
    if !cost.is_finite() {
        return LmOutcome {
            params,
            cost,
            iterations,
            converged,
        };
    }

    'outer: while iterations < config.max_iterations {
        iterations += 1;
        let jac = DMatrix::from_row_slice(m, n, &jacobian);
        let r = DVector::from_column_slice(&residuals);
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * r;
        if grad.amax() <= 1e-300 {
            converged = true;
            break;
        }
        let diag_floor = jtj.diagonal().amax().max(1e-300) * 1e-12;

        loop {
            let mut lhs = jtj.clone();
            for i in 0..n {
                lhs[(i, i)] += damping * jtj[(i, i)].max(diag_floor);
            }
            let step = match lhs.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    damping *= 10.0;
                    if damping > 1e16 {
                        break 'outer;
                    }
                    continue;
                }
            };
            let mut trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
            problem.project(&mut trial);
            let moved: Vec<f64> = trial.iter().zip(&params).map(|(a, b)| a - b).collect();
            let small_step = norm(&moved) <= tol * (norm(&params) + tol);

            problem.evaluate(&trial, &mut trial_residuals, None);
            let trial_cost: f64 = trial_residuals.iter().map(|r| r * r).sum();
            if trial_cost.is_finite() && trial_cost <= cost {
                let improvement = cost - trial_cost;
                params = trial;
                problem.evaluate(&params, &mut residuals, Some(&mut jacobian));
                cost = trial_cost;
                damping = (damping * 0.1).max(1e-12);
                if small_step || improvement <= 1e-15 * cost.max(1e-300) {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            if small_step {
                // No descent left within numerical resolution.
                converged = true;
                break 'outer;
            }
            damping *= 10.0;
            if damping > 1e16 {
                converged = true;
                break 'outer;
            }
        }
    }

    LmOutcome {
        params,
        cost,
        iterations,
        converged,
    }
}
