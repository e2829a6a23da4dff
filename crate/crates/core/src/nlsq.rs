//! Dense nonlinear least squares by Gauss-Newton with Levenberg-Marquardt
//! damping. This is the engine behind the inner state-fit minimizations; the
//! problems it sees are small (tens of variables), so the normal equations
//! are assembled densely and factored by Cholesky.

use nalgebra::{DMatrix, DVector};

use crate::krylov;

/// A residual map `r: R^n_vars -> R^n_res` together with its Jacobian.
///
/// The Jacobian must be consistent with the residual; tests check this by
/// finite differences. Both callbacks must be reentrant.
pub trait ResidualProblem {
    fn n_vars(&self) -> usize;
    fn n_res(&self) -> usize;
    fn residual(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone)]
pub struct NlsqConfig {
    /// Stationarity threshold on the gradient infinity norm `||J^T r||_inf`.
    pub grad_tol: f64,
    /// Stop when the accepted step length falls below
    /// `step_tol * (1 + ||x||)`.
    pub step_tol: f64,
    pub max_iters: usize,
    /// Initial Levenberg-Marquardt damping; multiplied by 10 on rejected
    /// steps and divided by 10 on accepted ones.
    pub initial_damping: f64,
}

impl Default for NlsqConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            step_tol: 1e-14,
            max_iters: 100,
            initial_damping: 1e-3,
        }
    }
}

/// Which termination criterion fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlsqStop {
    GradTol,
    StepTol,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct NlsqSolution {
    pub x: DVector<f64>,
    /// `||J^T r||_inf` at the returned point.
    pub grad_norm: f64,
    /// Accepted plus rejected iterations performed.
    pub iters: usize,
    pub stop: NlsqStop,
    /// Sum of squared residuals at the returned point.
    pub objective: f64,
}

#[derive(Debug)]
pub enum NlsqError {
    /// Residual or Jacobian went non-finite; carries the last good iterate.
    NonFinite {
        last_good: DVector<f64>,
        iters: usize,
    },
    Dimension {
        expected: usize,
        got: usize,
    },
}

impl std::fmt::Display for NlsqError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NlsqError::NonFinite { iters, .. } => {
                write!(f, "non-finite residual/jacobian after {iters} iterations")
            }
            NlsqError::Dimension { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for NlsqError {}

fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Minimizes `||r(x)||^2` from `x_init`.
///
/// The damped normal equations `(J^T J + lambda I) dx = -J^T r` are solved by
/// Cholesky, falling back to pivoted elimination when the factorization
/// fails. The objective is non-increasing across accepted iterations.
pub fn nlsq_solve(
    prob: &dyn ResidualProblem,
    x_init: &DVector<f64>,
    cfg: &NlsqConfig,
) -> Result<NlsqSolution, NlsqError> {
    if x_init.len() != prob.n_vars() {
        return Err(NlsqError::Dimension {
            expected: prob.n_vars(),
            got: x_init.len(),
        });
    }

    let mut x = x_init.clone();
    let mut r = prob.residual(&x);
    if r.len() != prob.n_res() {
        return Err(NlsqError::Dimension {
            expected: prob.n_res(),
            got: r.len(),
        });
    }
    if !all_finite_vec(&r) {
        return Err(NlsqError::NonFinite {
            last_good: x,
            iters: 0,
        });
    }
    let mut obj = r.norm_squared();
    let mut jac = prob.jacobian(&x);
    if !all_finite_mat(&jac) {
        return Err(NlsqError::NonFinite {
            last_good: x,
            iters: 0,
        });
    }
    let mut grad = jac.transpose() * &r;
    let mut grad_norm = grad.amax();
    let mut damping = cfg.initial_damping.max(0.0);

    if grad_norm <= cfg.grad_tol {
        return Ok(NlsqSolution {
            x,
            grad_norm,
            iters: 0,
            stop: NlsqStop::GradTol,
            objective: obj,
        });
    }

    let n = prob.n_vars();
    for iter in 1..=cfg.max_iters {
        let jtj = jac.transpose() * &jac;

        let step = solve_damped(&jtj, &grad, damping, n);
        let step = match step {
            Some(s) => s,
            None => {
                // Factorization failed even with the fallback; stiffen and
                // retry next round unless damping is already extreme.
                damping = damping.max(1e-12) * 10.0;
                if damping > 1e16 {
                    return Ok(NlsqSolution {
                        x,
                        grad_norm,
                        iters: iter,
                        stop: NlsqStop::StepTol,
                        objective: obj,
                    });
                }
                continue;
            }
        };

        let x_trial = &x + &step;
        let r_trial = prob.residual(&x_trial);
        if !all_finite_vec(&r_trial) {
            return Err(NlsqError::NonFinite {
                last_good: x,
                iters: iter,
            });
        }
        let obj_trial = r_trial.norm_squared();

        if obj_trial < obj {
            let step_len = step.norm();
            x = x_trial;
            r = r_trial;
            obj = obj_trial;
            damping = if damping > 1e-16 { damping / 10.0 } else { 0.0 };

            jac = prob.jacobian(&x);
            if !all_finite_mat(&jac) {
                return Err(NlsqError::NonFinite {
                    last_good: x,
                    iters: iter,
                });
            }
            grad = jac.transpose() * &r;
            grad_norm = grad.amax();

            if grad_norm <= cfg.grad_tol {
                return Ok(NlsqSolution {
                    x,
                    grad_norm,
                    iters: iter,
                    stop: NlsqStop::GradTol,
                    objective: obj,
                });
            }
            if step_len <= cfg.step_tol * (1.0 + x.norm()) {
                return Ok(NlsqSolution {
                    x,
                    grad_norm,
                    iters: iter,
                    stop: NlsqStop::StepTol,
                    objective: obj,
                });
            }
        } else {
            damping = damping.max(1e-12) * 10.0;
            if damping > 1e16 || step.norm() <= cfg.step_tol * (1.0 + x.norm()) {
                return Ok(NlsqSolution {
                    x,
                    grad_norm,
                    iters: iter,
                    stop: NlsqStop::StepTol,
                    objective: obj,
                });
            }
        }
    }

    Ok(NlsqSolution {
        x,
        grad_norm,
        iters: cfg.max_iters,
        stop: NlsqStop::MaxIters,
        objective: obj,
    })
}

fn solve_damped(
    jtj: &DMatrix<f64>,
    grad: &DVector<f64>,
    damping: f64,
    n: usize,
) -> Option<DVector<f64>> {
    let mut a = jtj.clone();
    for i in 0..n {
        a[(i, i)] += damping;
    }
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.solve(&(-grad)));
    }
    krylov::dense_solve(&a, &(-grad)).ok()
}
