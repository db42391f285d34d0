//! Damped least squares (Levenberg–Marquardt) with analytic Jacobians.
//!
//! Minimizes `½‖r(x)‖²`. Steps solve `(JᵀJ + λ·diag(JᵀJ)) δ = -Jᵀr`; the
//! damping `λ` shrinks after an accepted step and grows after a rejected one.

use nalgebra::{DMatrix, DVector};

/// A least-squares problem with an analytic Jacobian.
pub trait LeastSquares {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `J[i, j] = ∂r_i/∂x_j`.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Converged when an accepted step lowers the cost by less than this
    /// relative amount.
    pub cost_tolerance: f64,
    /// Converged when `‖Jᵀr‖∞` falls below this.
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iterations: 200,
            cost_tolerance: 1e-10,
            gradient_tolerance: 1e-8,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
        }
    }
}

const MAX_DAMPING: f64 = 1e16;

#[derive(Debug, Clone)]
pub struct LmResult {
    pub x: DVector<f64>,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// `½‖r‖²` at `x`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LmResult {
    /// `(JᵀJ)⁻¹`, or `None` when singular.
    pub fn inverse_normal_matrix(&self) -> Option<DMatrix<f64>> {
        let jtj = self.jacobian.transpose() * &self.jacobian;
        jtj.clone().cholesky().map(|c| c.inverse()).or_else(|| jtj.try_inverse())
    }

    /// Parameter covariance `s²(JᵀJ)⁻¹` with `s² = ‖r‖²/(n - p)`.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let dof = self.residuals.len().saturating_sub(self.x.len());
        if dof == 0 {
            return None;
        }
        let s2 = 2.0 * self.cost / dof as f64;
        self.inverse_normal_matrix().map(|m| m * s2)
    }

}

fn cost_of(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

pub fn minimize<P: LeastSquares + ?Sized>(problem: &P, x0: DVector<f64>, cfg: &LmConfig) -> LmResult {
    let mut x = x0;
    let mut r = problem.residuals(&x);
    let mut cost = cost_of(&r);
    let mut j = problem.jacobian(&x);
    let mut lambda = cfg.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let jt = j.transpose();
        let grad = &jt * &r;
        if grad.amax() < cfg.gradient_tolerance || !cost.is_finite() {
            converged = cost.is_finite();
            break;
        }
        let jtj = &jt * &j;
        let mut accepted = false;
        while lambda < MAX_DAMPING {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let step = match a.cholesky() {
                Some(c) => c.solve(&(-&grad)),
                None => {
                    lambda *= cfg.damping_up;
                    continue;
                }
            };
            let x_new = &x + &step;
            let r_new = problem.residuals(&x_new);
            let cost_new = cost_of(&r_new);
            if cost_new.is_finite() && cost_new <= cost {
                let rel = (cost - cost_new) / cost.max(f64::MIN_POSITIVE);
                x = x_new;
                r = r_new;
                cost = cost_new;
                j = problem.jacobian(&x);
                lambda = (lambda * cfg.damping_down).max(1e-12);
                accepted = true;
                if rel < cfg.cost_tolerance {
                    converged = true;
                }
                break;
            }
            lambda *= cfg.damping_up;
        }
        if !accepted {
            // No descent direction at machine precision: a numerical minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }
    LmResult { x, residuals: r, jacobian: j, cost, iterations, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Exp {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl LeastSquares for Exp {
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_iterator(self.t.len(), self.t.iter().zip(&self.y).map(|(t, y)| x[0] * (-x[1] * t).exp() - y))
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_fn(self.t.len(), 2, |i, k| {
                let e = (-x[1] * self.t[i]).exp();
                if k == 0 {
                    e
                } else {
                    -x[0] * self.t[i] * e
                }
            })
        }
    }

    #[test]
    fn fits_exact_exponential() {
        let t: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let y = t.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        let res = minimize(&Exp { t, y }, DVector::from_vec(vec![1.0, 0.1]), &LmConfig::default());
        assert!(res.converged);
        assert!((res.x[0] - 3.0).abs() < 1e-8 && (res.x[1] - 0.7).abs() < 1e-8, "{:?}", res.x);
    }

    struct Rosenbrock;

    impl LeastSquares for Rosenbrock {
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0])
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let res = minimize(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &LmConfig::default());
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reports_iteration_limit() {
        let cfg = LmConfig { max_iterations: 2, ..LmConfig::default() };
        let res = minimize(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &cfg);
        assert!(!res.converged);
        assert_eq!(res.iterations, 2);
    }
}
