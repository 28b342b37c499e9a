//! Damped Gauss-Newton steps with a backtracking line search.

use nalgebra::{DMatrix, DVector};

use crate::error::{QpiError, Result};
use crate::linalg::solve_spd;

/// A nonlinear least-squares problem `min ||r(x)||²`.
///
/// `objective` may differ from `||r(x)||²` when the residual weights are
/// frozen for the Jacobian but recomputed for the true objective; the line
/// search always uses `objective`.
pub trait LeastSquares {
    fn n_params(&self) -> usize;
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
    fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.residuals(x)?.norm_squared())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GnOptions {
    pub max_backtracks: usize,
    pub armijo: f64,
    /// Damping escalations tried when the line search fails.
    pub max_damping_retries: usize,
}

impl Default for GnOptions {
    fn default() -> Self {
        GnOptions { max_backtracks: 30, armijo: 1e-4, max_damping_retries: 3 }
    }
}

/// Levenberg damping carried between steps.
#[derive(Clone, Copy, Debug, Default)]
pub struct Damping {
    mu: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum StepOutcome {
    Accepted {
        x: DVector<f64>,
        objective: f64,
    },
    /// No decrease was found; `x` is unchanged.
    Stalled,
}

fn value_or_inf(v: Result<f64>) -> f64 {
    match v {
        Ok(f) if f.is_finite() => f,
        _ => f64::INFINITY,
    }
}

/// One damped Gauss-Newton step from `x`, whose objective is `f0`.
pub fn gauss_newton_step<P: LeastSquares + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    f0: f64,
    damping: &mut Damping,
    opts: &GnOptions,
) -> Result<StepOutcome> {
    let r = problem.residuals(x)?;
    let j = problem.jacobian(x)?;
    if j.ncols() != problem.n_params() || j.nrows() != r.len() {
        return Err(QpiError::Dimension("Jacobian shape does not match the problem".into()));
    }
    let g = j.tr_mul(&r);
    let jtj = j.tr_mul(&j);
    let n = jtj.nrows();
    let scale = (jtj.trace() / n.max(1) as f64).max(f64::MIN_POSITIVE);
    let mut mu = damping.mu.unwrap_or(1e-8 * scale);
    for _ in 0..=opts.max_damping_retries {
        let mut a = jtj.clone();
        for k in 0..n {
            a[(k, k)] += mu;
        }
        let delta = -solve_spd(&a, &g)?;
        let slope = 2.0 * g.dot(&delta);
        if slope < 0.0 && delta.iter().all(|v| v.is_finite()) {
            let mut alpha = 1.0;
            for _ in 0..=opts.max_backtracks {
                let trial = x + &delta * alpha;
                let f = value_or_inf(problem.objective(&trial));
                if f <= f0 + opts.armijo * alpha * slope {
                    damping.mu = Some((mu / 10.0).max(1e-15 * scale));
                    return Ok(StepOutcome::Accepted { x: trial, objective: f });
                }
                alpha *= 0.5;
            }
        }
        mu *= 10.0;
    }
    damping.mu = Some(mu);
    Ok(StepOutcome::Stalled)
}

/// Iterates Gauss-Newton steps until the relative decrease drops below
/// `rel_tol`, no step is found, or `max_iter` steps were taken.
pub fn minimize<P: LeastSquares + ?Sized>(
    problem: &P,
    x0: DVector<f64>,
    max_iter: usize,
    rel_tol: f64,
    opts: &GnOptions,
) -> Result<(DVector<f64>, f64)> {
    let mut x = x0;
    let mut f = problem.objective(&x)?;
    let mut damping = Damping::default();
    for _ in 0..max_iter {
        match gauss_newton_step(problem, &x, f, &mut damping, opts)? {
            StepOutcome::Accepted { x: nx, objective } => {
                let done = f - objective <= rel_tol * f.abs();
                x = nx;
                f = objective;
                if done {
                    break;
                }
            }
            StepOutcome::Stalled => break,
        }
    }
    Ok((x, f))
}

/// Central finite-difference Jacobian, for checking analytic Jacobians.
pub fn finite_difference_jacobian<P: LeastSquares + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    h: f64,
) -> Result<DMatrix<f64>> {
    let r0 = problem.residuals(x)?;
    let mut j = DMatrix::zeros(r0.len(), x.len());
    for k in 0..x.len() {
        let step = h * x[k].abs().max(1.0);
        let mut xp = x.clone();
        xp[k] += step;
        let mut xm = x.clone();
        xm[k] -= step;
        let col = (problem.residuals(&xp)? - problem.residuals(&xm)?) / (2.0 * step);
        j.set_column(k, &col);
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl LeastSquares for Rosenbrock {
        fn n_params(&self) -> usize {
            2
        }
        fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]))
        }
        fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]))
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let (x, f) =
            minimize(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), 200, 0.0, &GnOptions::default()).unwrap();
        assert!(f < 1e-20);
        assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn finite_differences_match_analytic() {
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let fd = finite_difference_jacobian(&Rosenbrock, &x, 1e-6).unwrap();
        let an = Rosenbrock.jacobian(&x).unwrap();
        assert!((fd - an).abs().max() < 1e-7);
    }

    #[test]
    fn steps_never_increase_the_objective() {
        let mut x = DVector::from_vec(vec![2.0, -3.0]);
        let mut f = Rosenbrock.objective(&x).unwrap();
        let mut damping = Damping::default();
        for _ in 0..20 {
            match gauss_newton_step(&Rosenbrock, &x, f, &mut damping, &GnOptions::default()).unwrap() {
                StepOutcome::Accepted { x: nx, objective } => {
                    assert!(objective <= f);
                    x = nx;
                    f = objective;
                }
                StepOutcome::Stalled => break,
            }
        }
    }
}
