//! Soft constraint keeping the eigenvalues of `T` inside the unit disk:
//! `E(T) = Σ max(0, |λ| - 1)²`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::linalg::eigenvalues;

fn sorted_eigenvalues(t: &DMatrix<f64>) -> Vec<Complex64> {
    let mut ev = eigenvalues(t);
    ev.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.im.total_cmp(&a.im)));
    ev
}

/// `max(0, |λ| - 1)` for each eigenvalue, ordered by decreasing modulus so
/// that the residual vector varies smoothly with `T`.
pub fn penalty_residuals(t: &DMatrix<f64>) -> Vec<f64> {
    sorted_eigenvalues(t).iter().map(|l| (l.norm() - 1.0).max(0.0)).collect()
}

pub fn eigen_penalty(t: &DMatrix<f64>) -> f64 {
    penalty_residuals(t).iter().map(|r| r * r).sum()
}

/// Eigenvector of `m` for eigenvalue `lambda` by inverse iteration.
fn eigenvector(m: &DMatrix<Complex64>, lambda: Complex64) -> DVector<Complex64> {
    let d = m.nrows();
    let shift = lambda + Complex64::new(1e-10 * (1.0 + lambda.norm()), 1e-10 * (1.0 + lambda.norm()));
    let shifted = m - DMatrix::<Complex64>::identity(d, d) * shift;
    let lu = shifted.lu();
    let mut v = DVector::from_fn(d, |k, _| Complex64::new(1.0 + 0.1 * k as f64, 0.05 * k as f64));
    for _ in 0..4 {
        match lu.solve(&v) {
            Some(next) if next.iter().all(|z| z.is_finite()) => {
                let n = next.norm();
                if n == 0.0 {
                    break;
                }
                v = next / Complex64::from(n);
            }
            _ => break,
        }
    }
    v
}

/// Jacobian of [`penalty_residuals`] with respect to `T` in row-major
/// order: `∂|λ|/∂T_pq = Re(conj(λ)/|λ| · y_p x_q / (yᵀx))` with right
/// eigenvector `x` and left eigenvector `y`.
pub fn penalty_jacobian(t: &DMatrix<f64>) -> DMatrix<f64> {
    let d = t.nrows();
    let ev = sorted_eigenvalues(t);
    let tc = t.map(|v| Complex64::new(v, 0.0));
    let ttc = tc.transpose();
    let mut jac = DMatrix::zeros(ev.len(), d * d);
    for (k, &lambda) in ev.iter().enumerate() {
        let modulus = lambda.norm();
        if modulus <= 1.0 {
            continue;
        }
        let x = eigenvector(&tc, lambda);
        let y = eigenvector(&ttc, lambda);
        let denom: Complex64 = y.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        if denom.norm() < 1e-14 {
            continue;
        }
        let phase = lambda.conj() / modulus;
        for p in 0..d {
            for q in 0..d {
                jac[(k, p * d + q)] = (phase * y[p] * x[q] / denom).re;
            }
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_examples() {
        let t = DMatrix::from_row_slice(2, 2, &[1.1, 0.0, 0.0, 0.5]);
        assert!((eigen_penalty(&t) - 0.01).abs() < 1e-12);
        assert_eq!(eigen_penalty(&DMatrix::identity(3, 3)), 0.0);
    }

    fn fd_check(t: &DMatrix<f64>) {
        let d = t.nrows();
        let an = penalty_jacobian(t);
        let h = 1e-7;
        for k in 0..d * d {
            let mut tp = t.clone();
            tp[(k / d, k % d)] += h;
            let mut tm = t.clone();
            tm[(k / d, k % d)] -= h;
            let rp = penalty_residuals(&tp);
            let rm = penalty_residuals(&tm);
            for e in 0..d {
                let fd = (rp[e] - rm[e]) / (2.0 * h);
                assert!((fd - an[(e, k)]).abs() < 1e-5 * (1.0 + fd.abs()), "eig {e} param {k}: {fd} vs {}", an[(e, k)]);
            }
        }
    }

    #[test]
    fn jacobian_real_eigenvalue() {
        fd_check(&DMatrix::from_row_slice(3, 3, &[1.2, 0.3, 0.0, 0.1, 0.4, 0.2, 0.0, 0.3, 0.7]));
    }

    #[test]
    fn jacobian_complex_pair() {
        let c = 1.05 * (0.3f64).cos();
        let s = 1.05 * (0.3f64).sin();
        fd_check(&DMatrix::from_row_slice(3, 3, &[c, -s, 0.1, s, c, 0.0, 0.05, 0.0, 0.6]));
    }
}
