//! Dense linear-algebra helpers shared by the realization and fitting code.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{QpiError, Result};

/// `m^n` by repeated squaring; `m^0` is the identity.
pub fn mat_pow(m: &DMatrix<f64>, mut n: u64) -> DMatrix<f64> {
    let d = m.nrows();
    let mut result = DMatrix::identity(d, d);
    if n == 0 {
        return result;
    }
    let mut base = m.clone();
    loop {
        if n & 1 == 1 {
            result = &result * &base;
        }
        n >>= 1;
        if n == 0 {
            break;
        }
        base = &base * &base;
    }
    result
}

/// Thin SVD with singular values sorted in decreasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

impl SortedSvd {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(QpiError::Numeric("SVD of a matrix with non-finite entries".into()));
        }
        let mut svd = m.clone().svd(true, true);
        svd.sort_by_singular_values();
        let u = svd.u.ok_or_else(|| QpiError::Numeric("SVD did not return U".into()))?;
        let v_t = svd.v_t.ok_or_else(|| QpiError::Numeric("SVD did not return V^T".into()))?;
        Ok(SortedSvd { u, singular_values: svd.singular_values.iter().copied().collect(), v_t })
    }

    /// Number of singular values with `s_i / s_1 >= rel_tol`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let s1 = self.singular_values.first().copied().unwrap_or(0.0);
        if s1 == 0.0 {
            return 0;
        }
        self.singular_values.iter().filter(|&&s| s / s1 >= rel_tol).count()
    }
}

/// Moore-Penrose pseudoinverse with a cutoff relative to the largest singular value.
pub fn pinv(m: &DMatrix<f64>, rel_cutoff: f64) -> Result<DMatrix<f64>> {
    let svd = SortedSvd::new(m)?;
    let s1 = svd.singular_values.first().copied().unwrap_or(0.0);
    let k = svd.singular_values.len();
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for j in 0..k {
        let s = svd.singular_values[j];
        if s1 == 0.0 || s / s1 < rel_cutoff {
            continue;
        }
        let v = svd.v_t.row(j).transpose();
        let u = svd.u.column(j).transpose();
        out += (v * u) / s;
    }
    Ok(out)
}

/// 2-norm condition number; infinite for singular matrices.
pub fn condition_number(m: &DMatrix<f64>) -> Result<f64> {
    let svd = SortedSvd::new(m)?;
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let smin = svd.singular_values.last().copied().unwrap_or(0.0);
    Ok(if smin == 0.0 { f64::INFINITY } else { smax / smin })
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    m.clone().complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Solves the symmetric positive semi-definite system `a x = b`, falling back
/// to a pseudoinverse when Cholesky fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let p = pinv(a, 1e-12)?;
    Ok(p * b)
}

/// Minimizes `sum_ij w_ij ((l x r)_ij - h_ij)^2` over the `d1 x d2` matrix `x`.
///
/// The normal equations are assembled row by row of `l`, which keeps the cost
/// at `O(rows * (cols * d2^2 + d1^2 d2^2))`.
pub fn solve_sandwich(l: &DMatrix<f64>, r: &DMatrix<f64>, h: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, d1) = l.shape();
    let (d2, cols) = r.shape();
    if h.shape() != (rows, cols) || w.shape() != (rows, cols) {
        return Err(QpiError::Dimension(format!(
            "sandwich fit: target {:?}, weights {:?}, expected ({rows}, {cols})",
            h.shape(),
            w.shape()
        )));
    }
    let n = d1 * d2;
    let mut normal = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut c = DMatrix::<f64>::zeros(d2, d2);
    let mut g = DVector::<f64>::zeros(d2);
    for i in 0..rows {
        c.fill(0.0);
        g.fill(0.0);
        for j in 0..cols {
            let wij = w[(i, j)];
            if wij == 0.0 {
                continue;
            }
            let rc = r.column(j);
            c.ger(wij, &rc, &rc, 1.0);
            g.axpy(wij * h[(i, j)], &rc, 1.0);
        }
        for p in 0..d1 {
            let lp = l[(i, p)];
            if lp == 0.0 {
                continue;
            }
            for q in 0..d2 {
                rhs[p * d2 + q] += lp * g[q];
            }
            for pp in 0..d1 {
                let lpp = lp * l[(i, pp)];
                if lpp == 0.0 {
                    continue;
                }
                for q in 0..d2 {
                    for qq in 0..d2 {
                        normal[(p * d2 + q, pp * d2 + qq)] += lpp * c[(q, qq)];
                    }
                }
            }
        }
    }
    let x = solve_spd(&normal, &rhs)?;
    Ok(DMatrix::from_fn(d1, d2, |p, q| x[p * d2 + q]))
}

/// Weighted least squares for each row of `x` in `x · design ≈ target`:
/// row `i` minimizes `sum_j w_ij (x_i · design_j - target_ij)^2` where
/// `design_j` is column `j` of `design`.
pub fn weighted_row_fit(design: &DMatrix<f64>, target: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = design.nrows();
    let rows = target.nrows();
    let mut out = DMatrix::zeros(rows, d);
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    for i in 0..rows {
        a.fill(0.0);
        b.fill(0.0);
        for j in 0..design.ncols() {
            let wij = w[(i, j)];
            if wij == 0.0 {
                continue;
            }
            let col = design.column(j);
            a.ger(wij, &col, &col, 1.0);
            b.axpy(wij * target[(i, j)], &col, 1.0);
        }
        let x = solve_spd(&a, &b)?;
        out.row_mut(i).copy_from(&x.transpose());
    }
    Ok(out)
}

/// Weighted squared error `sum w (a - b)^2`.
pub fn weighted_sse(a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).zip(w.iter()).map(|((x, y), wt)| wt * (x - y) * (x - y)).sum()
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}
