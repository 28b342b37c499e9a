//! Weighted rank-`d` factorization of `H̃` and the matching transfer matrix.

use nalgebra::DMatrix;

use crate::error::{QpiError, Result};
use crate::hankel::HankelArrangement;
use crate::linalg::{solve_sandwich, weighted_row_fit, weighted_sse, SortedSvd};

pub const ALS_MAX_ITER: usize = 200;
pub const ALS_REL_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct StageTwoResult {
    pub l: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub t: DMatrix<f64>,
    /// `Σ W (LR - H̃)²`.
    pub objective: f64,
    /// `Σ W′ (LTR - H̃′)²`.
    pub shift_objective: f64,
    pub iterations: usize,
}

/// Minimizes `Σ w (LR - h)²` over rank-`d` factors by alternating weighted
/// least squares, starting from the truncated SVD.
pub fn weighted_low_rank(
    h: &DMatrix<f64>,
    w: &DMatrix<f64>,
    d: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64, usize)> {
    if d == 0 || d > h.nrows().min(h.ncols()) {
        return Err(QpiError::Dimension(format!("rank {d} does not fit a {}x{} matrix", h.nrows(), h.ncols())));
    }
    let svd = SortedSvd::new(h)?;
    let sqrt_s = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        d,
        svd.singular_values.iter().take(d).map(|s| s.sqrt()),
    ));
    let mut l = svd.u.columns(0, d) * &sqrt_s;
    let mut r = &sqrt_s * svd.v_t.rows(0, d);
    let mut obj = weighted_sse(&(&l * &r), h, w);
    let mut iterations = 0;
    let (ht, wt) = (h.transpose(), w.transpose());
    let floor = 1e-14 * weighted_sse(h, &DMatrix::zeros(h.nrows(), h.ncols()), w);
    for it in 0..ALS_MAX_ITER {
        iterations = it + 1;
        l = weighted_row_fit(&r, h, w)?;
        r = weighted_row_fit(&l.transpose(), &ht, &wt)?.transpose();
        let next = weighted_sse(&(&l * &r), h, w);
        if !next.is_finite() || next > obj * (1.0 + 1e-9) + floor {
            return Err(QpiError::Stage2(format!("alternating least squares diverged ({obj} -> {next})")));
        }
        let done = obj - next <= ALS_REL_TOL * obj + floor;
        obj = next;
        if done {
            break;
        }
    }
    Ok((l, r, obj, iterations))
}

/// Stage 2: rank-`d` factors of `H̃` under weights `W`, then the `T`
/// minimizing `Σ W′ (LTR - H̃′)²`.
pub fn stage2_initial_model(arr: &HankelArrangement, d: usize) -> Result<StageTwoResult> {
    let (l, r, objective, iterations) = weighted_low_rank(&arr.h, &arr.w, d)?;
    let t = solve_sandwich(&l, &r, &arr.h_shift, &arr.w_shift)?;
    let shift_objective = weighted_sse(&(&l * &t * &r), &arr.h_shift, &arr.w_shift);
    if !objective.is_finite() || !shift_objective.is_finite() {
        return Err(QpiError::Stage2("non-finite objective".into()));
    }
    Ok(StageTwoResult { l, r, t, objective, shift_objective, iterations })
}
