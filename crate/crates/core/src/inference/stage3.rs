//! Progressive block fitting: alternately refits `(A, B)` with `T` fixed
//! and `T` with `(A, B)` fixed, admitting blocks with ever larger time
//! offsets only once the lower blocks are fitted well.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::gauss_newton::{minimize, GnOptions, LeastSquares};
use super::stage2::StageTwoResult;
use crate::error::{QpiError, Result};
use crate::hankel::HankelArrangement;
use crate::linalg::{mat_pow, solve_sandwich, weighted_row_fit, weighted_sse};

#[derive(Clone, Copy, Debug)]
pub struct Stage3Options {
    pub phi_accept: f64,
    pub phi_improve: f64,
    pub max_passes: usize,
    pub gn_max_iter: usize,
    pub gn_rel_tol: f64,
    pub ab_max_sweeps: usize,
    pub ab_rel_tol: f64,
}

impl Default for Stage3Options {
    fn default() -> Self {
        Stage3Options {
            phi_accept: 1.5,
            phi_improve: 1e-3,
            max_passes: 25,
            gn_max_iter: 30,
            gn_rel_tol: 1e-6,
            ab_max_sweeps: 50,
            ab_rel_tol: 1e-6,
        }
    }
}

/// Blocks `H^(b)` with weights, time offsets `ϱ(b)` and the cumulative
/// effective experiment counts `N_b` used to normalize `Φ_b`.
#[derive(Clone, Debug)]
pub struct Blocks {
    pub h: Vec<DMatrix<f64>>,
    pub w: Vec<DMatrix<f64>>,
    pub offsets: Vec<u64>,
    pub n_eff: Vec<f64>,
}

impl Blocks {
    pub fn from_arrangement(arr: &HankelArrangement) -> Self {
        let slices = arr.slice_blocks();
        let mut total = 0.0;
        let mut n_eff = Vec::with_capacity(slices.len());
        for s in &slices {
            total += s.effective_count;
            n_eff.push(total);
        }
        Blocks {
            offsets: slices.iter().map(|s| s.offset).collect(),
            h: slices.iter().map(|s| s.h.clone()).collect(),
            w: slices.iter().map(|s| s.w.clone()).collect(),
            n_eff,
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn last(&self) -> usize {
        self.h.len() - 1
    }

    /// `T^ϱ(b)` for every block, by successive squaring.
    fn powers(&self, t: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(self.len());
        for (k, &o) in self.offsets.iter().enumerate() {
            let m = match k {
                _ if o == 0 => DMatrix::identity(t.nrows(), t.ncols()),
                _ if k > 0 && self.offsets[k - 1] * 2 == o => &out[k - 1] * &out[k - 1],
                _ => mat_pow(t, o),
            };
            out.push(m);
        }
        out
    }
}

/// `Φ_b` for every `b`: the weighted squared error of `A T^ϱ(b′) B` over
/// blocks `0..=b`, divided by `N_b`.
pub fn phi_all(a: &DMatrix<f64>, t: &DMatrix<f64>, b: &DMatrix<f64>, blocks: &Blocks) -> Vec<f64> {
    let pows = blocks.powers(t);
    let mut acc = 0.0;
    (0..blocks.len())
        .map(|k| {
            acc += weighted_sse(&(a * &pows[k] * b), &blocks.h[k], &blocks.w[k]);
            acc / blocks.n_eff[k]
        })
        .collect()
}

pub fn phi_b(a: &DMatrix<f64>, t: &DMatrix<f64>, b: &DMatrix<f64>, blocks: &Blocks, upto: usize) -> f64 {
    let pows = blocks.powers(t);
    let sse: f64 = (0..=upto).map(|k| weighted_sse(&(a * &pows[k] * b), &blocks.h[k], &blocks.w[k])).sum();
    sse / blocks.n_eff[upto]
}

#[derive(Clone, Debug)]
pub struct FitState {
    pub a: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_highest: usize,
    pub phi: Vec<f64>,
    pub passes: usize,
}

impl FitState {
    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn phi_last(&self) -> f64 {
        *self.phi.last().expect("at least one block")
    }

    /// `(S, T, P)`: the first `n_i` rows of `A`, `T`, and the first `n_m`
    /// columns of `B`.
    pub fn extract(&self, n_i: usize, n_m: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.a.rows(0, n_i).into_owned(), self.t.clone(), self.b.columns(0, n_m).into_owned())
    }
}

#[derive(Clone, Debug)]
pub enum Stage3Outcome {
    Success(FitState),
    /// The fit is poor at this dimension; retry with `d + 1`.
    IncreaseDimension(FitState),
}

/// Step 3.2: refits `A` and `B` with `T` fixed, replacing `T^ϱ(b′)` by
/// freely fitted `Y^(b′)` for blocks above `b_highest`.
fn fit_ab(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t: &DMatrix<f64>,
    blocks: &Blocks,
    b_highest: usize,
    opts: &Stage3Options,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let nb = blocks.len();
    let (rows, width) = blocks.h[0].shape();
    let pows = blocks.powers(t);
    let mut mats: Vec<DMatrix<f64>> = pows;
    let (mut a, mut b) = (a.clone(), b.clone());
    let h_all = DMatrix::from_fn(rows, width * nb, |r, c| blocks.h[c / width][(r, c % width)]);
    let w_all = DMatrix::from_fn(rows, width * nb, |r, c| blocks.w[c / width][(r, c % width)]);
    let h_stack_t = DMatrix::from_fn(width, rows * nb, |c, k| blocks.h[k / rows][(k % rows, c)]);
    let w_stack_t = DMatrix::from_fn(width, rows * nb, |c, k| blocks.w[k / rows][(k % rows, c)]);
    let objective = |a: &DMatrix<f64>, b: &DMatrix<f64>, mats: &[DMatrix<f64>]| -> f64 {
        (0..nb).map(|k| weighted_sse(&(a * &mats[k] * b), &blocks.h[k], &blocks.w[k])).sum()
    };
    let mut obj = f64::INFINITY;
    for _ in 0..opts.ab_max_sweeps {
        for k in b_highest + 1..nb {
            mats[k] = solve_sandwich(&a, &b, &blocks.h[k], &blocks.w[k])?;
        }
        let mb: Vec<DMatrix<f64>> = mats.iter().map(|m| m * &b).collect();
        let design = DMatrix::from_fn(a.ncols(), width * nb, |p, c| mb[c / width][(p, c % width)]);
        a = weighted_row_fit(&design, &h_all, &w_all)?;
        let am: Vec<DMatrix<f64>> = mats.iter().map(|m| &a * m).collect();
        let design_t = DMatrix::from_fn(a.ncols(), rows * nb, |p, k| am[k / rows][(k % rows, p)]);
        b = weighted_row_fit(&design_t, &h_stack_t, &w_stack_t)?.transpose();
        let next = objective(&a, &b, &mats);
        if !next.is_finite() {
            return Err(QpiError::Numeric("non-finite objective while refitting A and B".into()));
        }
        let done = obj.is_finite() && obj - next <= opts.ab_rel_tol * obj;
        obj = next;
        if done {
            break;
        }
    }
    Ok((a, b))
}

/// `Φ_b` as a least-squares problem in `vec(T)` (row-major), with `A` and
/// `B` fixed.
pub struct TransferFit<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: &'a DMatrix<f64>,
    pub blocks: &'a Blocks,
    pub upto: usize,
}

impl TransferFit<'_> {
    fn d(&self) -> usize {
        self.a.ncols()
    }

    fn unpack(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.d();
        DMatrix::from_fn(d, d, |p, q| x[p * d + q])
    }

    pub fn pack(t: &DMatrix<f64>) -> DVector<f64> {
        let d = t.nrows();
        DVector::from_fn(d * d, |k, _| t[(k / d, k % d)])
    }

    fn scales(&self) -> Vec<DMatrix<f64>> {
        let n = self.blocks.n_eff[self.upto];
        (0..=self.upto).map(|k| self.blocks.w[k].map(|w| (w / n).sqrt())).collect()
    }
}

/// Directional derivatives `D_n(E)` of `T ↦ T^n` for `n` in `offsets`
/// (each zero or a power of two), via `D_{2m} = T^m D_m + D_m T^m`.
pub fn power_derivatives(t: &DMatrix<f64>, e: &DMatrix<f64>, offsets: &[u64]) -> Vec<DMatrix<f64>> {
    let d = t.nrows();
    let mut out = Vec::with_capacity(offsets.len());
    let (mut n, mut pow, mut deriv) = (1u64, t.clone(), e.clone());
    for &o in offsets {
        if o == 0 {
            out.push(DMatrix::zeros(d, d));
            continue;
        }
        assert!(o.is_power_of_two(), "block offsets are zero or powers of two");
        while n < o {
            deriv = &pow * &deriv + &deriv * &pow;
            pow = &pow * &pow;
            n *= 2;
        }
        out.push(deriv.clone());
    }
    out
}

impl LeastSquares for TransferFit<'_> {
    fn n_params(&self) -> usize {
        self.d() * self.d()
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let t = self.unpack(x);
        let pows = self.blocks.powers(&t);
        let scales = self.scales();
        let mut out = Vec::new();
        for k in 0..=self.upto {
            let diff = self.a * &pows[k] * self.b - &self.blocks.h[k];
            out.extend(diff.iter().zip(scales[k].iter()).map(|(e, s)| e * s));
        }
        Ok(DVector::from_vec(out))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let t = self.unpack(x);
        let d = self.d();
        let scales = self.scales();
        let offsets = &self.blocks.offsets[..=self.upto];
        let columns: Vec<Vec<f64>> = (0..d * d)
            .into_par_iter()
            .map(|k| {
                let mut e = DMatrix::zeros(d, d);
                e[(k / d, k % d)] = 1.0;
                let derivs = power_derivatives(&t, &e, offsets);
                let mut col = Vec::new();
                for (blk, dm) in derivs.iter().enumerate() {
                    let v = self.a * dm * self.b;
                    col.extend(v.iter().zip(scales[blk].iter()).map(|(e, s)| e * s));
                }
                col
            })
            .collect();
        let n_res = columns[0].len();
        Ok(DMatrix::from_fn(n_res, d * d, |r, c| columns[c][r]))
    }

    fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        let t = self.unpack(x);
        let v = phi_b(self.a, &t, self.b, self.blocks, self.upto);
        Ok(if v.is_finite() { v } else { f64::INFINITY })
    }
}

fn optimize_t(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t: &DMatrix<f64>,
    blocks: &Blocks,
    upto: usize,
    opts: &Stage3Options,
) -> Result<DMatrix<f64>> {
    let problem = TransferFit { a, b, blocks, upto };
    let (x, _) = minimize(&problem, TransferFit::pack(t), opts.gn_max_iter, opts.gn_rel_tol, &GnOptions::default())?;
    Ok(problem.unpack(&x))
}

/// Runs the progressive fit starting from a stage-2 result.
pub fn stage3_progressive_fit(
    stage2: &StageTwoResult,
    arr: &HankelArrangement,
    opts: &Stage3Options,
) -> Result<Stage3Outcome> {
    let blocks = Blocks::from_arrangement(arr);
    let last = blocks.last();
    let width = blocks.h[0].ncols();
    let mut a = stage2.l.clone();
    let mut b = stage2.r.columns(0, width).into_owned();
    let mut t = stage2.t.clone();
    let phi0 = phi_all(&a, &t, &b, &blocks);
    let mut b_highest = phi0.iter().position(|&p| !(p <= opts.phi_accept)).unwrap_or(last);
    let mut prev_last = phi0[last];
    let mut prev_stop: Option<(usize, usize, f64)> = None;
    let mut best = FitState { a: a.clone(), t: t.clone(), b: b.clone(), b_highest, phi: phi0, passes: 0 };

    for pass in 1..=opts.max_passes {
        // A numerical breakdown (typically overflowing powers of an
        // unstable T) means this dimension cannot fit the data.
        (a, b) = match fit_ab(&a, &b, &t, &blocks, b_highest, opts) {
            Ok(ab) => ab,
            Err(QpiError::Numeric(_)) => return Ok(Stage3Outcome::IncreaseDimension(best)),
            Err(e) => return Err(e),
        };
        let bh_at_start = b_highest;
        let mut blk = 2.min(last);
        let phi_stop = loop {
            let mut phi = phi_b(&a, &t, &b, &blocks, blk);
            if !(blk < b_highest && phi <= opts.phi_accept) {
                t = match optimize_t(&a, &b, &t, &blocks, blk, opts) {
                    Ok(t) => t,
                    Err(QpiError::Numeric(_)) => return Ok(Stage3Outcome::IncreaseDimension(best)),
                    Err(e) => return Err(e),
                };
                phi = phi_b(&a, &t, &b, &blocks, blk);
            }
            if blk < last && phi <= opts.phi_accept {
                blk += 1;
                b_highest = b_highest.max(blk);
            } else {
                break phi;
            }
        };
        let phi = phi_all(&a, &t, &b, &blocks);
        let state = FitState { a: a.clone(), t: t.clone(), b: b.clone(), b_highest, phi, passes: pass };
        if !(best.phi_last() <= state.phi_last()) {
            best = state.clone();
        }
        let converged = blk == last && prev_last - state.phi_last() <= opts.phi_improve;
        let stalled = blk < last
            && b_highest == bh_at_start
            && matches!(prev_stop, Some((pb, pbh, pphi)) if pb == blk && pbh == b_highest && pphi - phi_stop <= opts.phi_improve);
        if converged || stalled {
            return Ok(if state.phi_last() <= opts.phi_accept {
                Stage3Outcome::Success(state)
            } else {
                Stage3Outcome::IncreaseDimension(state)
            });
        }
        prev_last = state.phi_last();
        prev_stop = Some((blk, b_highest, phi_stop));
    }
    Err(QpiError::Stage3Timeout { passes: opts.max_passes, best_phi: best.phi_last(), best: Box::new(best) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::gauss_newton::finite_difference_jacobian;
    use crate::model::random_model;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |i, j| {
            let k = (seed * 1_000_003 + (i * 97 + j * 13) as u64) % 1009;
            (k as f64 / 1009.0 - 0.5) * 0.8
        })
    }

    #[test]
    fn power_derivative_matches_finite_difference() {
        let t = random_matrix(3, 3, 1) + DMatrix::identity(3, 3) * 0.5;
        let e = random_matrix(3, 3, 2);
        let offsets = [0, 1, 2, 4, 8, 16];
        let derivs = power_derivatives(&t, &e, &offsets);
        let h = 1e-6;
        for (k, &o) in offsets.iter().enumerate() {
            let fd = (mat_pow(&(&t + &e * h), o) - mat_pow(&(&t - &e * h), o)) / (2.0 * h);
            let scale = fd.abs().max().max(1.0);
            assert!((&derivs[k] - fd).abs().max() / scale < 1e-6, "offset {o}");
        }
    }

    fn exact_blocks(d: usize, seed: u64, n_blocks: usize) -> (Blocks, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let model = random_model(d, 2, 2, seed).unwrap();
        let rows: Vec<u64> = (0..3).collect();
        let a = DMatrix::from_fn(6, d, |r, k| (model.s() * mat_pow(model.t(), rows[r / 2]))[(r % 2, k)]);
        let b = DMatrix::from_fn(d, 6, |k, c| (mat_pow(model.t(), (c / 2) as u64) * model.p())[(k, c % 2)]);
        let offsets: Vec<u64> = (0..n_blocks).map(|k| crate::schedule::rho(k)).collect();
        let h: Vec<DMatrix<f64>> = offsets.iter().map(|&o| &a * mat_pow(model.t(), o) * &b).collect();
        let w = vec![DMatrix::from_element(6, 6, 1.0); n_blocks];
        let n_eff = (1..=n_blocks).map(|k| 36.0 * k as f64).collect();
        (Blocks { h, w, offsets, n_eff }, a, model.t().clone(), b)
    }

    #[test]
    fn transfer_jacobian_matches_finite_difference() {
        let (blocks, a, t, b) = exact_blocks(3, 4, 5);
        let problem = TransferFit { a: &a, b: &b, blocks: &blocks, upto: 4 };
        let x = TransferFit::pack(&(t + random_matrix(3, 3, 9) * 0.01));
        let an = problem.jacobian(&x).unwrap();
        let fd = finite_difference_jacobian(&problem, &x, 1e-6).unwrap();
        let scale = an.abs().max();
        assert!((an - fd).abs().max() / scale < 1e-5);
    }

    #[test]
    fn phi_is_zero_for_the_true_model_and_linear_in_weights() {
        let (mut blocks, a, t, b) = exact_blocks(3, 5, 4);
        assert!(phi_all(&a, &t, &b, &blocks).iter().all(|&p| p < 1e-20));
        let t2 = &t * 0.98;
        let base = phi_b(&a, &t2, &b, &blocks, 3);
        for w in blocks.w.iter_mut() {
            *w *= 2.0;
        }
        assert!((phi_b(&a, &t2, &b, &blocks, 3) - 2.0 * base).abs() < 1e-12 * base);
    }

    #[test]
    fn gauss_newton_recovers_perturbed_transfer_matrix() {
        let (blocks, a, t, b) = exact_blocks(3, 6, 5);
        let start = &t + random_matrix(3, 3, 3) * 0.02;
        let fitted = optimize_t(&a, &b, &start, &blocks, 4, &Stage3Options::default()).unwrap();
        assert!(phi_b(&a, &fitted, &b, &blocks, 4) < 1e-16);
    }
}
