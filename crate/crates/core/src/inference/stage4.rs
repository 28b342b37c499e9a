//! Final fit of `F(t) = S T^t P` directly to all data, with model-based
//! buffered weights and the eigenvalue penalty.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::eigen_penalty::{eigen_penalty, penalty_jacobian, penalty_residuals};
use super::gauss_newton::{gauss_newton_step, Damping, GnOptions, LeastSquares, StepOutcome};
use crate::data::Dataset;
use crate::error::{QpiError, Result};

#[derive(Clone, Copy, Debug)]
pub struct Stage4Options {
    pub psi_improve: f64,
    pub beta_decay: f64,
    pub max_iter: usize,
    pub gn: GnOptions,
}

impl Default for Stage4Options {
    fn default() -> Self {
        Stage4Options { psi_improve: 1e-4, beta_decay: 0.95, max_iter: 500, gn: GnOptions::default() }
    }
}

/// Buffered weight `1 / (V + sqrt(V² + 4β²))` with `V = F(1-F)/N`. Finite,
/// positive and continuous in `F` for any `β > 0`, and close to `1/(2V)`
/// when `β ≪ V`.
pub fn buffered_weight(f: f64, n: f64, beta: f64) -> f64 {
    let v = f * (1.0 - f) / n;
    let root = (v * v + 4.0 * beta * beta).sqrt();
    if v >= 0.0 {
        1.0 / (v + root)
    } else {
        // Rationalized form avoids cancellation when V is negative.
        (root - v) / (4.0 * beta * beta)
    }
}

#[derive(Clone, Debug)]
pub struct FinalFitState {
    pub s: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub beta: Vec<f64>,
    pub psi: f64,
    pub penalty: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// `Ψ` for a dataset and buffer values, as a least-squares problem in
/// `[vec S, vec T, vec P]` (each row-major).
pub struct FinalFit<'a> {
    pub dataset: &'a Dataset,
    pub beta: Vec<f64>,
    pub d: usize,
    ts: Vec<u64>,
}

impl<'a> FinalFit<'a> {
    pub fn new(dataset: &'a Dataset, d: usize, beta: Vec<f64>) -> Self {
        FinalFit { dataset, beta, d, ts: dataset.schedule().t_set().to_vec() }
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.dataset.n_init(), self.d, self.dataset.n_meas())
    }

    pub fn pack(s: &DMatrix<f64>, t: &DMatrix<f64>, p: &DMatrix<f64>) -> DVector<f64> {
        let it =
            s.transpose().iter().chain(t.transpose().iter()).chain(p.transpose().iter()).copied().collect::<Vec<_>>();
        DVector::from_vec(it)
    }

    pub fn unpack(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (n_i, d, n_m) = self.dims();
        let s = DMatrix::from_row_slice(n_i, d, &x.as_slice()[..n_i * d]);
        let t = DMatrix::from_row_slice(d, d, &x.as_slice()[n_i * d..n_i * d + d * d]);
        let p = DMatrix::from_row_slice(d, n_m, &x.as_slice()[n_i * d + d * d..]);
        (s, t, p)
    }

    fn normalizer(&self) -> f64 {
        (self.dataset.n_init() * self.dataset.n_meas() * self.ts.len()) as f64
    }

    /// Predictions in dataset record order.
    pub fn predictions(&self, x: &DVector<f64>) -> Vec<f64> {
        let (s, t, p) = self.unpack(x);
        let (n_i, _, n_m) = self.dims();
        let mut out = vec![0.0; self.dataset.records().len()];
        for i in 0..n_i {
            let mut a = s.row(i).into_owned();
            let mut now = 0u64;
            for (tk, &tt) in self.ts.iter().enumerate() {
                while now < tt {
                    a = &a * &t;
                    now += 1;
                }
                let f = &a * &p;
                for m in 0..n_m {
                    out[(i * self.ts.len() + tk) * n_m + m] = f[m];
                }
            }
        }
        out
    }

    pub fn weights(&self, preds: &[f64]) -> Vec<f64> {
        self.dataset
            .records()
            .iter()
            .zip(preds)
            .zip(&self.beta)
            .map(|((r, &f), &b)| buffered_weight(f, r.n as f64, b))
            .collect()
    }

    pub fn data_residuals(&self, preds: &[f64], weights: &[f64]) -> Vec<f64> {
        let norm = self.normalizer();
        self.dataset
            .records()
            .iter()
            .zip(preds)
            .zip(weights)
            .map(|((r, &f), &w)| (w / norm).sqrt() * (f - r.freq()))
            .collect()
    }
}

impl LeastSquares for FinalFit<'_> {
    fn n_params(&self) -> usize {
        let (n_i, d, n_m) = self.dims();
        n_i * d + d * d + d * n_m
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let preds = self.predictions(x);
        let w = self.weights(&preds);
        let mut r = self.data_residuals(&preds, &w);
        let (_, t, _) = self.unpack(x);
        r.extend(penalty_residuals(&t));
        Ok(DVector::from_vec(r))
    }

    /// Jacobian with the weights held at their values at `x`.
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (s, t, p) = self.unpack(x);
        let (n_i, d, n_m) = self.dims();
        let n_t = self.ts.len();
        let preds = self.predictions(x);
        let w = self.weights(&preds);
        let norm = self.normalizer();
        let n_data = preds.len();
        let n_par = self.n_params();
        let (off_t, off_p) = (n_i * d, n_i * d + d * d);
        let mut jac = DMatrix::zeros(n_data + d, n_par);
        let tt = t.transpose();
        let t_max = *self.ts.last().unwrap_or(&0);

        // G_{t+1} = G_t Tᵀ + (s_i T^t)ᵀ p_mᵀ holds ∂F_{i,m}(t)/∂T.
        let pairs: Vec<(usize, usize)> = (0..n_i).flat_map(|i| (0..n_m).map(move |m| (i, m))).collect();
        let t_blocks: Vec<Vec<DMatrix<f64>>> = pairs
            .par_iter()
            .map(|&(i, m)| {
                let pm = p.column(m).transpose();
                let mut a = s.row(i).into_owned();
                let mut g = DMatrix::<f64>::zeros(d, d);
                let mut out = Vec::with_capacity(n_t);
                let mut next = 0;
                for step in 0..=t_max {
                    if next < n_t && self.ts[next] == step {
                        out.push(g.clone());
                        next += 1;
                    }
                    if step < t_max {
                        g = &g * &tt + a.transpose() * &pm;
                        a = &a * &t;
                    }
                }
                out
            })
            .collect();

        for i in 0..n_i {
            let mut a = s.row(i).into_owned();
            let mut bpow = p.clone();
            let mut now = 0u64;
            for (tk, &time) in self.ts.iter().enumerate() {
                while now < time {
                    a = &a * &t;
                    bpow = &t * &bpow;
                    now += 1;
                }
                for m in 0..n_m {
                    let row = (i * n_t + tk) * n_m + m;
                    let scale = (w[row] / norm).sqrt();
                    for k in 0..d {
                        jac[(row, i * d + k)] = scale * bpow[(k, m)];
                        jac[(row, off_p + k * n_m + m)] = scale * a[k];
                    }
                    let g = &t_blocks[i * n_m + m][tk];
                    for pp in 0..d {
                        for q in 0..d {
                            jac[(row, off_t + pp * d + q)] = scale * g[(pp, q)];
                        }
                    }
                }
            }
        }
        let pj = penalty_jacobian(&t);
        jac.view_mut((n_data, off_t), (d, d * d)).copy_from(&pj);
        Ok(jac)
    }
}

/// Minimizes `Ψ` from `(s, t, p)`. After every accepted step the buffer of
/// each experiment whose prediction is outside `[0, 1]` shrinks by the decay
/// factor; the search ends when all predictions are valid and `Ψ` no longer
/// improves by the relative threshold.
/// Slack on `[0, 1]` when judging predictions valid. Predictions for
/// experiments whose true probability is exactly 0 or 1 approach the bound
/// only asymptotically as the buffers shrink.
pub const VALIDITY_TOL: f64 = 1e-9;

fn is_valid(f: f64) -> bool {
    (-VALIDITY_TOL..=1.0 + VALIDITY_TOL).contains(&f)
}

pub fn stage4_final_fit(
    s: &DMatrix<f64>,
    t: &DMatrix<f64>,
    p: &DMatrix<f64>,
    dataset: &Dataset,
    opts: &Stage4Options,
) -> Result<FinalFitState> {
    let d = t.nrows();
    if s.shape() != (dataset.n_init(), d) || p.shape() != (d, dataset.n_meas()) {
        return Err(QpiError::Dimension("initial model does not match the dataset".into()));
    }
    let beta: Vec<f64> = dataset.records().iter().map(|r| 1.0 / r.n as f64).collect();
    let mut problem = FinalFit::new(dataset, d, beta);
    let mut x = FinalFit::pack(s, t, p);
    let mut damping = Damping::default();
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let f0 = problem.objective(&x)?;
        if !f0.is_finite() {
            return Err(QpiError::Numeric("non-finite objective in the final fit".into()));
        }
        match gauss_newton_step(&problem, &x, f0, &mut damping, &opts.gn)? {
            StepOutcome::Accepted { x: nx, objective } => {
                x = nx;
                let preds = problem.predictions(&x);
                let mut all_valid = true;
                for (b, f) in problem.beta.iter_mut().zip(&preds) {
                    if !is_valid(*f) {
                        *b *= opts.beta_decay;
                        all_valid = false;
                    }
                }
                if all_valid && f0 - objective <= opts.psi_improve * f0 {
                    converged = true;
                    break;
                }
            }
            StepOutcome::Stalled => {
                if !problem.predictions(&x).iter().all(|&f| is_valid(f)) {
                    warnings.push("final fit stopped with out-of-range predictions".into());
                } else {
                    converged = true;
                }
                break;
            }
        }
    }
    if !converged && iterations == opts.max_iter {
        warnings.push(format!("final fit reached the iteration limit ({})", opts.max_iter));
    }
    let (s, t, p) = problem.unpack(&x);
    let psi = problem.objective(&x)?;
    let penalty = eigen_penalty(&t);
    Ok(FinalFitState { s, t, p, beta: problem.beta, psi, penalty, iterations, converged, warnings })
}
