//! Model dimension as the number of statistically significant singular
//! values of `H̃`.
//!
//! For each candidate `r`, the residual energy `χ_r` (the sum of squares of
//! the singular values past `r`) is compared with its expected value plus
//! one standard deviation under the hypothesis that `H̃` is a rank-`r`
//! matrix plus binomial noise. To first order the noise reaches `χ_r` only
//! through its projection onto the trailing singular subspaces, which are
//! taken from `H̃` itself. The smallest accepted `r` is the dimension.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::hankel::HankelArrangement;
use crate::linalg::SortedSvd;

/// `Σ_{i>r} s_i²`.
pub fn residual_energy(singular_values: &[f64], r: usize) -> f64 {
    singular_values.iter().skip(r).map(|s| s * s).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimensionTest {
    pub r: usize,
    pub chi: f64,
    pub mean: f64,
    pub variance: f64,
    pub accepted: bool,
}

impl DimensionTest {
    pub fn threshold(&self) -> f64 {
        self.mean + self.variance.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimensionReport {
    pub singular_values: Vec<f64>,
    pub tests: Vec<DimensionTest>,
    pub d: usize,
    /// No `r` below full rank was accepted.
    pub saturated: bool,
}

impl DimensionReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ =
            writeln!(out, "# dimension estimate: d = {}{}", self.d, if self.saturated { " (saturated)" } else { "" });
        let _ =
            writeln!(out, "# singular values are used in computed order; sampling noise can permute nearly equal ones");
        out.push_str("singular_values:");
        for s in &self.singular_values {
            let _ = write!(out, " {s:.6e}");
        }
        out.push('\n');
        out.push_str("r,chi,threshold,accepted\n");
        for t in &self.tests {
            let _ = writeln!(out, "{},{:.6e},{:.6e},{}", t.r, t.chi, t.threshold(), t.accepted);
        }
        out
    }
}

/// Expected value and variance of `χ_r` for noise that is independent
/// between experiments, with variance `var[x]` for experiment `x`, and shared
/// by every cell the experiment occupies.
///
/// `cell_exp[row * ncols + col]` names the experiment of each cell; `u` and
/// `v` hold the leading `r` left and right singular vectors as columns.
pub fn chi_moments(
    nrows: usize,
    ncols: usize,
    cell_exp: &[usize],
    var: &[f64],
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> (f64, f64) {
    let r = u.ncols();
    let n_x = var.len();
    // With projectors P_U = 1 - U Uᵀ and P_V = 1 - V Vᵀ onto the trailing
    // subspaces, M_xy = Σ_{c∈x, c'∈y} P_U[i,i'] P_V[j,j'] expands into a
    // same-cell count, same-row and same-column corrections, and Z Zᵀ with
    // Z_x = Σ_{c∈x} u_i ⊗ v_j.
    let mut m = DMatrix::<f64>::zeros(n_x, n_x);
    let mut z = DMatrix::<f64>::zeros(n_x, r * r);
    for i in 0..nrows {
        for j in 0..ncols {
            let x = cell_exp[i * ncols + j];
            m[(x, x)] += 1.0;
            for p in 0..r {
                let up = u[(i, p)];
                for q in 0..r {
                    z[(x, p * r + q)] += up * v[(j, q)];
                }
            }
        }
    }
    if r > 0 {
        m += &z * z.transpose();
        let mut subtract_shared =
            |lines: usize, len: usize, cell: &dyn Fn(usize, usize) -> usize, basis: &DMatrix<f64>| {
                for a in 0..lines {
                    let mut acc: Vec<(usize, Vec<f64>)> = Vec::new();
                    let mut pos: HashMap<usize, usize> = HashMap::new();
                    for b in 0..len {
                        let x = cell_exp[cell(a, b)];
                        let k = *pos.entry(x).or_insert_with(|| {
                            acc.push((x, vec![0.0; r]));
                            acc.len() - 1
                        });
                        for p in 0..r {
                            acc[k].1[p] += basis[(b, p)];
                        }
                    }
                    for (x, ax) in &acc {
                        for (y, ay) in &acc {
                            let dot: f64 = ax.iter().zip(ay).map(|(s, t)| s * t).sum();
                            m[(*x, *y)] -= dot;
                        }
                    }
                }
            };
        subtract_shared(nrows, ncols, &|i, j| i * ncols + j, v);
        subtract_shared(ncols, nrows, &|j, i| i * ncols + j, u);
    }
    let mut mean = 0.0;
    let mut variance = 0.0;
    for x in 0..n_x {
        mean += var[x] * m[(x, x)];
        for y in 0..n_x {
            variance += var[x] * var[y] * m[(x, y)] * m[(x, y)];
        }
    }
    (mean, 2.0 * variance)
}

/// Runs the test for `r = 0, 1, ...` on matrix `h` and stops at the first
/// accepted hypothesis.
pub fn dimension_test(h: &DMatrix<f64>, cell_exp: &[usize], var: &[f64]) -> Result<DimensionReport> {
    let svd = SortedSvd::new(h)?;
    let s: Vec<f64> = svd.singular_values.as_slice().to_vec();
    let h_rank = s.len();
    let v_all = svd.v_t.transpose();
    let mut tests = Vec::new();
    for r in 0..h_rank {
        let u = svd.u.columns(0, r).into_owned();
        let v = v_all.columns(0, r).into_owned();
        let chi = residual_energy(&s, r);
        let (mean, variance) = chi_moments(h.nrows(), h.ncols(), cell_exp, var, &u, &v);
        let accepted = chi <= mean + variance.sqrt();
        tests.push(DimensionTest { r, chi, mean, variance, accepted });
        if accepted {
            return Ok(DimensionReport { singular_values: s, tests, d: r, saturated: false });
        }
    }
    Ok(DimensionReport { singular_values: s, tests, d: h_rank, saturated: true })
}

/// Dimension estimate for an assembled arrangement, using each experiment's
/// variance estimate.
pub fn estimate_dimension(arr: &HankelArrangement) -> Result<DimensionReport> {
    let mut compact: HashMap<usize, usize> = HashMap::new();
    let mut var = Vec::new();
    let cell_exp: Vec<usize> = arr
        .cell_record
        .iter()
        .map(|&k| {
            *compact.entry(k).or_insert_with(|| {
                var.push(arr.record_var[k]);
                var.len() - 1
            })
        })
        .collect();
    dimension_test(&arr.h, &cell_exp, &var)
}
