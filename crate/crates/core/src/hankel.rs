//! Ho-Kalman (block Hankel) arrangements of experiment data and exact
//! noiseless Ho-Kalman reconstruction.
//!
//! Rows are indexed by `(a, k1, i)` and columns by `(b, k2, m)`, outermost
//! first, so row `r = (a·(l+1) + k1)·|I| + i` and column
//! `c = (b·(l+1) + k2)·|M| + m`. Cell `(r, c)` holds the frequency of
//! experiment `(i, ϱ(a) + ϱ(b) + k1 + k2, m)`. The first `|I|` rows and
//! first `|M|` columns therefore hold `t = 0` data, and block `b` is the
//! contiguous column group `b`.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{QpiError, Result};
use crate::linalg::{pinv, SortedSvd};
use crate::model::Model;
use crate::schedule::rho;

/// Relative singular-value threshold declaring exact rank.
pub const EXACT_RANK_TOL: f64 = 1e-8;
/// Relative cutoff for pseudoinverses.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Time offsets of the row (or column) index groups: `ϱ(g) + k` for
/// `g in 0..=g_bar`, `k in 0..=l`.
pub fn group_offsets(g_bar: usize, l: usize) -> Vec<u64> {
    (0..=g_bar).flat_map(|g| (0..=l as u64).map(move |k| rho(g) + k)).collect()
}

/// Block Hankel matrix with cell `(ro·n_i + i, co·n_m + m)` equal to
/// `f(row_offsets[ro] + col_offsets[co] + shift)[(i, m)]`.
pub fn block_hankel(
    f: &dyn Fn(u64) -> DMatrix<f64>,
    n_i: usize,
    n_m: usize,
    row_offsets: &[u64],
    col_offsets: &[u64],
    shift: u64,
) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(row_offsets.len() * n_i, col_offsets.len() * n_m);
    for (ro, &rt) in row_offsets.iter().enumerate() {
        for (co, &ct) in col_offsets.iter().enumerate() {
            let x = f(rt + ct + shift);
            h.view_mut((ro * n_i, co * n_m), (n_i, n_m)).copy_from(&x);
        }
    }
    h
}

/// One block of the arrangement: the columns whose flights have bases
/// `ϱ(a) + ϱ(b)`.
#[derive(Clone, Debug)]
pub struct BlockSlice {
    pub b: usize,
    pub offset: u64,
    pub h: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub cells: usize,
    /// Effective experiment count of the block: the sum over its cells of
    /// the inverse multiplicity.
    pub effective_count: f64,
}

#[derive(Clone, Debug)]
pub struct HankelArrangement {
    pub n_i: usize,
    pub n_m: usize,
    pub l: usize,
    pub a_bar: usize,
    pub b_bar: usize,
    pub h: DMatrix<f64>,
    pub h_shift: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub w_shift: DMatrix<f64>,
    /// Multiplicity of each cell's experiment in `h` (and in `h_shift`).
    pub mult: DMatrix<f64>,
    pub mult_shift: DMatrix<f64>,
    /// Dataset record index of each cell of `h`, row-major.
    pub cell_record: Vec<usize>,
    /// Variance estimate of every dataset record.
    pub record_var: Vec<f64>,
    pub row_offsets: Vec<u64>,
    pub col_offsets: Vec<u64>,
    init_labels: Vec<String>,
    meas_labels: Vec<String>,
}

impl HankelArrangement {
    /// Builds `H̃`, its one-step shift `H̃′` and inverse-variance weights
    /// divided by experiment multiplicity.
    pub fn assemble(dataset: &Dataset, pseudocount: f64) -> Result<Self> {
        let sched = dataset.schedule();
        let p = sched.params();
        let (n_i, n_m, l) = (dataset.n_init(), dataset.n_meas(), p.l);
        let row_offsets = group_offsets(p.a_bar, l);
        let col_offsets = group_offsets(p.b_bar, l);
        let (rows, cols) = (row_offsets.len() * n_i, col_offsets.len() * n_m);
        let mult_map = sched.multiplicity_with_shift(0);
        let mult_shift_map = sched.multiplicity_with_shift(1);
        let record_var: Vec<f64> = dataset.records().iter().map(|r| r.estimate_variance(pseudocount)).collect();

        let lookup = |i: usize, t: u64, m: usize| -> Result<usize> {
            dataset.index_of(i, t, m).ok_or_else(|| QpiError::CoverageGap {
                i: dataset.init_labels()[i].clone(),
                t,
                m: dataset.meas_labels()[m].clone(),
            })
        };

        let mut h = DMatrix::zeros(rows, cols);
        let mut h_shift = DMatrix::zeros(rows, cols);
        let mut w = DMatrix::zeros(rows, cols);
        let mut w_shift = DMatrix::zeros(rows, cols);
        let mut mult = DMatrix::zeros(rows, cols);
        let mut mult_shift = DMatrix::zeros(rows, cols);
        let mut cell_record = vec![0; rows * cols];
        for r in 0..rows {
            let (rt, i) = (row_offsets[r / n_i], r % n_i);
            for c in 0..cols {
                let (ct, m) = (col_offsets[c / n_m], c % n_m);
                let t = rt + ct;
                let k = lookup(i, t, m)?;
                let k1 = lookup(i, t + 1, m)?;
                let recs = dataset.records();
                h[(r, c)] = recs[k].freq();
                h_shift[(r, c)] = recs[k1].freq();
                mult[(r, c)] = mult_map[&t] as f64;
                mult_shift[(r, c)] = mult_shift_map[&(t + 1)] as f64;
                w[(r, c)] = 1.0 / (record_var[k] * mult[(r, c)]);
                w_shift[(r, c)] = 1.0 / (record_var[k1] * mult_shift[(r, c)]);
                cell_record[r * cols + c] = k;
            }
        }
        Ok(HankelArrangement {
            n_i,
            n_m,
            l,
            a_bar: p.a_bar,
            b_bar: p.b_bar,
            h,
            h_shift,
            w,
            w_shift,
            mult,
            mult_shift,
            cell_record,
            record_var,
            row_offsets,
            col_offsets,
            init_labels: dataset.init_labels().to_vec(),
            meas_labels: dataset.meas_labels().to_vec(),
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.b_bar + 1
    }

    /// Columns of `H̃` making up block `b`.
    pub fn block_columns(&self, b: usize) -> Range<usize> {
        let width = (self.l + 1) * self.n_m;
        b * width..(b + 1) * width
    }

    /// Sum of inverse multiplicities over the cells of blocks `0..=b`.
    pub fn effective_count(&self, b: usize) -> f64 {
        let end = self.block_columns(b).end;
        self.mult.columns(0, end).iter().map(|m| 1.0 / m).sum()
    }

    pub fn block(&self, b: usize) -> BlockSlice {
        let cols = self.block_columns(b);
        let h = self.h.columns(cols.start, cols.len()).into_owned();
        let w = self.w.columns(cols.start, cols.len()).into_owned();
        let effective_count = self.mult.columns(cols.start, cols.len()).iter().map(|m| 1.0 / m).sum();
        BlockSlice { b, offset: rho(b), cells: h.len(), h, w, effective_count }
    }

    pub fn slice_blocks(&self) -> Vec<BlockSlice> {
        (0..self.n_blocks()).map(|b| self.block(b)).collect()
    }

    /// Numerical rank of the observed `F̃(0)`, a lower bound on the model
    /// dimension.
    pub fn rank_at_zero(&self, rel_tol: f64) -> Result<usize> {
        let f0 = self.h.view((0, 0), (self.n_i, self.n_m)).into_owned();
        Ok(SortedSvd::new(&f0)?.numerical_rank(rel_tol))
    }

    /// `H̃` as CSV, with `i/a/k1` row labels and `m/b/k2` column labels.
    pub fn to_debug_csv(&self) -> String {
        let lp1 = self.l + 1;
        let mut out = String::from("row");
        for c in 0..self.h.ncols() {
            let (g, m) = (c / self.n_m, c % self.n_m);
            let _ = write!(out, ",{}/{}/{}", self.meas_labels[m], g / lp1, g % lp1);
        }
        out.push('\n');
        for r in 0..self.h.nrows() {
            let (g, i) = (r / self.n_i, r % self.n_i);
            let _ = write!(out, "{}/{}/{}", self.init_labels[i], g / lp1, g % lp1);
            for c in 0..self.h.ncols() {
                let _ = write!(out, ",{}", self.h[(r, c)]);
            }
            out.push('\n');
        }
        out
    }
}

/// Exact Ho-Kalman reconstruction from noiseless data: a rank-`d`
/// factorization `H = L·R` by truncated SVD gives `S` (first `m_rows` rows
/// of `L`), `P` (first `n_cols` columns of `R`) and `T = L⁺·H′·R⁺`.
pub fn ho_kalman_exact(
    h: &DMatrix<f64>,
    h_shift: &DMatrix<f64>,
    m_rows: usize,
    n_cols: usize,
    d: usize,
) -> Result<Model> {
    if h.shape() != h_shift.shape() {
        return Err(QpiError::Dimension("H and H' shapes differ".into()));
    }
    if d == 0 || d > h.nrows().min(h.ncols()) || m_rows > h.nrows() || n_cols > h.ncols() {
        return Err(QpiError::Dimension(format!("invalid sizes for a rank-{d} reconstruction")));
    }
    let svd = SortedSvd::new(h)?;
    let found = svd.numerical_rank(EXACT_RANK_TOL);
    if found != d {
        return Err(QpiError::RankMismatch { expected: d, found });
    }
    let sqrt_s = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        d,
        svd.singular_values.iter().take(d).map(|s| s.sqrt()),
    ));
    let l = svd.u.columns(0, d) * &sqrt_s;
    let r = &sqrt_s * svd.v_t.rows(0, d);
    let t = pinv(&l, PINV_CUTOFF)? * h_shift * pinv(&r, PINV_CUTOFF)?;
    let s = l.rows(0, m_rows).into_owned();
    let p = r.columns(0, n_cols).into_owned();
    Model::unlabeled(s, t, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetHeader, ExperimentRecord, ScenarioInfo, ScheduleHeader, DATASET_FORMAT};
    use crate::model::random_model;
    use crate::schedule::{Schedule, ScheduleParams};

    fn dataset_from_fn(
        params: ScheduleParams,
        n_i: usize,
        n_m: usize,
        f: impl Fn(usize, u64, usize) -> u64,
    ) -> Dataset {
        let schedule = Schedule::build(params).unwrap();
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            schedule: ScheduleHeader::from_schedule(&schedule),
            init_labels: (0..n_i).map(|i| format!("i{i}")).collect(),
            meas_labels: (0..n_m).map(|m| format!("m{m}")).collect(),
            scenario: ScenarioInfo::default(),
            seed: 0,
        };
        let mut records = Vec::new();
        for &t in schedule.t_set() {
            for i in 0..n_i {
                for m in 0..n_m {
                    records.push(ExperimentRecord { i, t, m, n: 1000, y: f(i, t, m) });
                }
            }
        }
        Dataset::new(header, records).unwrap()
    }

    #[test]
    fn single_flight_layout() {
        let ds =
            dataset_from_fn(ScheduleParams { l: 1, a_bar: 0, b_bar: 0, flight_len: 4 }, 1, 1, |_, t, _| 100 * (t + 1));
        let arr = HankelArrangement::assemble(&ds, 1.0).unwrap();
        let f = |t: u64| (100 * (t + 1)) as f64 / 1000.0;
        assert_eq!(arr.h, DMatrix::from_row_slice(2, 2, &[f(0), f(1), f(1), f(2)]));
        assert_eq!(arr.h_shift, DMatrix::from_row_slice(2, 2, &[f(1), f(2), f(2), f(3)]));
        assert_eq!(arr.mult[(0, 1)], 2.0);
        assert_eq!(arr.mult[(1, 0)], 2.0);
        assert_eq!(arr.mult[(0, 0)], 1.0);
        let v = ds.get(0, 1, 0).unwrap().estimate_variance(1.0);
        assert!((arr.w[(0, 1)] - 1.0 / (2.0 * v)).abs() < 1e-9 * arr.w[(0, 1)]);
    }

    #[test]
    fn missing_shift_data_is_a_coverage_gap() {
        let ds = dataset_from_fn(ScheduleParams { l: 1, a_bar: 0, b_bar: 0, flight_len: 3 }, 1, 1, |_, _, _| 1);
        assert!(matches!(HankelArrangement::assemble(&ds, 1.0), Err(QpiError::CoverageGap { t: 3, .. })));
    }

    #[test]
    fn block_hankel_symmetry_and_ownership() {
        let params = ScheduleParams::new(2, 2, 3);
        let ds = dataset_from_fn(params, 2, 3, |i, t, m| (7 * t + 3 * i as u64 + m as u64) % 1000);
        let arr = HankelArrangement::assemble(&ds, 1.0).unwrap();
        let mut owned = vec![0usize; ds.records().len()];
        for r in 0..arr.h.nrows() {
            for c in 0..arr.h.ncols() {
                let rec = ds.records()[arr.cell_record[r * arr.h.ncols() + c]];
                assert_eq!(rec.t, arr.row_offsets[r / 2] + arr.col_offsets[c / 3]);
                assert_eq!(rec.i, r % 2);
                assert_eq!(rec.m, c % 3);
                assert_eq!(arr.h[(r, c)], rec.freq());
                owned[arr.cell_record[r * arr.h.ncols() + c]] += 1;
            }
        }
        for (k, rec) in ds.records().iter().enumerate() {
            if owned[k] > 0 {
                let expected = ds.schedule().multiplicity()[&rec.t];
                assert_eq!(owned[k], expected);
            }
        }
    }

    #[test]
    fn blocks_are_column_groups() {
        let params = ScheduleParams::new(1, 1, 1);
        let sched = Schedule::build(params).unwrap();
        assert_eq!(sched.block_bases(0), &[0, 1]);
        assert_eq!(sched.block_bases(1), &[1, 2]);
        let ds = dataset_from_fn(params, 1, 2, |_, t, m| 10 * t + m as u64);
        let arr = HankelArrangement::assemble(&ds, 1.0).unwrap();
        let blocks = arr.slice_blocks();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[1].offset, 1);
        for blk in &blocks {
            for r in 0..blk.h.nrows() {
                for c in 0..blk.h.ncols() {
                    let (ro, co) = (r, c / 2);
                    let t = arr.row_offsets[ro] + blk.offset + co as u64;
                    assert_eq!(blk.h[(r, c)], ds.get(0, t, c % 2).unwrap().freq());
                }
            }
        }
        let total: f64 = blocks.iter().map(|b| b.effective_count).sum();
        assert!((total - arr.effective_count(1)).abs() < 1e-12);
    }

    #[test]
    fn exact_data_has_model_rank() {
        let model = random_model(3, 2, 3, 11).unwrap();
        let f = |t: u64| model.predict(t).unwrap();
        let offs = group_offsets(2, 2);
        let h = block_hankel(&f, 2, 3, &offs, &offs, 0);
        let svd = SortedSvd::new(&h).unwrap();
        assert!(svd.singular_values[3] / svd.singular_values[0] < 1e-10);
        assert_eq!(svd.numerical_rank(EXACT_RANK_TOL), 3);
    }

    #[test]
    fn blocks_factor_through_powers_of_t() {
        let model = random_model(3, 2, 2, 4).unwrap();
        let f = |t: u64| model.predict(t).unwrap();
        let rows = group_offsets(2, 2);
        let cols0 = group_offsets(0, 2);
        let a = DMatrix::from_fn(rows.len() * 2, 3, |r, k| {
            (model.s() * crate::linalg::mat_pow(model.t(), rows[r / 2]))[(r % 2, k)]
        });
        let b = DMatrix::from_fn(3, cols0.len() * 2, |k, c| {
            (crate::linalg::mat_pow(model.t(), cols0[c / 2]) * model.p())[(k, c % 2)]
        });
        for bb in 0..3usize {
            let offs: Vec<u64> = cols0.iter().map(|o| o + rho(bb)).collect();
            let hb = block_hankel(&f, 2, 2, &rows, &offs, 0);
            let pred = &a * crate::linalg::mat_pow(model.t(), rho(bb)) * &b;
            assert!((hb - pred).abs().max() < 1e-9);
        }
    }

    #[test]
    fn alternating_scalar_sequence() {
        let f = |t: u64| DMatrix::from_element(1, 1, if t % 2 == 0 { 0.3 } else { 0.7 });
        let offs = [0, 1];
        let h = block_hankel(&f, 1, 1, &offs, &offs, 0);
        let hs = block_hankel(&f, 1, 1, &offs, &offs, 1);
        let model = ho_kalman_exact(&h, &hs, 1, 1, 2).unwrap();
        for t in 0..=50 {
            assert!((model.predict(t).unwrap()[(0, 0)] - f(t)[(0, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn random_model_reconstruction() {
        let model = random_model(5, 2, 3, 21).unwrap();
        let f = |t: u64| model.predict(t).unwrap();
        let offs: Vec<u64> = (0..=3).collect();
        let h = block_hankel(&f, 2, 3, &offs, &offs, 0);
        let hs = block_hankel(&f, 2, 3, &offs, &offs, 1);
        let rec = ho_kalman_exact(&h, &hs, 2, 3, 5).unwrap();
        for t in 0..=200 {
            assert!((rec.predict(t).unwrap() - f(t)).abs().max() < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn wrong_rank_is_reported() {
        let model = random_model(3, 2, 2, 8).unwrap();
        let f = |t: u64| model.predict(t).unwrap();
        let offs: Vec<u64> = (0..=3).collect();
        let h = block_hankel(&f, 2, 2, &offs, &offs, 0);
        let hs = block_hankel(&f, 2, 2, &offs, &offs, 1);
        let err = ho_kalman_exact(&h, &hs, 2, 2, 4).unwrap_err();
        assert!(matches!(err, QpiError::RankMismatch { expected: 4, found: 3 }));
    }

    #[test]
    fn factorization_choice_does_not_change_predictions() {
        let model = random_model(4, 2, 2, 30).unwrap();
        let f = |t: u64| model.predict(t).unwrap();
        let offs: Vec<u64> = (0..=4).collect();
        let h = block_hankel(&f, 2, 2, &offs, &offs, 0);
        let hs = block_hankel(&f, 2, 2, &offs, &offs, 1);
        let a = ho_kalman_exact(&h, &hs, 2, 2, 4).unwrap();
        let perm: Vec<usize> = vec![1, 0, 3, 2, 5, 4, 7, 6, 9, 8];
        let hp = DMatrix::from_fn(10, 10, |r, c| h[(perm[r], c)]);
        let hsp = DMatrix::from_fn(10, 10, |r, c| hs[(perm[r], c)]);
        let b = ho_kalman_exact(&hp, &hsp, 2, 2, 4).unwrap();
        for t in 0..60 {
            let pa = a.predict(t).unwrap();
            let pb = b.predict(t).unwrap();
            let pb = DMatrix::from_fn(2, 2, |i, m| pb[(1 - i, m)]);
            assert!((pa - pb).abs().max() < 1e-9);
        }
    }

    #[test]
    fn debug_csv_shape() {
        let ds = dataset_from_fn(ScheduleParams::new(1, 0, 0), 1, 1, |_, t, _| t);
        let arr = HankelArrangement::assemble(&ds, 1.0).unwrap();
        let csv = arr.to_debug_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "row,m0/0/0,m0/0/1");
        assert!(lines[2].starts_with("i0/0/1,"));
    }
}
