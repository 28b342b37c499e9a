//! Scoring inferred models against ground truth with trace-distance error
//! curves, plus the perfect process-tomography baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::data::{Dataset, TruthTable};
use crate::error::{QpiError, Result};
use crate::hankel::ho_kalman_exact;
use crate::linalg::{pinv, SortedSvd};
use crate::model::Model;
use crate::sim::{c, pauli_x, pauli_y, pauli_z, CMatrix, PAULI_LABELS};

/// Linear-inversion qubit state from the YES probabilities of the three
/// Pauli measurements: `ρ = (1 + r·σ)/2` with `r_k = 2F_k - 1`. No
/// physicality projection is applied.
pub fn bloch_state(fx: f64, fy: f64, fz: f64) -> CMatrix {
    let id = CMatrix::identity(2, 2);
    (id + pauli_x() * c(2.0 * fx - 1.0, 0.) + pauli_y() * c(2.0 * fy - 1.0, 0.) + pauli_z() * c(2.0 * fz - 1.0, 0.))
        * c(0.5, 0.)
}

/// `½ Σ |eig(ρ1 - ρ2)|` for Hermitian matrices of equal size.
pub fn trace_distance(rho1: &CMatrix, rho2: &CMatrix) -> Result<f64> {
    if rho1.shape() != rho2.shape() || !rho1.is_square() {
        return Err(QpiError::Input("trace distance needs square matrices of equal size".into()));
    }
    for r in [rho1, rho2] {
        if (r - r.adjoint()).iter().any(|z| z.norm() > 1e-10) {
            return Err(QpiError::Input("trace distance of a non-Hermitian matrix".into()));
        }
    }
    let diff = rho1 - rho2;
    let herm = (&diff + diff.adjoint()) * c(0.5, 0.);
    let eig = nalgebra::linalg::SymmetricEigen::new(herm);
    Ok(0.5 * eig.eigenvalues.iter().map(|e| e.abs()).sum::<f64>())
}

/// Columns of `labels` holding the X, Y and Z measurements.
fn pauli_columns(labels: &[String]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for (k, name) in PAULI_LABELS.iter().enumerate() {
        out[k] = labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| QpiError::Input(format!("measurement {name} is missing")))?;
    }
    Ok(out)
}

fn state_of_row(f: &DMatrix<f64>, i: usize, cols: &[usize; 3]) -> CMatrix {
    bloch_state(f[(i, cols[0])], f[(i, cols[1])], f[(i, cols[2])])
}

/// Markovian baseline built from exact data at `t = 0` and `t = 1` only:
/// exact Ho-Kalman on the full single-qubit tomographic frame (four frame
/// states, the three Pauli measurements and the trivial always-YES
/// measurement), with the scenario's initial states expressed in the
/// frame through their `t = 0` probabilities.
pub fn qpt_baseline(truth: &TruthTable) -> Result<Model> {
    let frame = &truth.frame;
    let to_matrix = |rows: &[Vec<f64>]| -> Result<DMatrix<f64>> {
        if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
            return Err(QpiError::BaselineInfeasible("frame data must be 4x4".into()));
        }
        Ok(DMatrix::from_fn(4, 4, |i, j| rows[i][j]))
    };
    let f0 = to_matrix(&frame.f0)?;
    let f1 = to_matrix(&frame.f1)?;
    let rank = SortedSvd::new(&f0)?.numerical_rank(1e-8);
    if rank < 4 {
        return Err(QpiError::BaselineInfeasible(format!("frame rank {rank} < 4")));
    }
    let frame_model = ho_kalman_exact(&f0, &f1, 4, 4, 4)?;
    let cols = pauli_columns(&truth.meas_labels)?;
    let frame_cols = pauli_columns(&frame.meas_labels)?;
    let trivial = frame
        .meas_labels
        .iter()
        .position(|l| l == "1")
        .ok_or_else(|| QpiError::BaselineInfeasible("frame lacks the trivial measurement".into()))?;
    let p_inv = pinv(frame_model.p(), 1e-12)?;
    let start = truth.at(0).ok_or_else(|| QpiError::Input("truth table is empty".into()))?;
    let n_i = truth.init_labels.len();
    let mut f_init = DMatrix::zeros(n_i, 4);
    for i in 0..n_i {
        for k in 0..3 {
            f_init[(i, frame_cols[k])] = start[(i, cols[k])];
        }
        f_init[(i, trivial)] = 1.0;
    }
    let s = f_init * p_inv;
    let p = DMatrix::from_fn(4, 3, |r, k| frame_model.p()[(r, frame_cols[k])]);
    Model::new(
        s,
        frame_model.t().clone(),
        p,
        truth.init_labels.clone(),
        PAULI_LABELS.iter().map(|s| s.to_string()).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub t: u64,
    pub qpi: f64,
    pub raw: Option<f64>,
    pub qpt: Option<f64>,
    pub n_avg: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ErrorCurve {
    pub rows: Vec<ErrorRow>,
}

pub const CURVE_COLUMNS: &str = "t,qpi_error,raw_error,qpt_error,n_avg";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ErrorCurve {
    /// Mean QPI error over rows with `lo <= t <= hi`.
    pub fn mean_qpi(&self, lo: u64, hi: u64) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.t >= lo && r.t <= hi).map(|r| r.qpi).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CURVE_COLUMNS}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.t, r.qpi, opt(r.raw), opt(r.qpt), r.n_avg);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == CURVE_COLUMNS => {}
            _ => return Err(QpiError::MalformedLine { line: 1, reason: format!("expected {CURVE_COLUMNS:?}") }),
        }
        let mut rows = Vec::new();
        for (k, line) in lines {
            let bad = |reason: String| QpiError::MalformedLine { line: k + 1, reason };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", f.len())));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e| bad(format!("{e}")))
                }
            };
            rows.push(ErrorRow {
                t: f[0].parse().map_err(|e| bad(format!("t: {e}")))?,
                qpi: num(f[1])?.ok_or_else(|| bad("qpi_error is empty".into()))?,
                raw: num(f[2])?,
                qpt: num(f[3])?,
                n_avg: f[4].parse().map_err(|e| bad(format!("n_avg: {e}")))?,
            });
        }
        Ok(ErrorCurve { rows })
    }
}

/// Qubit states predicted by `model` at each `t` of a sorted grid,
/// `states[k][i]` for grid point `k` and initial state `i`.
fn predicted_states(model: &Model, grid: &[u64]) -> Result<Vec<Vec<CMatrix>>> {
    let cols = pauli_columns(model.meas_labels())?;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by_key(|&k| grid[k]);
    let mut out = vec![Vec::new(); grid.len()];
    let mut a = model.s().clone();
    let mut now = 0u64;
    for k in order {
        while now < grid[k] {
            a = &a * model.t();
            now += 1;
        }
        let f = &a * model.p();
        if f.iter().any(|v| !v.is_finite()) {
            return Err(QpiError::Numeric(format!("non-finite prediction at t = {}", grid[k])));
        }
        out[k] = (0..f.nrows()).map(|i| state_of_row(&f, i, &cols)).collect();
    }
    Ok(out)
}

/// Mean trace distance between predicted and true qubit states over all
/// initial states, at every grid point; raw linear-inversion error at grid
/// points present in `dataset`; baseline error when `baseline` is given.
pub fn error_curve(
    model: &Model,
    truth: &TruthTable,
    grid: &[u64],
    dataset: Option<&Dataset>,
    baseline: Option<&Model>,
) -> Result<ErrorCurve> {
    if model.init_labels() != truth.init_labels.as_slice() {
        return Err(QpiError::Input("model and truth initial-state labels differ".into()));
    }
    if let Some(&t) = grid.iter().find(|&&t| t > truth.t_max()) {
        return Err(QpiError::Input(format!("grid point {t} exceeds the truth table (t <= {})", truth.t_max())));
    }
    let truth_cols = pauli_columns(&truth.meas_labels)?;
    let qpi = predicted_states(model, grid)?;
    let qpt = baseline.map(|b| predicted_states(b, grid)).transpose()?;
    let data_cols = dataset.map(|d| pauli_columns(d.meas_labels())).transpose()?;
    let n_i = truth.init_labels.len();
    let mut rows = Vec::with_capacity(grid.len());
    for (k, &t) in grid.iter().enumerate() {
        let ft = truth.at(t).expect("grid checked against t_max");
        let truth_states: Vec<CMatrix> = (0..n_i).map(|i| state_of_row(ft, i, &truth_cols)).collect();
        let mean = |states: &[CMatrix]| -> Result<f64> {
            let mut s = 0.0;
            for (a, b) in states.iter().zip(&truth_states) {
                s += trace_distance(a, b)?;
            }
            Ok(s / n_i as f64)
        };
        let raw = match (dataset, &data_cols) {
            (Some(ds), Some(cols)) if ds.schedule().contains(t) => {
                let f = ds.freq_matrix(t).expect("scheduled t");
                let states: Vec<CMatrix> = (0..n_i).map(|i| state_of_row(&f, i, cols)).collect();
                Some(mean(&states)?)
            }
            _ => None,
        };
        rows.push(ErrorRow {
            t,
            qpi: mean(&qpi[k])?,
            raw,
            qpt: qpt.as_ref().map(|q| mean(&q[k])).transpose()?,
            n_avg: n_i,
        });
    }
    Ok(ErrorCurve { rows })
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub const AGGREGATE_COLUMNS: &str = "t,qpi_error,qpi_stderr,raw_error,raw_stderr,qpt_error,qpt_stderr,n_runs,n_avg";

/// Merges per-run curves by `t`: mean and standard error across runs of
/// each error column, the number of runs, and the total number of averaged
/// initial states.
pub fn aggregate(curves: &[ErrorCurve]) -> String {
    #[derive(Default)]
    struct Acc {
        qpi: Vec<f64>,
        raw: Vec<f64>,
        qpt: Vec<f64>,
        n_avg: usize,
    }
    let mut by_t: BTreeMap<u64, Acc> = BTreeMap::new();
    for curve in curves {
        for r in &curve.rows {
            let acc = by_t.entry(r.t).or_default();
            acc.qpi.push(r.qpi);
            acc.raw.extend(r.raw);
            acc.qpt.extend(r.qpt);
            acc.n_avg += r.n_avg;
        }
    }
    let mut out = format!("{AGGREGATE_COLUMNS}\n");
    let pair = |v: &[f64]| -> (String, String) {
        if v.is_empty() {
            (String::new(), String::new())
        } else {
            let (m, s) = mean_and_stderr(v);
            (m.to_string(), s.to_string())
        }
    };
    for (t, acc) in by_t {
        let (qm, qs) = pair(&acc.qpi);
        let (rm, rs) = pair(&acc.raw);
        let (bm, bs) = pair(&acc.qpt);
        let _ = writeln!(out, "{t},{qm},{qs},{rm},{rs},{bm},{bs},{},{}", acc.qpi.len(), acc.n_avg);
    }
    out
}
