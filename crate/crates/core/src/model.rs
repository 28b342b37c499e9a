//! Linear state-space models `F(t) = S·T^t·P`.
//!
//! States are row vectors and operators act on the right: row `i` of `S` is
//! the state prepared by initialization `i`, column `m` of `P` is the
//! property tested by measurement `m`, and `T` advances the extended state by
//! one application of the process.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{QpiError, Result};
use crate::linalg::{self, mat_pow};

/// Default upper bound on `cond(G)` accepted by [`Model::gauge_transform`].
pub const DEFAULT_MAX_GAUGE_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    s: DMatrix<f64>,
    t: DMatrix<f64>,
    p: DMatrix<f64>,
    init_labels: Vec<String>,
    meas_labels: Vec<String>,
}

impl Model {
    pub fn new(
        s: DMatrix<f64>,
        t: DMatrix<f64>,
        p: DMatrix<f64>,
        init_labels: Vec<String>,
        meas_labels: Vec<String>,
    ) -> Result<Self> {
        let d = t.nrows();
        if d == 0 {
            return Err(QpiError::Dimension("model dimension must be positive".into()));
        }
        if t.ncols() != d || s.ncols() != d || p.nrows() != d {
            return Err(QpiError::Dimension(format!(
                "S is {:?}, T is {:?}, P is {:?}",
                s.shape(),
                t.shape(),
                p.shape()
            )));
        }
        if s.nrows() != init_labels.len() || p.ncols() != meas_labels.len() {
            return Err(QpiError::Dimension(format!(
                "{} init labels for {} rows of S, {} measurement labels for {} columns of P",
                init_labels.len(),
                s.nrows(),
                meas_labels.len(),
                p.ncols()
            )));
        }
        if !(linalg::all_finite(&s) && linalg::all_finite(&t) && linalg::all_finite(&p)) {
            return Err(QpiError::Numeric("model matrices contain non-finite entries".into()));
        }
        Ok(Model { s, t, p, init_labels, meas_labels })
    }

    /// Builds a model with generated labels `i0, i1, ...` and `m0, m1, ...`.
    pub fn unlabeled(s: DMatrix<f64>, t: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        let inits = (0..s.nrows()).map(|i| format!("i{i}")).collect();
        let meas = (0..p.ncols()).map(|m| format!("m{m}")).collect();
        Model::new(s, t, p, inits, meas)
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn init_labels(&self) -> &[String] {
        &self.init_labels
    }

    pub fn meas_labels(&self) -> &[String] {
        &self.meas_labels
    }

    pub fn with_labels(mut self, init_labels: Vec<String>, meas_labels: Vec<String>) -> Result<Self> {
        if init_labels.len() != self.s.nrows() || meas_labels.len() != self.p.ncols() {
            return Err(QpiError::Dimension("label count does not match model shape".into()));
        }
        self.init_labels = init_labels;
        self.meas_labels = meas_labels;
        Ok(self)
    }

    /// `S·T^t·P`, an `|I| x |M|` matrix of predicted YES probabilities.
    pub fn predict(&self, t: u64) -> Result<DMatrix<f64>> {
        let f = &self.s * mat_pow(&self.t, t) * &self.p;
        if !linalg::all_finite(&f) {
            return Err(QpiError::Numeric(format!("prediction at t = {t} is not finite")));
        }
        Ok(f)
    }

    pub fn predict_many(&self, ts: &[u64]) -> Result<Vec<DMatrix<f64>>> {
        ts.iter().map(|&t| self.predict(t)).collect()
    }

    /// `(S·G, G⁻¹·T·G, G⁻¹·P)`, which leaves every prediction unchanged.
    pub fn gauge_transform(&self, g: &DMatrix<f64>) -> Result<Model> {
        self.gauge_transform_with_bound(g, DEFAULT_MAX_GAUGE_CONDITION)
    }

    pub fn gauge_transform_with_bound(&self, g: &DMatrix<f64>, max_condition: f64) -> Result<Model> {
        let d = self.dim();
        if g.shape() != (d, d) {
            return Err(QpiError::InvalidGauge(format!("expected {d}x{d}, got {:?}", g.shape())));
        }
        let cond = linalg::condition_number(g)?;
        if !(cond < max_condition) {
            return Err(QpiError::InvalidGauge(format!("condition number {cond:e} exceeds {max_condition:e}")));
        }
        let g_inv = g.clone().try_inverse().ok_or_else(|| QpiError::InvalidGauge("matrix is singular".into()))?;
        Model::new(
            &self.s * g,
            &g_inv * &self.t * g,
            &g_inv * &self.p,
            self.init_labels.clone(),
            self.meas_labels.clone(),
        )
    }

    /// Continuous-time generator `L = (T - 1)/Δτ`.
    pub fn extract_generator(&self, dtau: f64) -> Result<Generator> {
        if !(dtau > 0.0) {
            return Err(QpiError::Input(format!("time resolution must be positive, got {dtau}")));
        }
        let d = self.dim();
        let l = (&self.t - DMatrix::identity(d, d)) / dtau;
        Ok(Generator { l, dtau })
    }

    /// Whether every prediction for the given times lies in `[0, 1]`.
    pub fn predictions_valid(&self, ts: &[u64]) -> Result<bool> {
        for &t in ts {
            if self.predict(t)?.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            dimension: self.dim(),
            init_labels: self.init_labels.clone(),
            meas_labels: self.meas_labels.clone(),
            s: rows_of(&self.s),
            t: rows_of(&self.t),
            p: rows_of(&self.p),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Model> {
        let d = file.dimension;
        let s = matrix_from_rows(&file.s, file.init_labels.len(), d, "S")?;
        let t = matrix_from_rows(&file.t, d, d, "T")?;
        let p = matrix_from_rows(&file.p, d, file.meas_labels.len(), "P")?;
        Model::new(s, t, p, file.init_labels, file.meas_labels)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file()).expect("model serialization is infallible");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| QpiError::Format(format!("model file: {e}")))?;
        Model::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk form of a model (`.qpm`): matrices as arrays of rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub dimension: usize,
    pub init_labels: Vec<String>,
    pub meas_labels: Vec<String>,
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(QpiError::Format(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// `T ≈ 1 + L·Δτ`; the state obeys `dρ/dτ = ρ·L`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub l: DMatrix<f64>,
    pub dtau: f64,
}

impl Generator {
    pub fn transfer_matrix(&self) -> DMatrix<f64> {
        let d = self.l.nrows();
        DMatrix::identity(d, d) + &self.l * self.dtau
    }
}

const RANDOM_MODEL_ATTEMPTS: usize = 64;
/// Predictions of generated models are checked to stay in `[0, 1]` up to this time.
pub const RANDOM_MODEL_T_MAX: u64 = 1024;

/// Seeded random model for tests and benchmarks.
///
/// The transfer matrix has a conserved unit eigenvalue and `d - 1` further
/// eigenvalues with magnitudes in `[0.85, 0.98]` (complex pairs where
/// possible). The structure is hidden behind a random well-conditioned gauge.
/// Predictions stay inside `[0, 1]` for `t <= RANDOM_MODEL_T_MAX`.
pub fn random_model(d: usize, n_init: usize, n_meas: usize, seed: u64) -> Result<Model> {
    if d == 0 || n_init == 0 || n_meas == 0 {
        return Err(QpiError::Input("random_model needs d, |I|, |M| >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..RANDOM_MODEL_ATTEMPTS {
        if let Some(model) = try_random_model(d, n_init, n_meas, &mut rng) {
            return Ok(model);
        }
    }
    Err(QpiError::GenerationFailed(RANDOM_MODEL_ATTEMPTS))
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn try_random_model(d: usize, n_init: usize, n_meas: usize, rng: &mut ChaCha8Rng) -> Option<Model> {
    let k = d - 1;
    // real Jordan form of the decaying part
    let mut core = DMatrix::<f64>::zeros(k, k);
    let mut j = 0;
    while j < k {
        let r = rng.random_range(0.85..0.98);
        if j + 1 < k {
            let phi: f64 = rng.random_range(0.15..2.8);
            core[(j, j)] = r * phi.cos();
            core[(j, j + 1)] = -r * phi.sin();
            core[(j + 1, j)] = r * phi.sin();
            core[(j + 1, j + 1)] = r * phi.cos();
            j += 2;
        } else {
            core[(j, j)] = if rng.random_bool(0.5) { r } else { -r };
            j += 1;
        }
    }
    let (core, u, v) = if k > 0 {
        let q = gaussian_matrix(rng, k, k) + DMatrix::identity(k, k) * 1.5;
        if linalg::condition_number(&q).ok()? > 20.0 {
            return None;
        }
        let q_inv = q.clone().try_inverse()?;
        let core = &q_inv * core * &q;
        (core, gaussian_matrix(rng, n_init, k), gaussian_matrix(rng, k, n_meas))
    } else {
        (core, DMatrix::zeros(n_init, 0), DMatrix::zeros(0, n_meas))
    };

    // largest |u_i core^t v_m| over the checked horizon
    let mut peak: f64 = 0.0;
    let mut ut = u.clone();
    for _ in 0..=RANDOM_MODEL_T_MAX {
        let f = &ut * &v;
        peak = f.iter().fold(peak, |acc, x| acc.max(x.abs()));
        ut = &ut * &core;
    }
    let amplitude = rng.random_range(0.2..0.3);
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };

    let mut s0 = DMatrix::<f64>::zeros(n_init, d);
    let mut p0 = DMatrix::<f64>::zeros(d, n_meas);
    let mut t0 = DMatrix::<f64>::zeros(d, d);
    t0[(0, 0)] = 1.0;
    t0.view_mut((1, 1), (k, k)).copy_from(&core);
    for i in 0..n_init {
        s0[(i, 0)] = 1.0;
        for c in 0..k {
            s0[(i, c + 1)] = u[(i, c)];
        }
    }
    for m in 0..n_meas {
        p0[(0, m)] = rng.random_range(0.35..0.65);
        for c in 0..k {
            p0[(c + 1, m)] = v[(c, m)] * scale;
        }
    }

    let g = gaussian_matrix(rng, d, d) * (0.5 / (d as f64).sqrt()) + DMatrix::identity(d, d);
    if linalg::condition_number(&g).ok()? > 10.0 {
        return None;
    }
    let model = Model::unlabeled(s0, t0, p0).ok()?.gauge_transform(&g).ok()?;

    let mut st = model.s.clone();
    for _ in 0..=RANDOM_MODEL_T_MAX {
        let f = &st * &model.p;
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return None;
        }
        st = &st * &model.t;
    }
    Some(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn identity_transfer_keeps_prediction() {
        let m = Model::unlabeled(m1(1.0), m1(1.0), m1(0.5)).unwrap();
        assert_eq!(m.predict(7).unwrap(), m1(0.5));
    }

    #[test]
    fn swap_matrix_alternates() {
        let m = Model::unlabeled(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.2, 0.8]),
        )
        .unwrap();
        assert_eq!(m.predict(0).unwrap()[(0, 0)], 0.2);
        assert_eq!(m.predict(1).unwrap()[(0, 0)], 0.8);
        assert_eq!(m.predict(2).unwrap()[(0, 0)], 0.2);
    }

    #[test]
    fn prediction_matches_naive_multiplication() {
        let m = random_model(4, 2, 3, 11).unwrap();
        let mut naive = m.s().clone();
        for _ in 0..13 {
            naive = &naive * m.t();
        }
        naive *= m.p();
        assert_relative_eq!(m.predict(13).unwrap(), naive, max_relative = 1e-12, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = Model::unlabeled(DMatrix::zeros(2, 3), DMatrix::zeros(2, 2), DMatrix::zeros(2, 1)).unwrap_err();
        assert!(matches!(err, QpiError::Dimension(_)));
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        let err = Model::unlabeled(m1(f64::NAN), m1(1.0), m1(1.0)).unwrap_err();
        assert!(matches!(err, QpiError::Numeric(_)));
    }

    #[test]
    fn overflowing_prediction_is_a_numeric_error() {
        let m = Model::unlabeled(m1(1.0), m1(1e10), m1(1.0)).unwrap();
        assert!(matches!(m.predict(64), Err(QpiError::Numeric(_))));
    }

    #[test]
    fn identity_gauge_is_noop() {
        let m = random_model(3, 2, 3, 5).unwrap();
        let g = m.gauge_transform(&DMatrix::identity(3, 3)).unwrap();
        assert_relative_eq!(g.s(), m.s(), epsilon = 1e-15);
        assert_relative_eq!(g.t(), m.t(), epsilon = 1e-15);
        assert_relative_eq!(g.p(), m.p(), epsilon = 1e-15);
    }

    #[test]
    fn diagonal_gauge_preserves_predictions() {
        let m = random_model(2, 2, 3, 8).unwrap();
        let g = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5]));
        let mg = m.gauge_transform(&g).unwrap();
        for t in 0..=20 {
            let diff = (m.predict(t).unwrap() - mg.predict(t).unwrap()).abs().max();
            assert!(diff < 1e-10, "t = {t}: {diff}");
        }
    }

    #[test]
    fn singular_gauge_is_rejected() {
        let m = random_model(2, 1, 1, 3).unwrap();
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(m.gauge_transform(&g), Err(QpiError::InvalidGauge(_))));
    }

    #[test]
    fn generator_of_identity_is_zero() {
        let m = Model::unlabeled(DMatrix::identity(1, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 1)).unwrap();
        let g = m.extract_generator(0.1).unwrap();
        assert_eq!(g.l, DMatrix::zeros(2, 2));
    }

    #[test]
    fn generator_direct_arithmetic_and_round_trip() {
        let t = DMatrix::from_row_slice(2, 2, &[0.99, 0.01, 0.01, 0.99]);
        let m = Model::unlabeled(DMatrix::identity(1, 2), t.clone(), DMatrix::identity(2, 1)).unwrap();
        let g = m.extract_generator(1.0).unwrap();
        assert_relative_eq!(g.l, DMatrix::from_row_slice(2, 2, &[-0.01, 0.01, 0.01, -0.01]), epsilon = 1e-15);
        assert_eq!(g.transfer_matrix(), t);
    }

    #[test]
    fn generator_rejects_nonpositive_step() {
        let m = random_model(2, 1, 1, 1).unwrap();
        assert!(m.extract_generator(0.0).is_err());
    }

    #[test]
    fn random_model_is_deterministic() {
        assert_eq!(random_model(4, 2, 3, 99).unwrap(), random_model(4, 2, 3, 99).unwrap());
        assert_ne!(random_model(4, 2, 3, 99).unwrap(), random_model(4, 2, 3, 100).unwrap());
    }

    #[test]
    fn random_models_are_stable_and_valid() {
        let ts: Vec<u64> = (0..=64).collect();
        for seed in 0..100 {
            let m = random_model(1 + (seed as usize % 6), 2, 3, seed).unwrap();
            assert!(linalg::spectral_radius(m.t()) <= 1.0 + 1e-12, "seed {seed}");
            assert!(m.predictions_valid(&ts).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let m = random_model(3, 2, 3, 17)
            .unwrap()
            .with_labels(vec!["+z".into(), "+x".into()], vec!["X".into(), "Y".into(), "Z".into()])
            .unwrap();
        let text = m.to_json();
        assert!(text.contains("\"dimension\"") && text.contains("\"init_labels\"") && text.contains("\"T\""));
        let back = Model::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
    }
}
