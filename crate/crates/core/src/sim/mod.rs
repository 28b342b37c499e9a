//! Ground-truth simulators: exact YES probabilities for qubit Pauli
//! measurements under repeated application of a process, and binomially
//! sampled experiment records.

mod scenarios;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::data::{
    Dataset, DatasetHeader, ExperimentRecord, FrameData, ScenarioInfo, ScheduleHeader, TruthTable, DATASET_FORMAT,
};
use crate::error::{QpiError, Result};
use crate::schedule::Schedule;

pub use scenarios::{
    calibrate_pulse_amplitude, drift_scenario, leakage_scenario, spin_exchange_scenario, LEAKAGE_PULSE_WIDTH,
    LEAKAGE_SUBSTEPS,
};

pub type CMatrix = DMatrix<Complex64>;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)])
}

pub fn pauli_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(0., -1.), c(0., 1.), c(0., 0.)])
}

pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)])
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Pure-state density matrix `|ψ⟩⟨ψ|` from unnormalized amplitudes.
pub fn pure_state(amps: &[Complex64]) -> CMatrix {
    let v = nalgebra::DVector::from_column_slice(amps);
    let v = &v / Complex64::from(v.norm());
    &v * v.adjoint()
}

/// Single-qubit density matrix for the named Pauli eigenstate
/// (`+x`, `-x`, `+y`, `-y`, `+z`, `-z`).
pub fn qubit_state(label: &str) -> Option<CMatrix> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let amps = match label {
        "+x" => [c(s, 0.), c(s, 0.)],
        "-x" => [c(s, 0.), c(-s, 0.)],
        "+y" => [c(s, 0.), c(0., s)],
        "-y" => [c(s, 0.), c(0., -s)],
        "+z" | "0" => [c(1., 0.), c(0., 0.)],
        "-z" | "1" => [c(0., 0.), c(1., 0.)],
        _ => return None,
    };
    Some(pure_state(&amps))
}

/// How one application of the process acts on the joint state.
#[derive(Clone, Debug)]
pub enum Evolution {
    /// The same unitary every step.
    Fixed(CMatrix),
    /// Rotation about `y` by `π + ε·sin(Ω·t)` at step index `t`.
    Drift { epsilon: f64, omega: f64 },
}

/// How qubit states embed in the joint simulation space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Embedding {
    /// The joint space is the qubit.
    Qubit,
    /// The qubit is the computational block of a qutrit.
    Qutrit,
    /// The qubit is tensored with an impurity spin held in `+z`.
    WithImpurity,
}

impl Embedding {
    pub fn joint_dim(&self) -> usize {
        match self {
            Embedding::Qubit => 2,
            Embedding::Qutrit => 3,
            Embedding::WithImpurity => 4,
        }
    }

    pub fn embed_state(&self, rho: &CMatrix) -> CMatrix {
        match self {
            Embedding::Qubit => rho.clone(),
            Embedding::Qutrit => {
                let mut out = CMatrix::zeros(3, 3);
                out.view_mut((0, 0), (2, 2)).copy_from(rho);
                out
            }
            Embedding::WithImpurity => kron(rho, &qubit_state("+z").unwrap()),
        }
    }

    /// Extends a qubit observable to the joint space. On the qutrit the
    /// leaked level counts as the `-1` eigenstate.
    pub fn embed_observable(&self, o: &CMatrix) -> CMatrix {
        match self {
            Embedding::Qubit => o.clone(),
            Embedding::Qutrit => {
                let mut out = CMatrix::zeros(3, 3);
                out.view_mut((0, 0), (2, 2)).copy_from(o);
                out[(2, 2)] = c(-1., 0.);
                out
            }
            Embedding::WithImpurity => kron(o, &CMatrix::identity(2, 2)),
        }
    }

    /// Reduced qubit state: partial trace over the impurity, or the
    /// (unnormalized) computational block of a qutrit.
    pub fn reduce(&self, joint: &CMatrix) -> CMatrix {
        match self {
            Embedding::Qubit => joint.clone(),
            Embedding::Qutrit => joint.view((0, 0), (2, 2)).into_owned(),
            Embedding::WithImpurity => {
                CMatrix::from_fn(2, 2, |r, s| joint[(2 * r, 2 * s)] + joint[(2 * r + 1, 2 * s + 1)])
            }
        }
    }
}

/// A ground-truth process with its initial states and Pauli measurements.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub info: ScenarioInfo,
    pub embedding: Embedding,
    pub evolution: Evolution,
    pub init_labels: Vec<String>,
    pub init_states: Vec<CMatrix>,
    pub meas_labels: Vec<String>,
    pub observables: Vec<CMatrix>,
}

pub const PAULI_LABELS: [&str; 3] = ["X", "Y", "Z"];
pub const FRAME_STATES: [&str; 4] = ["+x", "+y", "+z", "-z"];
pub const FRAME_MEASUREMENTS: [&str; 4] = ["X", "Y", "Z", "1"];

fn drift_rotation(epsilon: f64, omega: f64, t: u64) -> CMatrix {
    let theta = std::f64::consts::PI + epsilon * (omega * t as f64).sin();
    let (s, co) = (theta / 2.0).sin_cos();
    CMatrix::from_row_slice(2, 2, &[c(co, 0.), c(-s, 0.), c(s, 0.), c(co, 0.)])
}

impl Scenario {
    pub(crate) fn new(
        name: &str,
        info: ScenarioInfo,
        embedding: Embedding,
        evolution: Evolution,
        init_labels: &[&str],
    ) -> Self {
        let init_states =
            init_labels.iter().map(|l| embedding.embed_state(&qubit_state(l).expect("known qubit label"))).collect();
        let paulis = [pauli_x(), pauli_y(), pauli_z()];
        Scenario {
            name: name.into(),
            info,
            embedding,
            evolution,
            init_labels: init_labels.iter().map(|s| s.to_string()).collect(),
            init_states,
            meas_labels: PAULI_LABELS.iter().map(|s| s.to_string()).collect(),
            observables: paulis.iter().map(|p| embedding.embed_observable(p)).collect(),
        }
    }

    /// Unitary applied at step index `t` (the `t+1`-th application).
    pub fn step_unitary(&self, t: u64) -> CMatrix {
        match &self.evolution {
            Evolution::Fixed(u) => u.clone(),
            Evolution::Drift { epsilon, omega } => drift_rotation(*epsilon, *omega, t),
        }
    }

    /// Joint states `ρ(0), ..., ρ(t_max)` starting from `rho0`.
    pub fn trajectory(&self, rho0: &CMatrix, t_max: u64) -> Vec<CMatrix> {
        let mut out = Vec::with_capacity(t_max as usize + 1);
        let mut rho = rho0.clone();
        out.push(rho.clone());
        for t in 0..t_max {
            let u = self.step_unitary(t);
            rho = &u * &rho * u.adjoint();
            out.push(rho.clone());
        }
        out
    }

    /// YES probability `(1 + Tr ρO)/2`.
    pub fn yes_probability(rho: &CMatrix, observable: &CMatrix) -> f64 {
        0.5 * (1.0 + (rho * observable).trace().re)
    }

    fn frame_matrices(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let paulis = [pauli_x(), pauli_y(), pauli_z()];
        let obs: Vec<CMatrix> = paulis.iter().map(|p| self.embedding.embed_observable(p)).collect();
        let u0 = self.step_unitary(0);
        let mut f0 = Vec::new();
        let mut f1 = Vec::new();
        for label in FRAME_STATES {
            let rho = self.embedding.embed_state(&qubit_state(label).unwrap());
            let rho1 = &u0 * &rho * u0.adjoint();
            let row = |r: &CMatrix| {
                let mut v: Vec<f64> = obs.iter().map(|o| Self::yes_probability(r, o)).collect();
                v.push(1.0);
                v
            };
            f0.push(row(&rho));
            f1.push(row(&rho1));
        }
        (f0, f1)
    }
}

/// Exact probabilities for every `t` in `0..=t_max`, with
/// `t_max = max(schedule max, grid max)`.
pub fn exact_probabilities(scenario: &Scenario, schedule: Option<&Schedule>, grid: &[u64]) -> TruthTable {
    let t_max = schedule.map(|s| s.max_t()).into_iter().chain(grid.iter().copied()).max().unwrap_or(0);
    let n_m = scenario.observables.len();
    let per_init: Vec<Vec<Vec<f64>>> = scenario
        .init_states
        .par_iter()
        .map(|rho0| {
            scenario
                .trajectory(rho0, t_max)
                .iter()
                .map(|rho| scenario.observables.iter().map(|o| Scenario::yes_probability(rho, o)).collect())
                .collect()
        })
        .collect();
    let n_i = per_init.len();
    let probs = (0..=t_max as usize).map(|t| DMatrix::from_fn(n_i, n_m, |i, m| per_init[i][t][m])).collect();
    let (f0, f1) = scenario.frame_matrices();
    TruthTable {
        scenario: scenario.info.clone(),
        init_labels: scenario.init_labels.clone(),
        meas_labels: scenario.meas_labels.clone(),
        probs,
        frame: FrameData {
            init_labels: FRAME_STATES.iter().map(|s| s.to_string()).collect(),
            meas_labels: FRAME_MEASUREMENTS.iter().map(|s| s.to_string()).collect(),
            f0,
            f1,
        },
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the random stream for experiment `(i, t, m)`.
pub fn experiment_seed(seed: u64, i: usize, t: u64, m: usize) -> u64 {
    let mut h = splitmix64(seed);
    for v in [i as u64, t, m as u64] {
        h = splitmix64(h ^ v);
    }
    h
}

/// Draws `Y ~ Binomial(N, F)` for every scheduled experiment. Each
/// experiment has its own random stream, so results do not depend on
/// evaluation order or thread count.
pub fn sample_counts(truth: &TruthTable, schedule: &Schedule, shots: u64, seed: u64) -> Result<Dataset> {
    if shots == 0 {
        return Err(QpiError::Input("shots must be at least 1".into()));
    }
    if schedule.max_t() > truth.t_max() {
        return Err(QpiError::Input(format!(
            "truth table covers t <= {}, schedule needs {}",
            truth.t_max(),
            schedule.max_t()
        )));
    }
    let n_i = truth.init_labels.len();
    let n_m = truth.meas_labels.len();
    let keys: Vec<(usize, u64, usize)> =
        (0..n_i).flat_map(|i| schedule.t_set().iter().flat_map(move |&t| (0..n_m).map(move |m| (i, t, m)))).collect();
    let records: Vec<Result<ExperimentRecord>> = keys
        .par_iter()
        .map(|&(i, t, m)| {
            let f = truth.probs[t as usize][(i, m)];
            if !(-1e-10..=1.0 + 1e-10).contains(&f) {
                return Err(QpiError::Numeric(format!("probability {f} out of range at ({i}, {t}, {m})")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(experiment_seed(seed, i, t, m));
            let dist = Binomial::new(shots, f.clamp(0.0, 1.0)).map_err(|e| QpiError::Numeric(e.to_string()))?;
            Ok(ExperimentRecord { i, t, m, n: shots, y: dist.sample(&mut rng) })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        schedule: ScheduleHeader::from_schedule(schedule),
        init_labels: truth.init_labels.clone(),
        meas_labels: truth.meas_labels.clone(),
        scenario: truth.scenario.clone(),
        seed,
    };
    Dataset::new(header, records)
}
