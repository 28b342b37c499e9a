use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::data::ScenarioInfo;
use crate::error::{QpiError, Result};

use super::{c, kron, pauli_x, pauli_y, pauli_z, CMatrix, Embedding, Evolution, Scenario};

/// Width of the Gaussian control pulse, in time steps.
pub const LEAKAGE_PULSE_WIDTH: f64 = 0.25;
/// Sub-intervals per time step for the Magnus pulse integration.
pub const LEAKAGE_SUBSTEPS: usize = 256;

fn info(name: &str, params: &[(&str, f64)]) -> ScenarioInfo {
    ScenarioInfo {
        name: name.into(),
        parameters: params.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
    }
}

/// Intended bit flip about `y` whose angle drifts as `π + ε·sin(Ω·t)`.
pub fn drift_scenario(epsilon: f64, omega: f64) -> Scenario {
    Scenario::new(
        "drift",
        info("drift", &[("epsilon", epsilon), ("Omega", omega)]),
        Embedding::Qubit,
        Evolution::Drift { epsilon, omega },
        &["+z", "+x"],
    )
}

fn pulse_envelope(tau: f64) -> f64 {
    (-((tau - 0.5) / LEAKAGE_PULSE_WIDTH).powi(2)).exp()
}

fn leakage_hamiltonian(omega: f64, delta: f64) -> CMatrix {
    let r2 = 2f64.sqrt();
    CMatrix::from_row_slice(
        3,
        3,
        &[
            c(0., 0.),
            c(omega, 0.),
            c(0., 0.),
            c(omega, 0.),
            c(0., 0.),
            c(r2 * omega, 0.),
            c(0., 0.),
            c(r2 * omega, 0.),
            c(delta, 0.),
        ],
    )
}

fn expm_i(h: &CMatrix, dt: f64) -> CMatrix {
    (h * c(0., -dt)).exp()
}

/// Fourth-order Magnus propagator of `H(τ)` over one time step split into
/// `substeps` sub-intervals, each advanced by one matrix exponential of the
/// two-point Gauss expansion.
fn magnus_propagator(h: &dyn Fn(f64) -> CMatrix, dim: usize, substeps: usize) -> CMatrix {
    let dt = 1.0 / substeps as f64;
    let offset = 3f64.sqrt() / 6.0;
    let mut u = CMatrix::identity(dim, dim);
    for k in 0..substeps {
        let a1 = h((k as f64 + 0.5 - offset) * dt) * c(0., -1.);
        let a2 = h((k as f64 + 0.5 + offset) * dt) * c(0., -1.);
        let commutator = &a2 * &a1 - &a1 * &a2;
        let omega = (&a1 + &a2) * c(0.5 * dt, 0.) + commutator * c(3f64.sqrt() / 12.0 * dt * dt, 0.);
        u = omega.exp() * u;
    }
    u
}

/// Propagator of one Gaussian pulse with peak `omega0`.
pub(crate) fn pulse_propagator(omega0: f64, delta: f64, substeps: usize) -> CMatrix {
    magnus_propagator(&|tau| leakage_hamiltonian(omega0 * pulse_envelope(tau), delta), 3, substeps)
}

/// Rotation angle the pulse produces on `{|0⟩, |1⟩}` with the third level
/// removed.
fn qubit_rotation_angle(omega0: f64) -> f64 {
    let u = magnus_propagator(&|tau| pauli_x() * c(omega0 * pulse_envelope(tau), 0.), 2, LEAKAGE_SUBSTEPS);
    2.0 * (-u[(1, 0)].im).atan2(u[(0, 0)].re)
}

/// Peak amplitude for which the pulse is an exact `π` rotation on the
/// computational subspace, found by bisection.
pub fn calibrate_pulse_amplitude() -> Result<f64> {
    let (mut lo, mut hi) = (0.0, 1.0);
    while qubit_rotation_angle(hi) < PI {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(QpiError::Calibration("could not bracket a pi rotation".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if qubit_rotation_angle(mid) < PI {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi {
            break;
        }
    }
    let omega0 = 0.5 * (lo + hi);
    if (qubit_rotation_angle(omega0) - PI).abs() > 1e-10 {
        return Err(QpiError::Calibration("bisection did not converge".into()));
    }
    Ok(omega0)
}

/// Three-level anharmonic system driven by calibrated Gaussian bit-flip
/// pulses, with third-level detuning `delta`.
pub fn leakage_scenario(delta: f64) -> Result<Scenario> {
    let omega0 = calibrate_pulse_amplitude()?;
    let u = pulse_propagator(omega0, delta, LEAKAGE_SUBSTEPS);
    Ok(Scenario::new(
        "leakage",
        info("leakage", &[("Delta", delta)]),
        Embedding::Qutrit,
        Evolution::Fixed(u),
        &["0", "1", "+x", "+y"],
    ))
}

/// Qubit coupled to an impurity spin by isotropic exchange of strength
/// `gamma`, evolved for one time unit per step.
pub fn spin_exchange_scenario(gamma: f64) -> Scenario {
    let h = kron(&pauli_x(), &pauli_x()) + kron(&pauli_y(), &pauli_y()) + kron(&pauli_z(), &pauli_z());
    let u = expm_i(&(h * c(gamma, 0.)), 1.0);
    Scenario::new(
        "spin_exchange",
        info("spin_exchange", &[("gamma", gamma)]),
        Embedding::WithImpurity,
        Evolution::Fixed(u),
        &["+x", "+y", "+z"],
    )
}
