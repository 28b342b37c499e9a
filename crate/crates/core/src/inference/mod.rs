//! Model inference from a dataset: dimension estimate, weighted
//! low-rank initial model, progressive block fitting and the final
//! penalized fit.

pub mod eigen_penalty;
pub mod gauss_newton;
pub mod stage2;
pub mod stage3;
pub mod stage4;

use crate::data::Dataset;
use crate::dimension::{estimate_dimension, DimensionReport};
use crate::error::{QpiError, Result};
use crate::hankel::HankelArrangement;
use crate::model::Model;

pub use stage2::{stage2_initial_model, StageTwoResult};
pub use stage3::{phi_all, phi_b, stage3_progressive_fit, Blocks, FitState, Stage3Options, Stage3Outcome};
pub use stage4::{buffered_weight, stage4_final_fit, FinalFitState, Stage4Options};

#[derive(Clone, Copy, Debug)]
pub struct InferenceOptions {
    pub pseudocount: f64,
    pub stage3: Stage3Options,
    pub stage4: Stage4Options,
    /// How far above the stage-1 estimate the dimension may be raised.
    pub max_extra_dimensions: usize,
    /// Skip the dimension estimate and fit this dimension only.
    pub fixed_dimension: Option<usize>,
    pub run_stage4: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            pseudocount: 1.0,
            stage3: Stage3Options::default(),
            stage4: Stage4Options::default(),
            max_extra_dimensions: 5,
            fixed_dimension: None,
            run_stage4: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceResult {
    pub model: Model,
    pub dimension_report: DimensionReport,
    /// Dimension from the singular-value test.
    pub d_estimate: usize,
    /// Dimension of the returned model.
    pub d_final: usize,
    pub stage3: FitState,
    pub final_fit: Option<FinalFitState>,
    pub warnings: Vec<String>,
    /// Per-stage objective values, one line per event.
    pub log: Vec<String>,
}

fn phi_list(st: &FitState) -> String {
    st.phi
        .iter()
        .map(|p| if p.abs() < 1e6 { format!("{p:.6}") } else { format!("{p:.3e}") })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Runs all four stages on `dataset`.
pub fn infer(dataset: &Dataset, opts: &InferenceOptions) -> Result<InferenceResult> {
    let arr = HankelArrangement::assemble(dataset, opts.pseudocount)?;
    let report = estimate_dimension(&arr)?;
    let max_rank = arr.h.nrows().min(arr.h.ncols());
    let (start, end) = match opts.fixed_dimension {
        Some(d) => (d, d),
        None => {
            let s = report.d.max(1);
            (s, (s + opts.max_extra_dimensions).min(max_rank))
        }
    };
    if start == 0 || start > max_rank {
        return Err(QpiError::Input(format!("dimension {start} is outside 1..={max_rank}")));
    }
    let mut warnings = Vec::new();
    let mut log = vec![format!("stage 1: d_hat = {} (saturated: {})", report.d, report.saturated)];
    let mut chosen: Option<FitState> = None;
    let mut best_phi = f64::INFINITY;
    let mut note_phi = |st: &FitState| {
        if st.phi_last() < best_phi {
            best_phi = st.phi_last();
        }
    };
    for d in start..=end {
        let s2 = match stage2_initial_model(&arr, d) {
            Ok(s2) => s2,
            Err(e) if d > start => {
                warnings.push(format!("d = {d}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        log.push(format!(
            "d = {d}: stage 2 objective {:.6} shifted {:.6} after {} iterations",
            s2.objective, s2.shift_objective, s2.iterations
        ));
        match stage3_progressive_fit(&s2, &arr, &opts.stage3) {
            Ok(Stage3Outcome::Success(st)) => {
                log.push(format!("d = {d}: stage 3 accepted after {} passes, phi_b = {}", st.passes, phi_list(&st)));
                chosen = Some(st);
                break;
            }
            Ok(Stage3Outcome::IncreaseDimension(st)) => {
                log.push(format!("d = {d}: stage 3 rejected after {} passes, phi_b = {}", st.passes, phi_list(&st)));
                note_phi(&st);
            }
            Err(QpiError::Stage3Timeout { passes, best, .. }) => {
                log.push(format!("d = {d}: stage 3 pass limit {passes}, phi_b = {}", phi_list(&best)));
                if best.phi_last() <= opts.stage3.phi_accept {
                    warnings.push(format!("d = {d}: block fitting hit the {passes}-pass limit; using its best state"));
                    chosen = Some(*best);
                    break;
                }
                warnings.push(format!("d = {d}: block fitting hit the {passes}-pass limit"));
                note_phi(&best);
            }
            Err(e) => return Err(e),
        }
    }
    let Some(st) = chosen else {
        return Err(QpiError::DimensionSearchExhausted { from: start, to: end, best_phi });
    };
    let (s, t, p) = st.extract(dataset.n_init(), dataset.n_meas());
    let (s, t, p, final_fit) = if opts.run_stage4 {
        let fit = stage4_final_fit(&s, &t, &p, dataset, &opts.stage4)?;
        warnings.extend(fit.warnings.iter().cloned());
        log.push(format!(
            "stage 4: psi = {:.6} penalty = {:.6e} after {} iterations (converged: {})",
            fit.psi, fit.penalty, fit.iterations, fit.converged
        ));
        (fit.s.clone(), fit.t.clone(), fit.p.clone(), Some(fit))
    } else {
        (s, t, p, None)
    };
    let model = Model::new(s, t, p, dataset.init_labels().to_vec(), dataset.meas_labels().to_vec())?;
    Ok(InferenceResult {
        d_final: model.dim(),
        model,
        d_estimate: report.d,
        dimension_report: report,
        stage3: st,
        final_fit,
        warnings,
        log,
    })
}
