//! Run configuration: a TOML file with a top-level scenario block and
//! `[schedule]`, `[inference]` and `[evaluation]` sections.

use std::path::Path;

use serde::Deserialize;

use crate::error::{QpiError, Result};
use crate::inference::InferenceOptions;
use crate::schedule::ScheduleParams;
use crate::sim::{drift_scenario, leakage_scenario, spin_exchange_scenario, Scenario};

pub const DEFAULT_SHOTS: u64 = 10_000;
pub const DEFAULT_GRID: &str = "0:1100:5";

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub l: usize,
    pub a_bar: usize,
    pub b_bar: usize,
    pub flight_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    #[serde(default = "d_phi_accept")]
    pub phi_accept: f64,
    #[serde(default = "d_phi_improve")]
    pub phi_improve: f64,
    #[serde(default = "d_psi_improve")]
    pub psi_improve: f64,
    #[serde(default = "d_max_passes")]
    pub max_passes: usize,
    #[serde(default = "d_beta_decay")]
    pub beta_decay: f64,
    #[serde(default = "d_pseudocount")]
    pub pseudocount: f64,
    #[serde(default = "d_max_extra")]
    pub max_extra_dimensions: usize,
    pub dimension: Option<usize>,
}

fn d_phi_accept() -> f64 {
    1.5
}
fn d_phi_improve() -> f64 {
    1e-3
}
fn d_psi_improve() -> f64 {
    1e-4
}
fn d_max_passes() -> usize {
    25
}
fn d_beta_decay() -> f64 {
    0.95
}
fn d_pseudocount() -> f64 {
    1.0
}
fn d_max_extra() -> usize {
    5
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            phi_accept: d_phi_accept(),
            phi_improve: d_phi_improve(),
            psi_improve: d_psi_improve(),
            max_passes: d_max_passes(),
            beta_decay: d_beta_decay(),
            pseudocount: d_pseudocount(),
            max_extra_dimensions: d_max_extra(),
            dimension: None,
        }
    }
}

impl InferenceSection {
    pub fn options(&self) -> Result<InferenceOptions> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(QpiError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("phi_accept", self.phi_accept)?;
        positive("phi_improve", self.phi_improve)?;
        positive("psi_improve", self.psi_improve)?;
        positive("pseudocount", self.pseudocount)?;
        if !(self.beta_decay > 0.0 && self.beta_decay < 1.0) {
            return Err(QpiError::Config(format!("beta_decay must lie in (0, 1), got {}", self.beta_decay)));
        }
        if self.max_passes == 0 {
            return Err(QpiError::Config("max_passes must be at least 1".into()));
        }
        let mut opts = InferenceOptions {
            pseudocount: self.pseudocount,
            max_extra_dimensions: self.max_extra_dimensions,
            fixed_dimension: self.dimension,
            ..InferenceOptions::default()
        };
        opts.stage3.phi_accept = self.phi_accept;
        opts.stage3.phi_improve = self.phi_improve;
        opts.stage3.max_passes = self.max_passes;
        opts.stage4.psi_improve = self.psi_improve;
        opts.stage4.beta_decay = self.beta_decay;
        Ok(opts)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "d_grid")]
    pub grid: String,
}

fn d_grid() -> String {
    DEFAULT_GRID.to_string()
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { grid: d_grid() }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Option<String>,
    pub epsilon: Option<f64>,
    #[serde(rename = "Omega")]
    pub omega: Option<f64>,
    #[serde(rename = "Delta")]
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
    #[serde(default = "d_shots")]
    pub shots: u64,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<String>,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn d_shots() -> u64 {
    DEFAULT_SHOTS
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| QpiError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        self.scenario_name()?;
        if self.shots == 0 {
            return Err(QpiError::Config("shots must be at least 1".into()));
        }
        self.schedule_params()?.validate()?;
        self.inference.options()?;
        parse_grid(&self.evaluation.grid)?;
        Ok(())
    }

    pub fn scenario_name(&self) -> Result<&str> {
        match self.scenario.as_deref() {
            None => Err(QpiError::Config("missing scenario name".into())),
            Some(s @ ("drift" | "leakage" | "spin_exchange")) => Ok(s),
            Some(s) => {
                Err(QpiError::Config(format!("unknown scenario {s:?} (expected drift, leakage or spin_exchange)")))
            }
        }
    }

    fn param(&self, name: &str, v: Option<f64>) -> Result<f64> {
        match v {
            Some(x) if x.is_finite() => Ok(x),
            Some(x) => Err(QpiError::Config(format!("{name} must be finite, got {x}"))),
            None => Err(QpiError::Config(format!("scenario {} needs {name}", self.scenario_name()?))),
        }
    }

    pub fn build_scenario(&self) -> Result<Scenario> {
        match self.scenario_name()? {
            "drift" => Ok(drift_scenario(self.param("epsilon", self.epsilon)?, self.param("Omega", self.omega)?)),
            "leakage" => leakage_scenario(self.param("Delta", self.delta)?),
            _ => Ok(spin_exchange_scenario(self.param("gamma", self.gamma)?)),
        }
    }

    pub fn schedule_params(&self) -> Result<ScheduleParams> {
        let s = &self.schedule;
        let mut p = ScheduleParams::new(s.l, s.a_bar, s.b_bar);
        if let Some(f) = s.flight_len {
            p.flight_len = f;
        }
        Ok(p)
    }

    pub fn grid(&self) -> Result<Vec<u64>> {
        parse_grid(&self.evaluation.grid)
    }
}

/// Parses `START:STOP:STEP` into the inclusive arithmetic progression
/// `START, START+STEP, ...` up to `STOP`.
pub fn parse_grid(spec: &str) -> Result<Vec<u64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(QpiError::Config(format!("grid {spec:?} is not START:STOP:STEP")));
    }
    let num = |s: &str| -> Result<u64> {
        s.trim().parse().map_err(|_| QpiError::Config(format!("grid {spec:?}: {s:?} is not a non-negative integer")))
    };
    let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
    if step == 0 || stop < start {
        return Err(QpiError::Config(format!("grid {spec:?} needs STEP > 0 and STOP >= START")));
    }
    Ok((start..=stop).step_by(step as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DRIFT: &str = r#"
scenario = "drift"
epsilon = 0.01
Omega = 0.02
seed = 7

[schedule]
l = 5
a_bar = 10
b_bar = 10
"#;

    #[test]
    fn grid_examples() {
        assert_eq!(parse_grid("0:1100:5").unwrap().len(), 221);
        assert_eq!(parse_grid("3:10:3").unwrap(), vec![3, 6, 9]);
        assert_eq!(parse_grid("4:4:1").unwrap(), vec![4]);
        for bad in ["0:10", "0:10:0", "5:1:1", "a:1:1", "-1:5:1"] {
            assert!(matches!(parse_grid(bad), Err(QpiError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::parse(DRIFT).unwrap();
        assert_eq!(cfg.shots, DEFAULT_SHOTS);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule_params().unwrap().flight_len, 12);
        let opts = cfg.inference.options().unwrap();
        assert_eq!(opts.stage3.phi_accept, 1.5);
        assert_eq!(opts.stage3.max_passes, 25);
        assert_eq!(opts.stage4.beta_decay, 0.95);
        assert_eq!(cfg.grid().unwrap().len(), 221);
        assert_eq!(cfg.build_scenario().unwrap().init_labels.len(), 2);
    }

    #[test]
    fn config_errors() {
        let missing = DRIFT.replace("scenario = \"drift\"", "");
        assert!(matches!(RunConfig::parse(&missing), Err(QpiError::Config(_))));
        let unknown = DRIFT.replace("\"drift\"", "\"lindblad\"");
        assert!(matches!(RunConfig::parse(&unknown), Err(QpiError::Config(_))));
        let no_param = DRIFT.replace("Omega = 0.02", "");
        let cfg = RunConfig::parse(&no_param).unwrap();
        assert!(matches!(cfg.build_scenario(), Err(QpiError::Config(_))));
        let typo = format!("{DRIFT}\n[inference]\nphi_acept = 2.0\n");
        assert!(matches!(RunConfig::parse(&typo), Err(QpiError::Config(_))));
        let bad_beta = format!("{DRIFT}\n[inference]\nbeta_decay = 1.5\n");
        assert!(matches!(RunConfig::parse(&bad_beta), Err(QpiError::Config(_))));
    }

    #[test]
    fn shipped_presets_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (name, n_init) in [("drift.cfg", 2), ("leakage.cfg", 4), ("spin.cfg", 3)] {
            let cfg = RunConfig::load(&dir.join(name)).unwrap();
            let s = cfg.build_scenario().unwrap();
            assert_eq!(s.init_labels.len(), n_init, "{name}");
            assert_eq!(cfg.grid().unwrap().len(), 221);
        }
    }
}
