use thiserror::Error;

pub type Result<T> = std::result::Result<T, QpiError>;

#[derive(Debug, Error)]
pub enum QpiError {
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid gauge transform: {0}")]
    InvalidGauge(String),

    #[error("random model generation failed after {0} attempts")]
    GenerationFailed(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank mismatch: expected rank {expected}, found {found}")]
    RankMismatch { expected: usize, found: usize },

    #[error("pulse calibration failed: {0}")]
    Calibration(String),

    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("coverage gap: no record for ({i}, {t}, {m})")]
    CoverageGap { i: String, t: u64, m: String },

    #[error("duplicate record for ({i}, {t}, {m})")]
    DuplicateKey { i: String, t: u64, m: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("stage 2 failed: {0}")]
    Stage2(String),

    #[error("stage 3 did not converge within {passes} passes (best phi = {best_phi:.4e})")]
    Stage3Timeout { passes: usize, best_phi: f64, best: Box<crate::inference::stage3::FitState> },

    #[error("no model dimension in {from}..={to} produced an acceptable fit (best phi = {best_phi:.4e})")]
    DimensionSearchExhausted { from: usize, to: usize, best_phi: f64 },

    #[error("baseline infeasible: {0}")]
    BaselineInfeasible(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QpiError {
    /// Process exit code for the command-line tool: 1 for configuration and
    /// input problems, 2 for file and format problems, 3 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            QpiError::Config(_) | QpiError::Input(_) | QpiError::Dimension(_) => 1,
            QpiError::Io(_)
            | QpiError::Format(_)
            | QpiError::MalformedLine { .. }
            | QpiError::CoverageGap { .. }
            | QpiError::DuplicateKey { .. } => 2,
            _ => 3,
        }
    }
}
