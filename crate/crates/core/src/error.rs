use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("point {point:?} lies outside the chart domain")]
    OutOfChart { point: Vec<f64> },

    #[error("trajectory left the chart domain at t = {t}")]
    ChartExit { t: f64 },

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("step budget of {0} exhausted")]
    StepBudget(usize),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate tangent frame at sigma = {0:?}")]
    DegenerateFrame(Vec<f64>),

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("search failed: {0}")]
    SearchFailed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("scenario `{scenario}`: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<LabError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn in_scenario(self, name: &str) -> Self {
        LabError::Scenario {
            scenario: name.to_string(),
            source: Box::new(self),
        }
    }

    /// True for configuration errors, also when wrapped in a scenario context.
    pub fn is_config(&self) -> bool {
        match self {
            LabError::Config(_) => true,
            LabError::Scenario { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
