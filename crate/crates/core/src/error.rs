use thiserror::Error;

pub type Result<T, E = FlcmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlcmError {
    /// Invalid user-supplied settings (basis sizes, penalty parameters, grids).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or incomplete input data.
    #[error("data error: {0}")]
    Data(String),

    /// A factorization or eigen-solve failed even after stabilization.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("solver diverged: objective became {objective} after {iterations} cycles")]
    Diverged { objective: f64, iterations: usize },

    /// Wraps an error from one stage of the fitting pipeline with the stage name.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<FlcmError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FlcmError {
    pub fn in_stage(self, stage: &'static str) -> Self {
        FlcmError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures that originate in the numerics rather than in the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            FlcmError::Numerical(_) | FlcmError::Diverged { .. } => true,
            FlcmError::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
