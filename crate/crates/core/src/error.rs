use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("calibration failed: {message} (residuals: Φ(1)={phi_at_one:e}, Φ'(1)={dphi_at_one:e})")]
    Calibration {
        message: String,
        phi_at_one: f64,
        dphi_at_one: f64,
    },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("sampler failed: {0}")]
    Sampler(String),

    #[error("particle budget of {budget} node visits exceeded (alive={alive}, pruned={pruned}, killed={killed})")]
    Resource {
        budget: u64,
        visits: u64,
        alive: u64,
        pruned: u64,
        killed: u64,
    },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
