use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("{what} is not positive definite{}", step_suffix(*.step))]
    NotPositiveDefinite { what: String, step: Option<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {step}: only {got} samples, at least {min} required; collect more rollouts")]
    InsufficientSamples { step: usize, got: usize, min: usize },

    #[error("{what} is singular; increase the covariance jitter")]
    Singular { what: String },

    #[error(
        "timestep {step}: B_d is rank deficient (smallest singular value {min_singular:e}); \
         the closed-form policy update requires full column rank"
    )]
    RankDeficient { step: usize, min_singular: f64 },

    #[error("surrogate curvature is ill-conditioned (condition number {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("innovation variance {value:e} at timestep {step} is not positive")]
    InnovationVariance { step: usize, value: f64 },

    #[error("timestep {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(k) => format!(" at timestep {k}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn dim(
        what: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn not_pd(what: impl Into<String>) -> Self {
        Error::NotPositiveDefinite {
            what: what.into(),
            step: None,
        }
    }

    /// Wraps an error with the (1-based) timestep it occurred at.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::AtStep { .. } => self,
            other => Error::AtStep {
                step,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
