use std::fmt;
use std::path::PathBuf;

/// Pipeline stage, used to tag failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    /// Reading an input file.
    Input,
    Explore,
    Baseline,
    Collect,
    Fit,
    Observe,
    Smooth,
    Optimize,
    Evaluate,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Input => "input",
            Stage::Explore => "explore",
            Stage::Baseline => "baseline",
            Stage::Collect => "collect",
            Stage::Fit => "fit",
            Stage::Observe => "observe",
            Stage::Smooth => "smooth",
            Stage::Optimize => "optimize",
            Stage::Evaluate => "evaluate",
            Stage::Export => "export",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, #[source] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Core(#[from] socem_core::Error),
    #[error("{0}")]
    Invalid(String),
}

/// A failure inside the loop, with enough context to replay it.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub iteration: Option<usize>,
    pub seed: u64,
    pub source: anyhow::Error,
}

impl StageError {
    pub fn new(stage: Stage, iteration: Option<usize>, seed: u64, source: anyhow::Error) -> Self {
        Self {
            stage,
            iteration,
            seed,
            source,
        }
    }

    /// Process exit code: 3 for configuration, 4 for file input/output, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.stage {
            Stage::Config => 3,
            Stage::Input | Stage::Export => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[stage={}", self.stage)?;
        if let Some(i) = self.iteration {
            write!(f, " iteration={i}")?;
        }
        write!(f, " seed={}] {:#}", self.seed, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(self.source.as_ref())
    }
}
