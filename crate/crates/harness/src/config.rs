//! Run configuration, read from a JSON or TOML document.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use socem_core::cost::{CostObservationLaw, QuadraticCost, DEFAULT_LAMBDA};
use socem_core::dynamics_fit::{FitOptions, NiwPrior};
use socem_core::em_core::{EmOptions, ObjectiveScope, StepSolver};
use socem_core::linalg::from_rows;
use socem_core::simulator::PlantConfig;
use socem_core::smoother::FilterOptions;

use crate::error::{ConfigError, Stage, StageError};

/// Which EM scheme updates the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Sequential sweep with re-smoothing after each step.
    Em1,
    /// Independent per-step maximization against one posterior.
    #[default]
    Em2,
    /// Keeps the policy unchanged; a null control for the rest of the loop.
    Identity,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "em1" => Ok(Variant::Em1),
            "em2" => Ok(Variant::Em2),
            "identity" => Ok(Variant::Identity),
            other => Err(format!(
                "unknown variant {other:?} (expected em1, em2 or identity)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    #[serde(rename = "Q_s")]
    pub q_s: Vec<Vec<f64>>,
    #[serde(rename = "Q_a")]
    pub q_a: Vec<Vec<f64>>,
    pub s_star: Vec<f64>,
    pub a_star: Vec<f64>,
    pub lambda: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            q_s: vec![
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.1, 0.0],
                vec![0.0, 0.0, 0.0, 0.1],
            ],
            q_a: vec![vec![0.01, 0.0], vec![0.0, 0.01]],
            s_star: vec![5.0, 20.0, 0.0, 0.0],
            a_star: vec![0.0, 0.0],
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl CostConfig {
    pub fn build(&self) -> Result<(QuadraticCost<f64>, CostObservationLaw<f64>), ConfigError> {
        let cost = QuadraticCost::new(
            from_rows(&self.q_s)?,
            from_rows(&self.q_a)?,
            DVector::from_column_slice(&self.s_star),
            DVector::from_column_slice(&self.a_star),
        )?;
        Ok((cost, CostObservationLaw::new(self.lambda)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kappa0: f64,
    /// `None` means `d + 2`.
    pub nu0: Option<f64>,
    pub scatter_scale: f64,
    pub pooling_window: usize,
    pub min_samples: usize,
    pub p1_floor: f64,
    pub rank_tol: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let p = NiwPrior::<f64>::default();
        let f = FitOptions::<f64>::default();
        Self {
            kappa0: p.kappa0,
            nu0: p.nu0,
            scatter_scale: p.scatter_scale,
            pooling_window: p.pooling_window,
            min_samples: p.min_samples,
            p1_floor: f.p1_floor,
            rank_tol: f.rank_tol,
        }
    }
}

impl PriorConfig {
    pub fn fit_options(&self) -> FitOptions<f64> {
        FitOptions {
            prior: NiwPrior {
                kappa0: self.kappa0,
                nu0: self.nu0,
                scatter_scale: self.scatter_scale,
                mean: None,
                pooling_window: self.pooling_window,
                min_samples: self.min_samples,
            },
            p1_floor: self.p1_floor,
            rank_tol: self.rank_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    /// Rollouts of the open-loop exploration policy used to fit the model
    /// the baseline is designed on.
    pub rollouts: usize,
    /// Exploration policy noise (action units); its mean compensates gravity.
    pub sigma: f64,
    /// Covariance factor `sigma I` of the initial policy.
    pub baseline_sigma: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            rollouts: 20,
            sigma: 10.0,
            baseline_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub scope: ObjectiveScope,
    pub solver: StepSolver,
    pub square_root: bool,
    /// Monte-Carlo samples for the expected cost-to-go diagnostics.
    pub expected_cost_samples: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            scope: ObjectiveScope::default(),
            solver: StepSolver::default(),
            square_root: false,
            expected_cost_samples: 2000,
        }
    }
}

impl EmConfig {
    pub fn options(&self) -> EmOptions {
        EmOptions {
            scope: self.scope,
            solver: self.solver,
            filter: FilterOptions {
                square_root: self.square_root,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantConfig<f64>,
    pub cost: CostConfig,
    pub prior: PriorConfig,
    pub exploration: ExplorationConfig,
    pub em: EmConfig,
    /// Plant rollouts per model fit (`M`).
    pub rollouts: usize,
    /// Number of evaluated policies, the baseline included.
    pub iters: usize,
    pub variant: Variant,
    pub eval_rollouts: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Stop refitting the model after this many EM updates.
    pub refit_until: Option<usize>,
    /// Use this policy JSON as the initial policy instead of the baseline.
    pub initial_policy: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plant: PlantConfig::default(),
            cost: CostConfig::default(),
            prior: PriorConfig::default(),
            exploration: ExplorationConfig::default(),
            em: EmConfig::default(),
            rollouts: 20,
            iters: 10,
            variant: Variant::Em2,
            eval_rollouts: 20,
            seed: 0,
            out: None,
            refit_until: None,
            initial_policy: None,
        }
    }
}

impl RunConfig {
    /// Parses JSON or TOML, chosen by extension (JSON when unknown). A run
    /// manifest is accepted too: its embedded `config` is used.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        Self::parse(&text, is_toml)
    }

    pub fn parse(text: &str, is_toml: bool) -> Result<Self, ConfigError> {
        let cfg: RunConfig = if is_toml {
            toml::from_str(text)?
        } else {
            let value: serde_json::Value = serde_json::from_str(text)?;
            match value.get("config") {
                Some(inner) if value.get("files").is_some() => {
                    serde_json::from_value(inner.clone())?
                }
                _ => serde_json::from_value(value)?,
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.plant.validate()?;
        self.cost.build()?;
        if self.iters < 1 || self.rollouts < 1 {
            return Err(ConfigError::Invalid(
                "iters and rollouts must be >= 1".into(),
            ));
        }
        if self.eval_rollouts < 2 {
            return Err(ConfigError::Invalid(
                "eval_rollouts must be >= 2 to report a spread".into(),
            ));
        }
        if self.exploration.rollouts < 1
            || self.exploration.baseline_sigma < 0.0
            || self.exploration.sigma <= 0.0
        {
            return Err(ConfigError::Invalid(
                "exploration needs rollouts >= 1, sigma > 0, baseline_sigma >= 0".into(),
            ));
        }
        if self.cost.s_star.len() != 4 || self.cost.a_star.len() != 2 {
            return Err(ConfigError::Invalid(
                "the planar plant needs a 4-dim s_star and a 2-dim a_star".into(),
            ));
        }
        if let StepSolver::TrustRegion { radius } = self.em.solver {
            if !(radius > 0.0) {
                return Err(ConfigError::Invalid("trust radius must be > 0".into()));
            }
        }
        if self.em.expected_cost_samples < 2 {
            return Err(ConfigError::Invalid(
                "expected_cost_samples must be >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Cost weights and observation law.
    pub fn cost_model(&self) -> Result<(QuadraticCost<f64>, CostObservationLaw<f64>), StageError> {
        self.cost
            .build()
            .map_err(|e| StageError::new(Stage::Config, None, self.seed, e.into()))
    }
}

/// Identity-weighted default used when only dimensions are known.
pub fn identity_rows(n: usize, scale: f64) -> Vec<Vec<f64>> {
    let m = DMatrix::<f64>::identity(n, n) * scale;
    (0..n).map(|i| m.row(i).iter().copied().collect()).collect()
}
