//! CSV and JSON artifacts of a run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Stage, StageError};
use crate::pipeline::{IterationRecord, RunOutput};
use crate::seeds;

pub const COSTS: &str = "costs.csv";
pub const TRAJECTORIES: &str = "trajectories.csv";
pub const ACTIONS: &str = "actions.csv";
pub const COVARIANCE: &str = "covariance.csv";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub iteration: usize,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub rollout: usize,
    pub k: usize,
    pub x: f64,
    pub y: f64,
    pub v_x: f64,
    pub v_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    pub iteration: usize,
    pub rollout: usize,
    pub k: usize,
    pub a_x: f64,
    pub a_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub iteration: usize,
    pub k: usize,
    pub trace: f64,
}

/// Improvement from `iteration` to `iteration + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub iteration: usize,
    pub refit: bool,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub expected_cost_before: f64,
    pub expected_cost_before_se: f64,
    pub expected_cost_after: f64,
    pub expected_cost_after_se: f64,
    pub exact_cost_before: f64,
    pub exact_cost_after: f64,
    pub trace_sum: f64,
    pub min_eig_neg_hessian: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub seed: u64,
    pub variant: crate::config::Variant,
    pub seed_scheme: String,
    pub files: Vec<String>,
    pub trace_sums: Vec<f64>,
    pub decay_violations: Vec<usize>,
}

pub fn cost_rows(records: &[IterationRecord]) -> Vec<CostRow> {
    records
        .iter()
        .flat_map(|r| {
            (0..r.eval.mean.len()).map(move |k| CostRow {
                iteration: r.iteration,
                k: k + 1,
                mean: r.eval.mean[k],
                std: r.eval.std[k],
            })
        })
        .collect()
}

pub fn covariance_rows(records: &[IterationRecord]) -> Vec<CovarianceRow> {
    records
        .iter()
        .flat_map(|r| {
            r.covariance_traces
                .iter()
                .enumerate()
                .map(move |(k, &trace)| CovarianceRow {
                    iteration: r.iteration,
                    k: k + 1,
                    trace,
                })
        })
        .collect()
}

/// True plant states, `k = 1..T+1`.
pub fn trajectory_rows(records: &[IterationRecord]) -> Vec<TrajectoryRow> {
    let mut rows = Vec::new();
    for r in records {
        for (j, ro) in r.eval_rollouts.iter().enumerate() {
            for (k, x) in ro.states.iter().enumerate() {
                rows.push(TrajectoryRow {
                    iteration: r.iteration,
                    rollout: j,
                    k: k + 1,
                    x: x[0],
                    y: x[1],
                    v_x: x[2],
                    v_y: x[3],
                });
            }
        }
    }
    rows
}

pub fn action_rows(records: &[IterationRecord]) -> Vec<ActionRow> {
    let mut rows = Vec::new();
    for r in records {
        for (j, ro) in r.eval_rollouts.iter().enumerate() {
            for (k, a) in ro.actions.iter().enumerate() {
                rows.push(ActionRow {
                    iteration: r.iteration,
                    rollout: j,
                    k: k + 1,
                    a_x: a[0],
                    a_y: a[1],
                });
            }
        }
    }
    rows
}

pub fn diagnostics_rows(records: &[IterationRecord]) -> Vec<DiagnosticsRow> {
    records
        .iter()
        .filter_map(|r| {
            r.update.as_ref().map(|u| DiagnosticsRow {
                iteration: r.iteration,
                refit: u.refit,
                surrogate_before: u.surrogate_before,
                surrogate_after: u.surrogate_after,
                expected_cost_before: u.expected_cost_before.0,
                expected_cost_before_se: u.expected_cost_before.1,
                expected_cost_after: u.expected_cost_after.0,
                expected_cost_after_se: u.expected_cost_after.1,
                exact_cost_before: u.exact_cost_before,
                exact_cost_after: u.exact_cost_after,
                trace_sum: r.trace_sum,
                min_eig_neg_hessian: u.min_neg_hessian_eig,
            })
        })
        .collect()
}

pub fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<D: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<D>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<D>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

pub fn policy_file(iteration: usize) -> String {
    format!("policies/phi_{iteration}.json")
}

fn write_all(out: &RunOutput, dir: &Path) -> anyhow::Result<Vec<String>> {
    fs::create_dir_all(dir.join("policies"))
        .with_context(|| format!("creating {}", dir.display()))?;
    let recs = &out.records;
    write_rows(&dir.join(COSTS), &cost_rows(recs))?;
    write_rows(&dir.join(TRAJECTORIES), &trajectory_rows(recs))?;
    write_rows(&dir.join(ACTIONS), &action_rows(recs))?;
    write_rows(&dir.join(COVARIANCE), &covariance_rows(recs))?;
    write_rows(&dir.join(DIAGNOSTICS), &diagnostics_rows(recs))?;
    let mut files: Vec<String> = [COSTS, TRAJECTORIES, ACTIONS, COVARIANCE, DIAGNOSTICS]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for r in recs {
        let name = policy_file(r.iteration);
        fs::write(dir.join(&name), r.policy.to_json()?)
            .with_context(|| format!("writing {name}"))?;
        files.push(name);
    }
    let mut config = out.config.clone();
    config.out = Some(dir.to_path_buf());
    let manifest = Manifest {
        seed: config.seed,
        variant: config.variant,
        config,
        seed_scheme: seeds::SCHEME.to_string(),
        files,
        trace_sums: out.decay.trace_sums.clone(),
        decay_violations: out.decay.violations.clone(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)
        .context("writing manifest")?;
    Ok(manifest.files)
}

/// Writes every artifact into `dir` and returns the relative file names.
pub fn export_results(out: &RunOutput, dir: &Path) -> Result<Vec<String>, StageError> {
    if out.records.is_empty() {
        return Err(StageError::new(
            Stage::Export,
            None,
            out.config.seed,
            anyhow::anyhow!("no records to export"),
        ));
    }
    write_all(out, dir).map_err(|e| StageError::new(Stage::Export, None, out.config.seed, e))
}

pub fn read_manifest(path: &Path) -> anyhow::Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Output directory: the command-line value wins over the config's.
pub fn output_dir(cli: Option<&PathBuf>, cfg: &RunConfig) -> Option<PathBuf> {
    cli.cloned().or_else(|| cfg.out.clone())
}
