//! The fit, observe, smooth, optimize, deploy loop.

use anyhow::{anyhow, Context};
use log::{info, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use socem_core::baseline_lqr::{lqr_backward, make_phi0, LqrOptions};
use socem_core::cost::QuadraticCost;
use socem_core::dynamics_fit::{fit_model, EpisodeData, FitOptions, LtvModel};
use socem_core::em_core::{
    covariance_decay_report, expected_cost_exact, expected_cost_mc, soc_em_i, soc_em_ii,
    surrogate_value, DecayReport, EmStep,
};
use socem_core::policy::{PolicyParams, PolicyStep, SampleMode};
use socem_core::simulator::{run_episode, PlantConfig, Rollout, ACTION_DIM, STATE_DIM};
use socem_core::smoother::smooth;

use crate::config::{RunConfig, Variant};
use crate::error::{Stage, StageError};
use crate::seeds::{self, Stream};

/// Per-step statistics of the cumulative cost over evaluation rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl EvalStats {
    /// Mean cumulative cost at the final step.
    pub fn total_mean(&self) -> f64 {
        *self.mean.last().unwrap_or(&0.0)
    }

    /// Spread of the total cost across rollouts.
    pub fn total_std(&self) -> f64 {
        *self.std.last().unwrap_or(&0.0)
    }
}

/// What happened when `φ̂^i` was improved into `φ̂^{i+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub refit: bool,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    /// Monte-Carlo `E_{φ̂^i}[V_{φ̂^i} | Y]` and its standard error.
    pub expected_cost_before: (f64, f64),
    /// Monte-Carlo `E_{φ̂^i}[V_{φ̂^{i+1}} | Y]`, same random numbers.
    pub expected_cost_after: (f64, f64),
    /// The same two expectations in closed form.
    pub exact_cost_before: f64,
    pub exact_cost_after: f64,
    pub min_neg_hessian_eig: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub policy: PolicyParams<f64>,
    pub eval: EvalStats,
    /// `Tr(Sigma_k)` per step.
    pub covariance_traces: Vec<f64>,
    pub trace_sum: f64,
    /// Present unless this is the last evaluated policy.
    pub update: Option<UpdateRecord>,
    pub eval_rollouts: Vec<Rollout<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub records: Vec<IterationRecord>,
    pub decay: DecayReport,
}

fn stage_err(
    stage: Stage,
    iteration: Option<usize>,
    seed: u64,
) -> impl Fn(anyhow::Error) -> StageError {
    move |e| StageError::new(stage, iteration, seed, e)
}

/// Constant hover force plus isotropic noise; no feedback.
pub fn exploration_policy(plant: &PlantConfig<f64>, sigma: f64) -> PolicyParams<f64> {
    let hover = DVector::from_fn(ACTION_DIM, |i, _| -plant.mass * plant.gravity[i]);
    let step = PolicyStep {
        gain: DMatrix::zeros(ACTION_DIM, STATE_DIM),
        offset: hover,
        cov_sqrt: DMatrix::identity(ACTION_DIM, ACTION_DIM) * sigma,
    };
    PolicyParams::new(vec![step; plant.horizon]).expect("uniform steps")
}

/// `count` plant episodes, episode `r` seeded by `(stream, iteration, r)`.
pub fn rollouts(
    plant: &PlantConfig<f64>,
    policy: &PolicyParams<f64>,
    cost: &QuadraticCost<f64>,
    root: u64,
    stream: Stream,
    iteration: u64,
    count: usize,
) -> socem_core::Result<Vec<Rollout<f64>>> {
    (0..count)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeds::rng(root, stream, iteration, r as u64);
            run_episode(plant, policy, cost, SampleMode::Stochastic, &mut rng)
        })
        .collect()
}

pub fn summarize(rollouts: &[Rollout<f64>]) -> EvalStats {
    let horizon = rollouts.first().map_or(0, |r| r.costs.len());
    let cums: Vec<Vec<f64>> = rollouts.iter().map(|r| r.cumulative_costs()).collect();
    let n = cums.len() as f64;
    let mut mean = vec![0.0; horizon];
    let mut std = vec![0.0; horizon];
    for k in 0..horizon {
        let m = cums.iter().map(|c| c[k]).sum::<f64>() / n;
        let ss = cums.iter().map(|c| (c[k] - m).powi(2)).sum::<f64>();
        mean[k] = m;
        std[k] = if cums.len() > 1 {
            (ss / (n - 1.0)).sqrt()
        } else {
            0.0
        };
    }
    EvalStats { mean, std }
}

/// Evaluation on the plant; every iteration reuses the same random numbers.
pub fn evaluate(
    plant: &PlantConfig<f64>,
    policy: &PolicyParams<f64>,
    cost: &QuadraticCost<f64>,
    root: u64,
    count: usize,
) -> socem_core::Result<(EvalStats, Vec<Rollout<f64>>)> {
    let rs = rollouts(plant, policy, cost, root, Stream::Eval, 0, count)?;
    Ok((summarize(&rs), rs))
}

pub fn fit_rollouts(
    rollouts: &[Rollout<f64>],
    opts: &FitOptions<f64>,
) -> socem_core::Result<LtvModel<f64>> {
    let horizon = rollouts.first().map_or(0, |r| r.actions.len());
    let mut data = EpisodeData::new(horizon, STATE_DIM, ACTION_DIM);
    for r in rollouts {
        r.append_to(&mut data)?;
    }
    fit_model(&data, opts)
}

/// Symmetric square root with negative eigenvalues clipped, so that
/// noise-free rows are allowed.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()))
}

/// Rolls the fitted model (not the plant) under `policy` from `s1`, drawing
/// `(s_{k+1}, y_k)` jointly at each step; `y` is clamped to `(0, 1]`.
pub fn generate_observations<R: Rng + ?Sized>(
    model: &LtvModel<f64>,
    policy: &PolicyParams<f64>,
    s1: &DVector<f64>,
    rng: &mut R,
) -> socem_core::Result<Vec<f64>> {
    if model.horizon() != policy.horizon() {
        return Err(socem_core::Error::InvalidArgument(format!(
            "model horizon {} but policy horizon {}",
            model.horizon(),
            policy.horizon()
        )));
    }
    let n = model.n_s();
    if policy.n_s() != n || policy.n_a() != model.n_a() {
        return Err(socem_core::Error::InvalidArgument(
            "model and policy dimensions differ".into(),
        ));
    }
    let mut draw = |d: usize| DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
    let mut s = s1.clone();
    let mut ys = Vec::with_capacity(model.horizon());
    for (st, ps) in model.steps.iter().zip(policy.steps()) {
        let a = ps.mean_action(&s) + ps.cov_sqrt.transpose() * draw(ps.n_a());
        let mean_next = &st.a_d * &s + &st.b_d * &a + &st.c_d;
        let mean_y = (&st.a_r * &s + &st.b_r * &a)[0] + st.c_r;
        // Joint covariance of the output rows; the two blocks are independent.
        let mut joint = DMatrix::zeros(n + 1, n + 1);
        joint.view_mut((0, 0), (n, n)).copy_from(&st.sigma_d);
        joint[(n, n)] = st.sigma_r;
        let w = psd_sqrt(&joint) * draw(n + 1);
        s = mean_next + w.rows(0, n);
        ys.push((mean_y + w[n]).clamp(f64::MIN_POSITIVE, 1.0));
    }
    Ok(ys)
}

/// Baseline `φ̂^0`: explore, fit, LQR on the fitted model. A configured
/// policy file takes its place when given.
pub fn initial_policy(
    cfg: &RunConfig,
    cost: &QuadraticCost<f64>,
) -> Result<PolicyParams<f64>, StageError> {
    if let Some(path) = &cfg.initial_policy {
        let err = stage_err(Stage::Config, None, cfg.seed);
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading initial policy {}", path.display()))
            .map_err(&err)?;
        let p = PolicyParams::from_json(&text).map_err(|e| err(e.into()))?;
        if p.horizon() != cfg.plant.horizon || p.n_s() != STATE_DIM || p.n_a() != ACTION_DIM {
            return Err(err(anyhow!(
                "initial policy shape does not match the plant"
            )));
        }
        return Ok(p);
    }
    let explore = exploration_policy(&cfg.plant, cfg.exploration.sigma);
    let rs = rollouts(
        &cfg.plant,
        &explore,
        cost,
        cfg.seed,
        Stream::Explore,
        0,
        cfg.exploration.rollouts,
    )
    .map_err(|e| StageError::new(Stage::Explore, None, cfg.seed, e.into()))?;
    let model = fit_rollouts(&rs, &cfg.prior.fit_options()).map_err(|e| {
        StageError::new(
            Stage::Baseline,
            None,
            cfg.seed,
            anyhow!(e).context("fitting the exploration data"),
        )
    })?;
    let pass = lqr_backward(&model, cost, &LqrOptions::default())
        .map_err(|e| StageError::new(Stage::Baseline, None, cfg.seed, e.into()))?;
    make_phi0(&pass, cfg.exploration.baseline_sigma)
        .map_err(|e| StageError::new(Stage::Baseline, None, cfg.seed, e.into()))
}

/// Relative eigenvalue level below which a policy covariance counts as
/// collapsed.
pub const COLLAPSE_TOL: f64 = 1e-12;

/// Zeroes the factor of every step whose covariance has collapsed, making the
/// step deterministic instead of numerically singular. Never raises a trace.
pub fn snap_collapsed(policy: &mut PolicyParams<f64>) -> usize {
    let mut snapped = 0;
    for k in 0..policy.horizon() {
        let st = policy.step(k);
        let cov = st.covariance();
        if cov.iter().all(|v| *v == 0.0) {
            continue;
        }
        let min = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if min <= COLLAPSE_TOL * cov.trace().max(1.0) {
            let mut det = st.clone();
            det.cov_sqrt.fill(0.0);
            policy.replace_step(k, det).expect("same shape");
            snapped += 1;
        }
    }
    snapped
}

fn ascent_tolerance(v: f64) -> f64 {
    1e-9 * (1.0 + v.abs())
}

/// One improvement of `policy`, returning the next policy and its record.
#[allow(clippy::too_many_arguments)]
fn improve(
    cfg: &RunConfig,
    cost: &QuadraticCost<f64>,
    policy: &PolicyParams<f64>,
    model: &mut Option<LtvModel<f64>>,
    i: usize,
) -> Result<(PolicyParams<f64>, UpdateRecord), StageError> {
    let seed = cfg.seed;
    let it = Some(i);
    let refit = model.is_none() || cfg.refit_until.is_none_or(|r| i < r);
    if refit {
        let rs = rollouts(
            &cfg.plant,
            policy,
            cost,
            seed,
            Stream::Collect,
            i as u64,
            cfg.rollouts,
        )
        .map_err(|e| StageError::new(Stage::Collect, it, seed, e.into()))?;
        *model = Some(
            fit_rollouts(&rs, &cfg.prior.fit_options())
                .map_err(|e| StageError::new(Stage::Fit, it, seed, e.into()))?,
        );
    }
    let model = model.as_ref().expect("model fitted above");

    let mut rng = seeds::rng(seed, Stream::Observe, i as u64, 0);
    let s1 = &model.mu1
        + psd_sqrt(&model.p1)
            * DVector::<f64>::from_fn(STATE_DIM, |_, _| rng.sample(StandardNormal));
    let ys = generate_observations(model, policy, &s1, &mut rng)
        .map_err(|e| StageError::new(Stage::Observe, it, seed, e.into()))?;

    let opts = cfg.em.options();
    let post = smooth(model, policy, &ys, opts.filter)
        .map_err(|e| StageError::new(Stage::Smooth, it, seed, e.into()))?;

    let step: EmStep<f64> = match cfg.variant {
        Variant::Em2 => soc_em_ii(&post, model, policy, &opts),
        Variant::Em1 => soc_em_i(model, policy, &ys, &opts),
        Variant::Identity => surrogate_value(&post, model, policy).map(|v| EmStep {
            policy: policy.clone(),
            surrogate_before: v,
            surrogate_after: v,
            min_neg_hessian_eig: f64::NAN,
            subproblem_ascent: true,
        }),
    }
    .map_err(|e| StageError::new(Stage::Optimize, it, seed, e.into()))?;

    if step.surrogate_after < step.surrogate_before - ascent_tolerance(step.surrogate_before)
        || !step.subproblem_ascent
    {
        return Err(StageError::new(
            Stage::Optimize,
            it,
            seed,
            anyhow!(
                "surrogate decreased at the optimize step: {} -> {}",
                step.surrogate_before,
                step.surrogate_after
            ),
        ));
    }

    let mut next = step.policy;
    let snapped = snap_collapsed(&mut next);
    if snapped > 0 {
        info!("iteration {i}: {snapped} collapsed policy covariances set to zero");
    }

    let samples = cfg.em.expected_cost_samples;
    let mc = |p: &PolicyParams<f64>| {
        let mut rng = seeds::rng(seed, Stream::Expect, i as u64, 0);
        expected_cost_mc(&post, p, cost, samples, &mut rng)
    };
    let expected_before =
        mc(policy).map_err(|e| StageError::new(Stage::Optimize, it, seed, e.into()))?;
    let expected_after =
        mc(&next).map_err(|e| StageError::new(Stage::Optimize, it, seed, e.into()))?;

    let record = UpdateRecord {
        refit,
        surrogate_before: step.surrogate_before,
        surrogate_after: step.surrogate_after,
        expected_cost_before: expected_before,
        expected_cost_after: expected_after,
        exact_cost_before: expected_cost_exact(&post, policy, cost),
        exact_cost_after: expected_cost_exact(&post, &next, cost),
        min_neg_hessian_eig: step.min_neg_hessian_eig,
    };
    Ok((next, record))
}

/// Runs the whole loop: `cfg.iters` evaluated policies `φ̂^0..φ̂^{N-1}` and
/// the `N-1` improvements between them.
pub fn run_soc_em(cfg: &RunConfig) -> Result<RunOutput, StageError> {
    cfg.validate()
        .map_err(|e| StageError::new(Stage::Config, None, cfg.seed, e.into()))?;
    let (cost, _) = cfg.cost_model()?;
    let mut policy = initial_policy(cfg, &cost)?;
    let mut model = None;
    let mut records = Vec::with_capacity(cfg.iters);
    for i in 0..cfg.iters {
        let (eval, eval_rollouts) =
            evaluate(&cfg.plant, &policy, &cost, cfg.seed, cfg.eval_rollouts)
                .map_err(|e| StageError::new(Stage::Evaluate, Some(i), cfg.seed, e.into()))?;
        let covariance_traces: Vec<f64> = policy
            .steps()
            .iter()
            .map(|s| s.covariance().trace())
            .collect();
        info!(
            "iteration {i}: cumulative cost {:.4} +- {:.4}, trace sum {:.6}",
            eval.total_mean(),
            eval.total_std(),
            covariance_traces.iter().sum::<f64>()
        );
        let mut record = IterationRecord {
            iteration: i,
            policy: policy.clone(),
            eval,
            trace_sum: covariance_traces.iter().sum(),
            covariance_traces,
            update: None,
            eval_rollouts,
        };
        if i + 1 < cfg.iters {
            let (next, update) = improve(cfg, &cost, &policy, &mut model, i)?;
            info!(
                "iteration {i}: surrogate {:.6} -> {:.6}, expected cost {:.4} -> {:.4}",
                update.surrogate_before,
                update.surrogate_after,
                update.expected_cost_before.0,
                update.expected_cost_after.0
            );
            record.update = Some(update);
            policy = next;
        }
        records.push(record);
    }
    let history: Vec<_> = records.iter().map(|r| r.policy.clone()).collect();
    let decay = covariance_decay_report(&history, 0.0);
    for &v in &decay.violations {
        warn!(
            "covariance trace sum increased at iteration {v}: {} -> {}",
            decay.trace_sums[v - 1],
            decay.trace_sums[v]
        );
    }
    Ok(RunOutput {
        config: cfg.clone(),
        records,
        decay,
    })
}
