use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use socem_core::dynamics_fit::{fit_model, EpisodeData};
use socem_core::policy::PolicyParams;
use socem_harness::config::{PriorConfig, RunConfig, Variant};
use socem_harness::error::{Stage, StageError};
use socem_harness::{export, pipeline, run_soc_em};

#[derive(Parser)]
#[command(
    name = "socem",
    version,
    about = "Trajectory optimization by expectation-maximization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Em1,
    Em2,
    Identity,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Em1 => Variant::Em1,
            VariantArg::Em2 => Variant::Em2,
            VariantArg::Identity => Variant::Identity,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the EM loop and write its artifacts.
    Run {
        /// JSON or TOML config, or a previous run's manifest.json.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Number of evaluated policies, baseline included.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a policy on the plant; prints `k,mean,std` of the cumulative cost.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the time-varying linear-Gaussian model to an episode CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Takes the prior hyperparameters from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig, StageError> {
    RunConfig::load(path).map_err(|e| {
        StageError::new(
            Stage::Config,
            None,
            0,
            anyhow!(e).context(path.display().to_string()),
        )
    })
}

fn run(
    config: &Path,
    variant: Option<VariantArg>,
    iters: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), StageError> {
    let mut cfg = load_config(config)?;
    if let Some(v) = variant {
        cfg.variant = v.into();
    }
    if let Some(n) = iters {
        cfg.iters = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = export::output_dir(out.as_ref(), &cfg).ok_or_else(|| {
        StageError::new(
            Stage::Config,
            None,
            cfg.seed,
            anyhow!("no output directory: pass --out or set `out`"),
        )
    })?;
    let result = run_soc_em(&cfg)?;
    export::export_results(&result, &dir)?;
    for r in &result.records {
        println!(
            "iteration {}: cost {} +- {}, trace sum {}",
            r.iteration,
            r.eval.total_mean(),
            r.eval.total_std(),
            r.trace_sum
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval(
    policy: &Path,
    config: &Path,
    rollouts: Option<usize>,
    seed: Option<u64>,
) -> Result<(), StageError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let n = rollouts.unwrap_or(cfg.eval_rollouts);
    let err = |stage| move |e: anyhow::Error| StageError::new(stage, None, cfg.seed, e);
    if n < 2 {
        return Err(err(Stage::Config)(anyhow!("--rollouts must be >= 2")));
    }
    let text = fs::read_to_string(policy)
        .with_context(|| format!("reading {}", policy.display()))
        .map_err(err(Stage::Input))?;
    let policy = PolicyParams::from_json(&text).map_err(|e| err(Stage::Config)(e.into()))?;
    let (cost, _) = cfg.cost_model()?;
    let (stats, _) = pipeline::evaluate(&cfg.plant, &policy, &cost, cfg.seed, n)
        .map_err(|e| err(Stage::Evaluate)(e.into()))?;
    println!("k,mean,std");
    for k in 0..stats.mean.len() {
        println!("{},{},{}", k + 1, stats.mean[k], stats.std[k]);
    }
    eprintln!(
        "total cost {} +- {} over {n} rollouts",
        stats.total_mean(),
        stats.total_std()
    );
    Ok(())
}

fn fit(data: &Path, out: &Path, config: Option<&Path>) -> Result<(), StageError> {
    let prior = match config {
        Some(p) => load_config(p)?.prior,
        None => PriorConfig::default(),
    };
    let err = |stage| move |e: anyhow::Error| StageError::new(stage, None, 0, e);
    let file = fs::File::open(data)
        .with_context(|| format!("opening {}", data.display()))
        .map_err(err(Stage::Input))?;
    let episodes = EpisodeData::<f64>::read_csv(file)
        .map_err(|e| err(Stage::Input)(anyhow!(e).context(data.display().to_string())))?;
    let model =
        fit_model(&episodes, &prior.fit_options()).map_err(|e| err(Stage::Fit)(e.into()))?;
    let json = model.to_json().map_err(|e| err(Stage::Export)(e.into()))?;
    fs::write(out, json)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(err(Stage::Export))?;
    println!(
        "fitted T={} n_s={} n_a={} from {} experiments",
        model.horizon(),
        model.n_s(),
        model.n_a(),
        episodes.experiments()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            variant,
            iters,
            seed,
            out,
        } => run(&config, variant, iters, seed, out),
        Command::Eval {
            policy,
            config,
            rollouts,
            seed,
        } => eval(&policy, &config, rollouts, seed),
        Command::Fit { data, out, config } => fit(&data, &out, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
