//! `aggflock` command-line driver.

mod config;
mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use aggflock::controllers::FEATURE_DIM;
use aggflock::evaluation::{
    episode_rng, evaluate_controllers, run_episode, sweep, trace_rows, write_csv, ControllerSpec, EvalReport,
    Experiment, ModelBank, SweepPlan,
};
use aggflock::imitation::{train_with_dataset, TrainConfig};
use aggflock::nn::{load_model, read_header, save_model, MlpParams};
use aggflock::FlockError;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Run(#[from] FlockError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Run(FlockError::InvalidParam { .. } | FlockError::ArchitectureMismatch(_) | FlockError::MissingModel { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "aggflock", version, about = "Train and evaluate aggregation GNN flocking controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a controller with DAgger and write the model file.
    Train(TrainArgs),
    /// Compare controllers over test episodes.
    Eval(EvalArgs),
    /// Sweep one simulation or architecture parameter.
    Sweep(SweepArgs),
    /// Roll one episode and dump per-agent positions and velocities.
    Demo(DemoArgs),
    /// Print a model file's architecture.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Trained model for the `gnn` controller.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated subset of global, local, gnn.
    #[arg(long, value_delimiter = ',')]
    controllers: Option<Vec<String>>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Fail if distributed inference ever disagrees with the centralized one.
    #[arg(long)]
    verify_distributed: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// One of v_init, radius, n_agents, architecture.
    #[arg(long)]
    experiment: Option<String>,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Trained models, one per history depth to include.
    #[arg(long)]
    model: Vec<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    verify_distributed: bool,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Controller to roll: global, local or gnn (default gnn with a model, else global).
    #[arg(long)]
    controllers: Option<String>,
    #[arg(long)]
    verify_distributed: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Model file.
    #[arg(long)]
    model: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Demo(a) => cmd_demo(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn load(path: &Path) -> Result<MlpParams, CliError> {
    load_model(path).map_err(|e| match e {
        FlockError::Io(io) => CliError::Io(path.to_path_buf(), io),
        other => other.into(),
    })
}

/// Loads the config; `--seed` overrides the training or the evaluation root.
fn load_config(common: &Common, train_seed: bool) -> Result<(RunConfig, u64), CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        if train_seed {
            cfg.train.rng_seed = seed;
        } else {
            cfg.sim.rng_seed = seed;
        }
    }
    cfg.sync();
    let seed = if train_seed { cfg.train.rng_seed } else { cfg.sim.rng_seed };
    Ok((cfg, seed))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let (cfg, seed) = load_config(&args.common, true)?;
    let model_path = &args.common.out;
    let report_path = with_suffix(model_path, ".report.csv");
    let manifest = RunManifest::begin("train", seed, &cfg, model_path, &[model_path, &report_path])?;
    let params = run_training(&cfg.train, true)?;
    save_model(&params.0, model_path)?;
    params.1.write_csv(create(&report_path)?)?;
    manifest.finish()?;
    eprintln!("wrote {}", model_path.display());
    Ok(())
}

fn run_training(train: &TrainConfig, verbose: bool) -> Result<(MlpParams, aggflock::imitation::TrainingReport), CliError> {
    let total = train.n_train_trajectories;
    let out = train_with_dataset(train, |r| {
        if verbose && (r.round % 10 == 9 || r.round + 1 == total) {
            eprintln!(
                "round {:>4}/{total}  beta {:.3}  samples {:>8}  loss {:.4e}",
                r.round + 1,
                r.beta,
                r.dataset_size,
                r.mean_loss
            );
        }
    })?;
    Ok((out.params, out.report))
}

fn parse_controllers(names: &[String], model: Option<&Path>) -> Result<Vec<ControllerSpec>, CliError> {
    let mut out = Vec::new();
    for name in names {
        out.push(match name.trim() {
            "global" => ControllerSpec::Global,
            "local" => ControllerSpec::Local,
            "gnn" => {
                let path = model.ok_or_else(|| CliError::Usage("controller `gnn` needs --model".into()))?;
                ControllerSpec::Gnn(Arc::new(load(path)?))
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown controller `{other}`; valid: global, local, gnn"
                )))
            }
        });
    }
    if out.is_empty() {
        return Err(CliError::Usage("no controllers selected".into()));
    }
    Ok(out)
}

fn check_model_depth(controllers: &[ControllerSpec], cfg: &RunConfig) -> Result<(), CliError> {
    for c in controllers {
        if let ControllerSpec::Gnn(m) = c {
            aggflock::nn::check_architecture(m, cfg.train.history_depth, FEATURE_DIM)?;
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (mut cfg, seed) = load_config(&args.common, false)?;
    cfg.eval.verify_distributed |= args.verify_distributed;
    let names = args.controllers.clone().unwrap_or_else(|| {
        cfg.eval
            .controllers
            .iter()
            .filter(|c| args.model.is_some() || c.as_str() != "gnn")
            .cloned()
            .collect()
    });
    let controllers = parse_controllers(&names, args.model.as_deref())?;
    check_model_depth(&controllers, &cfg)?;
    let scenario = cfg.eval.scenario.resolve(&cfg.sim)?;
    let out = &args.common.out;
    let manifest = RunManifest::begin("eval", seed, &cfg, out, &[out])?;
    let reports = evaluate_controllers(
        &controllers,
        &scenario,
        &cfg.sim,
        cfg.eval.traj_len,
        cfg.train.n_test_trajectories,
        &cfg.episode_options(),
        args.jobs.unwrap_or(cfg.eval.jobs),
    )?;
    let rows: Vec<_> = reports.iter().flat_map(|r| r.episodes.iter().cloned()).collect();
    write_csv(&rows, create(out)?)?;
    manifest.finish()?;
    print_summary(&reports);
    Ok(())
}

fn print_summary(reports: &[EvalReport]) {
    println!("{:<10} {:>3} {:>12} {:>12} {:>10} {:>10}", "controller", "K", "mean_cost", "std_cost", "disconn", "min_dist");
    for r in reports {
        let k = r.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "{:<10} {:>3} {:>12.4} {:>12.4} {:>10.4} {:>10.4}",
            r.controller, k, r.mean_cost, r.std_cost, r.disconnect_rate, r.mean_min_dist
        );
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let (mut cfg, seed) = load_config(&args.common, false)?;
    cfg.eval.verify_distributed |= args.verify_distributed;
    if let Some(e) = &args.experiment {
        cfg.sweep.experiment = Some(e.clone());
    }
    if let Some(v) = &args.values {
        cfg.sweep.values = v.clone();
    }
    let experiment = cfg
        .sweep
        .experiment()?
        .ok_or_else(|| CliError::Usage("no experiment given (--experiment or sweep.experiment)".into()))?;
    if cfg.sweep.values.is_empty() {
        return Err(CliError::Usage("no sweep values given (--values or sweep.values)".into()));
    }

    let out = &args.common.out;
    let manifest = RunManifest::begin("sweep", seed, &cfg, out, &[out])?;
    let mut bank = ModelBank::new();
    let gnn_ks = if experiment == Experiment::Architecture {
        for &width in &cfg.sweep.values {
            if width.fract() != 0.0 || width < 1.0 {
                return Err(CliError::Usage(format!("architecture sweep value {width} is not a layer width")));
            }
            let mut train = cfg.train.clone();
            train.hidden = vec![width as usize; train.hidden.len().max(1)];
            eprintln!("training hidden width {width}");
            bank.insert(run_training(&train, true)?.0);
        }
        vec![cfg.train.history_depth]
    } else {
        let mut ks = Vec::new();
        for path in &args.model {
            let m = load(path)?;
            ks.push(m.architecture().history_depth);
            bank.insert(m);
        }
        ks
    };
    let plan = SweepPlan {
        experiment,
        values: cfg.sweep.values.clone(),
        include_global: cfg.sweep.include_global,
        include_local: cfg.sweep.include_local,
        gnn_ks,
        n_seeds: cfg.sweep.n_seeds,
        traj_len: cfg.eval.traj_len,
        base: cfg.sim.clone(),
        options: cfg.episode_options(),
    };
    let rows = sweep(&plan, &bank, args.jobs.unwrap_or(cfg.eval.jobs))?;
    write_csv(&rows, create(out)?)?;
    manifest.finish()?;
    eprintln!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_demo(args: DemoArgs) -> Result<(), CliError> {
    let (mut cfg, seed) = load_config(&args.common, false)?;
    cfg.eval.verify_distributed |= args.verify_distributed;
    let name = args
        .controllers
        .clone()
        .unwrap_or_else(|| if args.model.is_some() { "gnn".into() } else { "global".into() });
    let controllers = parse_controllers(&[name], args.model.as_deref())?;
    check_model_depth(&controllers, &cfg)?;
    let scenario = cfg.eval.scenario.resolve(&cfg.sim)?;
    let out = &args.common.out;
    let manifest = RunManifest::begin("demo", seed, &cfg, out, &[out])?;
    let mut rng = episode_rng(cfg.sim.rng_seed, 0);
    let initial = scenario.initial_state(&cfg.sim, &mut rng)?;
    let log = run_episode(
        &initial,
        &controllers[0],
        &cfg.sim,
        cfg.eval.traj_len,
        &cfg.episode_options(),
        &mut rng,
    )?;
    write_csv(&trace_rows(&log), create(out)?)?;
    manifest.finish()?;
    eprintln!(
        "{}: cost {:.4}, {} steps written to {}",
        controllers[0].label(),
        aggflock::evaluation::velocity_variance_cost(&log),
        log.len(),
        out.display()
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let header = read_header(&args.model).map_err(|e| match e {
        FlockError::Io(io) => CliError::Io(args.model.clone(), io),
        other => other.into(),
    })?;
    let a = &header.architecture;
    let hidden: Vec<String> = a.hidden.iter().map(usize::to_string).collect();
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "version: {}", header.version);
    let _ = writeln!(stdout, "K: {}", a.history_depth);
    let _ = writeln!(stdout, "p: {}", a.feature_dim);
    let _ = writeln!(stdout, "hidden: [{}]", hidden.join(", "));
    let _ = writeln!(stdout, "q: {}", a.output_dim);
    let _ = writeln!(stdout, "parameters: {}", header.parameter_count());
    Ok(())
}
