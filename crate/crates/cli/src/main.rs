use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use cnode_core::config::{PUBLISHED_K_MAX, PUBLISHED_LR};
use cnode_core::data::{load_dataset, make_task, save_dataset};
use cnode_core::harness::{aggregate, find_run_dirs, plot_run, read_summary, write_run_dir};
use cnode_core::{
    run_experiment, Architecture, Error, ExperimentConfig, Method, MethodKind, System, SystemSpec, TaskKind,
    TaskSpec,
};

#[derive(Parser)]
#[command(name = "cnode", version, about = "Constrained Neural ODE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test CSVs of a task.
    Generate(GenerateArgs),
    /// Train one configuration, or the full method x task x seed grid.
    Train(TrainArgs),
    /// Aggregate run directories into a mean ± std table.
    Report(ReportArgs),
    /// Export true and predicted curves of a finished run.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    system: System,
    #[arg(long, default_value = "reconstruction")]
    task: TaskKind,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: $CNODE_OUT/data).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// JSON config; flags given on the command line override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    system: Option<System>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    method: Option<MethodKind>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `preset`, a system name, or layers such as `linear:50,tanh,linear:50,elu`.
    #[arg(long)]
    architecture: Option<Architecture>,
    #[arg(long)]
    solver: Option<Method>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long)]
    feasibility_tol: Option<f64>,
    #[arg(long)]
    zero_threshold: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Published budget: 10000 iterations at lr 1e-5.
    #[arg(long)]
    paper_scale: bool,
    /// Run every method (vanilla, quadratic mu=1/10/100, self-adaptive) on every task.
    #[arg(long)]
    grid: bool,
    /// Seeds for --grid.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Worker threads for --grid (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output root (default: $CNODE_OUT, else ./cnode-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories containing them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    run: PathBuf,
    /// Dataset CSV to predict on (default: the run's own test set).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("CNODE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("cnode-out"))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut spec = SystemSpec::preset(args.system);
    spec.noise_sigma = args.noise_sigma;
    spec.noise_seed = args.seed;
    let (train, test) = make_task(&spec, &TaskSpec::preset(args.system, args.task))?;
    let dir = args.out.unwrap_or_else(|| out_root(None).join("data"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (split, traj) in [("train", &train), ("test", &test)] {
        let path = dir.join(format!("{}_{}_{split}.csv", args.system, args.task));
        save_dataset(&path, args.system, &spec.params, traj)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn config_from(args: &TrainArgs) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::MissingArtifact(path.clone()).into());
            }
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => {
            let (Some(system), Some(method)) = (args.system, args.method) else {
                return Err(Error::Config("--system and --method are required without --config".into()).into());
            };
            ExperimentConfig::new(system, args.task.unwrap_or(TaskKind::Reconstruction), method)
        }
    };
    let mut cfg = base;
    if args.paper_scale {
        cfg.k_max = PUBLISHED_K_MAX;
        cfg.lr = PUBLISHED_LR;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    set!(system, task, method, seed, k_max, lr, architecture, solver, substeps, feasibility_tol, zero_threshold, noise_sigma);
    if args.mu.is_some() {
        cfg.mu = args.mu;
    }
    Ok(cfg)
}

/// Trains and writes one run; returns whether it diverged.
fn train_one(cfg: &ExperimentConfig, root: &Path) -> Result<bool> {
    let run = run_experiment(cfg)?;
    let dir = root.join(cfg.run_name());
    write_run_dir(&dir, &run)?;
    let m = run.metrics;
    println!(
        "{}  train_mse={:.4e} test_mse={:.4e} test_P={:.4e} {:.1}s{}",
        dir.display(),
        m.train_mse,
        m.test_mse,
        m.test_p_raw,
        run.wall_time_s,
        if m.diverged { "  DIVERGED" } else { "" }
    );
    Ok(m.diverged)
}

fn grid_configs(template: &ExperimentConfig, args: &TrainArgs) -> Vec<ExperimentConfig> {
    let systems = match args.system {
        Some(s) => vec![s],
        None => System::ALL.to_vec(),
    };
    let tasks = match args.task {
        Some(t) => vec![t],
        None => TaskKind::ALL.to_vec(),
    };
    let methods: Vec<(MethodKind, Option<f64>)> = vec![
        (MethodKind::Vanilla, None),
        (MethodKind::Quadratic, Some(1.0)),
        (MethodKind::Quadratic, Some(10.0)),
        (MethodKind::Quadratic, Some(100.0)),
        (MethodKind::SelfAdaptive, None),
    ];
    let mut out = Vec::new();
    for &system in &systems {
        for &task in &tasks {
            for &(method, mu) in &methods {
                for &seed in &args.seeds {
                    let mut cfg = template.clone();
                    cfg.system = system;
                    cfg.task = task;
                    cfg.method = method;
                    cfg.mu = mu;
                    cfg.seed = seed;
                    if matches!(cfg.architecture, Architecture::Preset(Some(_))) {
                        cfg.architecture = Architecture::Preset(None);
                    }
                    out.push(cfg);
                }
            }
        }
    }
    out
}

fn train(args: TrainArgs) -> Result<bool> {
    let root = out_root(args.out.clone());
    if !args.grid {
        let cfg = config_from(&args)?;
        cfg.validate()?;
        return train_one(&cfg, &root);
    }
    // system, task, method, mu and seed are filled in per cell
    let template = config_from(&TrainArgs {
        system: Some(args.system.unwrap_or(System::Wpg)),
        method: Some(MethodKind::Vanilla),
        mu: None,
        ..args.clone()
    })?;
    let cells = grid_configs(&template, &args);
    for cfg in &cells {
        cfg.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()?;
    let results: Vec<Result<bool>> = pool.install(|| cells.par_iter().map(|cfg| train_one(cfg, &root)).collect());
    let mut any_diverged = false;
    for r in results {
        any_diverged |= r?;
    }
    Ok(any_diverged)
}

fn report(args: ReportArgs) -> Result<()> {
    let mut summaries = Vec::new();
    for root in &args.runs {
        if !root.exists() {
            return Err(Error::MissingArtifact(root.clone()).into());
        }
        for dir in find_run_dirs(root)? {
            summaries.push(read_summary(&dir)?);
        }
    }
    if summaries.is_empty() {
        bail!(Error::Report("no run directories found".into()));
    }
    let table = aggregate(&summaries)?;
    print!("{}", table.to_text());
    if let Some(path) = args.csv {
        std::fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn plot_data(args: PlotArgs) -> Result<()> {
    let truth = match &args.test {
        Some(path) => Some(load_dataset(path)?.trajectory),
        None => None,
    };
    let csv = plot_run(&args.run, truth)?;
    match args.out {
        Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Shape { .. } | Error::Domain(_)) => 2,
        Some(Error::Divergence { .. }) => 3,
        Some(Error::MissingArtifact(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => generate(a).map(|_| false),
        Command::Train(a) => train(a),
        Command::Report(a) => report(a).map(|_| false),
        Command::PlotData(a) => plot_data(a).map(|_| false),
    };
    match outcome {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("error: training diverged; partial artifacts kept");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
