//! Run directories (`history.csv`, `params.bin`, `result.json`), aggregation
//! over seeds, and curve export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{make_task, SystemSpec, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{load_params, save_params, Mlp};
use crate::ode::Trajectory;
use crate::penalty::PenaltyReport;
use crate::train::{predict, Metrics, RunResult, RunStatus};

pub const HISTORY_FILE: &str = "history.csv";
pub const PARAMS_FILE: &str = "params.bin";
pub const RESULT_FILE: &str = "result.json";

/// JSON has no infinities; non-finite metrics are written as `null` and read back as +inf.
pub mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            ser.serialize_f64(*x)
        } else {
            ser.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(de)?.unwrap_or(f64::INFINITY))
    }
}

/// Contents of `result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub status: RunStatus,
    pub metrics: Metrics,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub iterations: usize,
    #[serde(with = "finite_or_null")]
    pub phi_best: f64,
    pub wall_time_s: f64,
}

impl RunSummary {
    pub fn from_result(run: &RunResult) -> Self {
        Self {
            status: run.status.clone(),
            metrics: run.metrics,
            config: run.config.clone(),
            seed: run.config.seed,
            iterations: run.history.len(),
            phi_best: run.phi_best,
            wall_time_s: run.wall_time_s,
        }
    }
}

pub fn history_csv(constraint_ids: &[&str], history: &[PenaltyReport]) -> String {
    let mut out = PenaltyReport::csv_header(constraint_ids);
    out.push('\n');
    for row in history {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes all three artifacts of `run` into `dir`, creating it if needed.
pub fn write_run_dir(dir: &Path, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids: Vec<&str> = run.constraint_ids.iter().map(String::as_str).collect();
    write_file(&dir.join(HISTORY_FILE), &history_csv(&ids, &run.history))?;
    save_params(&dir.join(PARAMS_FILE), &run.params)?;
    let json = serde_json::to_string_pretty(&RunSummary::from_result(run))
        .map_err(|e| Error::Report(e.to_string()))?;
    write_file(&dir.join(RESULT_FILE), &(json + "\n"))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(RESULT_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "result.json",
        detail: e.to_string(),
    })
}

/// The trained network stored in a run directory.
pub fn load_network(dir: &Path, config: &ExperimentConfig) -> Result<Mlp> {
    let params = load_params(&dir.join(PARAMS_FILE))?;
    Mlp::with_params(config.architecture.layers(config.system)?, params)
}

/// The test trajectory `config` was evaluated on.
pub fn test_set(config: &ExperimentConfig) -> Result<Trajectory<f64>> {
    let mut spec = SystemSpec::preset(config.system);
    spec.noise_sigma = config.noise_sigma;
    spec.noise_seed = config.seed;
    let (_, test) = make_task(&spec, &TaskSpec::preset(config.system, config.task))?;
    Ok(test)
}

/// Truth and prediction curves as CSV: `t,<state>_true..,<state>_pred..`.
pub fn plot_data(names: &[&str], truth: &Trajectory<f64>, pred: &Trajectory<f64>) -> Result<String> {
    if truth.len() != pred.len() || truth.dim() != pred.dim() || truth.dim() != names.len() {
        return Err(Error::Shape {
            context: "plot data",
            expected: truth.len() * truth.dim(),
            found: pred.len() * pred.dim(),
        });
    }
    let mut out = String::from("t");
    for n in names {
        write!(out, ",{n}_true").unwrap();
    }
    for n in names {
        write!(out, ",{n}_pred").unwrap();
    }
    out.push('\n');
    for (i, t) in truth.grid.points().iter().enumerate() {
        write!(out, "{t}").unwrap();
        for v in truth.states[i].iter().chain(&pred.states[i]) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Curves for the run in `dir` on `truth`, or on its own test set when `truth` is `None`.
pub fn plot_run(dir: &Path, truth: Option<Trajectory<f64>>) -> Result<String> {
    let summary = read_summary(dir)?;
    let config = &summary.config;
    let net = load_network(dir, config)?;
    let truth = match truth {
        Some(t) => t,
        None => test_set(config)?,
    };
    let pred = predict(&net, &truth, config.solver_config()).or_else(|e| match e {
        // keep the rows that were computed before blow-up visible as non-finite
        Error::Divergence { .. } => Ok(Trajectory {
            grid: truth.grid.clone(),
            states: vec![vec![f64::NAN; truth.dim()]; truth.len()],
            kind: crate::ode::TrajectoryKind::Predicted,
        }),
        other => Err(other),
    })?;
    plot_data(config.system.state_names(), &truth, &pred)
}

/// One (system, task, method) cell summarised over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub system: String,
    pub task: String,
    pub method: String,
    pub n_runs: usize,
    pub mse_mean: f64,
    pub mse_std: Option<f64>,
    pub p_mean: f64,
    pub p_std: Option<f64>,
    pub best_mse: bool,
    pub best_p: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AggregateTable {
    pub rows: Vec<AggregateRow>,
}

fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 || !mean.is_finite() {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// The config with the seed blanked, used to check runs in one group agree.
fn seedless(cfg: &ExperimentConfig) -> ExperimentConfig {
    cfg.clone().with_seed(0)
}

/// Groups runs by (system, task, method label) and marks per-(system, task) minima.
pub fn aggregate(runs: &[RunSummary]) -> Result<AggregateTable> {
    if runs.is_empty() {
        return Err(Error::Report("no runs to aggregate".into()));
    }
    let mut groups: BTreeMap<(String, String, String), Vec<&RunSummary>> = BTreeMap::new();
    for run in runs {
        let c = &run.config;
        groups
            .entry((c.system.to_string(), c.task.to_string(), c.method_label()))
            .or_default()
            .push(run);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((system, task, method), members) in groups {
        let reference = seedless(&members[0].config);
        if let Some(odd) = members.iter().find(|r| seedless(&r.config) != reference) {
            return Err(Error::Report(format!(
                "runs in {system}/{task}/{method} disagree on configuration (seed {} vs seed {})",
                members[0].seed, odd.seed
            )));
        }
        let mse: Vec<f64> = members.iter().map(|r| r.metrics.test_mse).collect();
        let p: Vec<f64> = members.iter().map(|r| r.metrics.test_p_raw).collect();
        let (mse_mean, mse_std) = mean_std(&mse);
        let (p_mean, p_std) = mean_std(&p);
        rows.push(AggregateRow {
            system,
            task,
            method,
            n_runs: members.len(),
            mse_mean,
            mse_std,
            p_mean,
            p_std,
            best_mse: false,
            best_p: false,
        });
    }
    let mut cells: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        cells.entry((r.system.clone(), r.task.clone())).or_default().push(i);
    }
    for idx in cells.values() {
        let best_mse = idx.iter().map(|&i| rows[i].mse_mean).fold(f64::INFINITY, f64::min);
        let best_p = idx.iter().map(|&i| rows[i].p_mean).fold(f64::INFINITY, f64::min);
        for &i in idx {
            rows[i].best_mse = rows[i].mse_mean == best_mse && best_mse.is_finite();
            rows[i].best_p = rows[i].p_mean == best_p && best_p.is_finite();
        }
    }
    Ok(AggregateTable { rows })
}

fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.3e}")
    } else {
        "inf".to_string()
    }
}

fn fmt_std(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_else(|| "NA".to_string())
}

impl AggregateTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("system,task,method,n_runs,mse_mean,mse_std,p_mean,p_std,best\n");
        for r in &self.rows {
            let best = match (r.best_mse, r.best_p) {
                (true, true) => "mse;p",
                (true, false) => "mse",
                (false, true) => "p",
                (false, false) => "",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.system,
                r.task,
                r.method,
                r.n_runs,
                r.mse_mean,
                r.mse_std.map(|s| s.to_string()).unwrap_or_default(),
                r.p_mean,
                r.p_std.map(|s| s.to_string()).unwrap_or_default(),
                best
            )
            .unwrap();
        }
        out
    }

    /// Fixed-width table for terminals; `*` marks the best value of a cell.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<5} {:<15} {:<20} {:>3}  {:<24} {:<24}\n",
            "sys", "task", "method", "n", "MSE (mean ± std)", "P (mean ± std)"
        );
        for r in &self.rows {
            let mse = format!(
                "{} ± {}{}",
                fmt_num(r.mse_mean),
                fmt_std(r.mse_std),
                if r.best_mse { " *" } else { "" }
            );
            let p = format!(
                "{} ± {}{}",
                fmt_num(r.p_mean),
                fmt_std(r.p_std),
                if r.best_p { " *" } else { "" }
            );
            writeln!(
                out,
                "{:<5} {:<15} {:<20} {:>3}  {:<24} {:<24}",
                r.system, r.task, r.method, r.n_runs, mse, p
            )
            .unwrap();
        }
        out
    }
}

/// Run directories directly under `root` (those holding a `result.json`), sorted.
pub fn find_run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(RESULT_FILE).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RESULT_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}
