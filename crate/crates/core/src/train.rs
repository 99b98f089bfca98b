//! Training loops: the self-adaptive penalty algorithm with best-point
//! tracking, and plain descent for the vanilla and quadratic baselines.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MethodKind};
use crate::constraints::{raw_violation_metric, ConstraintSet};
use crate::data::{make_task, SystemSpec, TaskSpec};
use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::nn::{AdamState, Mlp};
use crate::ode::{solve, SolverConfig, Trajectory};
use crate::penalty::{LossRegime, PenaltyReport, Regime};
use crate::rng::seeded;

/// A network to fit to one ground-truth trajectory under a constraint set.
#[derive(Clone, Debug)]
pub struct Problem {
    pub net: Mlp,
    pub train: Trajectory<f64>,
    pub constraints: ConstraintSet,
    pub solver: SolverConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub k_max: usize,
    pub learning_rate: f64,
    pub loss: LossRegime,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    #[default]
    Completed,
    /// The solve (or a loss value) became non-finite at `iteration`.
    Diverged {
        iteration: usize,
        index: Option<usize>,
        time: Option<f64>,
        message: String,
    },
}

impl RunStatus {
    pub fn is_diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }
}

/// The outcome of a training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct Training {
    /// θ_best for the self-adaptive loop, the last iterate for baselines.
    pub params: Vec<f64>,
    pub history: Vec<PenaltyReport>,
    /// φ_best after each iteration (self-adaptive) or the running loss minimum (baselines).
    pub best_trace: Vec<f64>,
    pub phi_best: f64,
    pub status: RunStatus,
}

struct Step {
    loss: f64,
    report: PenaltyReport,
    grads: Option<Vec<f64>>,
}

/// Forward solve plus loss; gradients only when `want_grad(loss)` says so.
fn forward(
    graph: &mut Graph,
    problem: &Problem,
    regime: &LossRegime,
    params: &[f64],
    iteration: usize,
    want_grad: impl FnOnce(f64) -> bool,
) -> Result<Step> {
    graph.reset();
    let p = graph.vars(params);
    let y0 = graph.vars(&problem.train.states[0]);
    let pred = solve(
        |y| problem.net.forward_with(&p, y),
        &y0,
        &problem.train.grid,
        problem.solver,
    )?;
    let (loss, report) = regime.evaluate(&problem.constraints, &pred, &problem.train, iteration)?;
    graph.status()?;
    let grads = if want_grad(loss.value()) {
        graph.backward(loss)?;
        Some(graph.grads(&p))
    } else {
        None
    };
    Ok(Step {
        loss: loss.value(),
        report,
        grads,
    })
}

fn diverged(iteration: usize, err: &Error) -> RunStatus {
    let (index, time) = match err {
        Error::Divergence { index, time } => (Some(*index), Some(*time)),
        _ => (None, None),
    };
    RunStatus::Diverged {
        iteration,
        index,
        time,
        message: err.to_string(),
    }
}

fn is_divergence(err: &Error) -> bool {
    matches!(
        err,
        Error::Divergence { .. } | Error::Numerical { .. } | Error::NonFinite { .. }
    )
}

fn check(problem: &Problem, opts: &TrainOptions) -> Result<()> {
    if opts.k_max == 0 {
        return Err(Error::config("k_max must be at least 1"));
    }
    if problem.train.dim() != problem.net.input_dim() || problem.net.input_dim() != problem.net.output_dim() {
        return Err(Error::Shape {
            context: "network vs trajectory dimension",
            expected: problem.train.dim(),
            found: problem.net.input_dim(),
        });
    }
    opts.loss.validate()
}

/// Self-adaptive penalty training with best-point tracking.
///
/// Each iteration solves from the current θ and evaluates φ. An improving θ
/// becomes θ_best and its gradient is cached; Adam then always steps from
/// θ_best with the cached gradient, so a rejected candidate is discarded
/// while the optimiser moments keep advancing.
pub fn train_self_adaptive(problem: &Problem, opts: &TrainOptions) -> Result<Training> {
    check(problem, opts)?;
    let mut graph = Graph::new();
    let mut adam = AdamState::new(problem.net.param_count(), opts.learning_rate);
    let mut theta = problem.net.params().to_vec();
    let mut theta_best = theta.clone();
    let mut grad_best = vec![0.0; theta.len()];
    let mut phi_best = f64::INFINITY;
    let mut history = Vec::with_capacity(opts.k_max);
    let mut best_trace = Vec::with_capacity(opts.k_max);
    let mut status = RunStatus::Completed;

    for k in 1..=opts.k_max {
        let step = match forward(&mut graph, problem, &opts.loss, &theta, k, |phi| phi < phi_best) {
            Ok(step) => step,
            Err(e) if is_divergence(&e) => {
                status = diverged(k, &e);
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(grads) = step.grads {
            theta_best.clone_from(&theta);
            phi_best = step.loss;
            grad_best = grads;
        }
        history.push(step.report);
        best_trace.push(phi_best);

        theta.clone_from(&theta_best);
        if let Err(e) = adam.step(&mut theta, &grad_best) {
            status = diverged(k, &e);
            break;
        }
    }

    Ok(Training {
        params: theta_best,
        history,
        best_trace,
        phi_best,
        status,
    })
}

/// Plain gradient descent on `l` (vanilla) or `l + (μ/2)P` (quadratic); returns the last iterate.
pub fn train_baseline(problem: &Problem, opts: &TrainOptions) -> Result<Training> {
    check(problem, opts)?;
    if opts.loss.regime == Regime::SelfAdaptive {
        return Err(Error::config("train_baseline needs a vanilla or quadratic regime"));
    }
    let mut graph = Graph::new();
    let mut adam = AdamState::new(problem.net.param_count(), opts.learning_rate);
    let mut theta = problem.net.params().to_vec();
    let mut best = f64::INFINITY;
    let mut history = Vec::with_capacity(opts.k_max);
    let mut best_trace = Vec::with_capacity(opts.k_max);
    let mut status = RunStatus::Completed;

    for k in 1..=opts.k_max {
        let step = match forward(&mut graph, problem, &opts.loss, &theta, k, |_| true) {
            Ok(step) => step,
            Err(e) if is_divergence(&e) => {
                status = diverged(k, &e);
                break;
            }
            Err(e) => return Err(e),
        };
        best = best.min(step.loss);
        history.push(step.report);
        best_trace.push(best);
        let grads = step.grads.expect("baseline always differentiates");
        if let Err(e) = adam.step(&mut theta, &grads) {
            status = diverged(k, &e);
            break;
        }
    }

    Ok(Training {
        params: theta,
        history,
        best_trace,
        phi_best: best,
        status,
    })
}

/// Test-set metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean over steps and components; infinite when the solve diverged.
    pub mse: f64,
    /// Raw (un-normalised) mean violation; infinite when the solve diverged.
    pub p_raw: f64,
    pub diverged: bool,
}

/// Predicts `test` from its initial state with `net` and scores it.
pub fn evaluate(
    net: &Mlp,
    test: &Trajectory<f64>,
    constraints: &ConstraintSet,
    solver: SolverConfig,
) -> Result<Evaluation> {
    match predict(net, test, solver) {
        Ok(pred) => {
            let n = (pred.len() * pred.dim()) as f64;
            let sse: f64 = pred
                .states
                .iter()
                .zip(&test.states)
                .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
                .sum();
            let p_raw = raw_violation_metric(constraints, &pred)?;
            let diverged = !(sse.is_finite() && p_raw.is_finite());
            Ok(Evaluation {
                mse: if diverged { f64::INFINITY } else { sse / n },
                p_raw: if diverged { f64::INFINITY } else { p_raw },
                diverged,
            })
        }
        Err(Error::Divergence { .. }) => Ok(Evaluation {
            mse: f64::INFINITY,
            p_raw: f64::INFINITY,
            diverged: true,
        }),
        Err(e) => Err(e),
    }
}

/// Prediction on the grid of `reference`, starting from its first state.
pub fn predict(net: &Mlp, reference: &Trajectory<f64>, solver: SolverConfig) -> Result<Trajectory<f64>> {
    solve(|y| net.forward(y), &reference.states[0], &reference.grid, solver)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(with = "crate::harness::finite_or_null")]
    pub train_mse: f64,
    #[serde(with = "crate::harness::finite_or_null")]
    pub test_mse: f64,
    #[serde(with = "crate::harness::finite_or_null")]
    pub test_p_raw: f64,
    pub diverged: bool,
}

/// Everything produced by one experiment run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub params: Vec<f64>,
    pub metrics: Metrics,
    pub history: Vec<PenaltyReport>,
    pub best_trace: Vec<f64>,
    pub phi_best: f64,
    pub status: RunStatus,
    pub wall_time_s: f64,
    pub constraint_ids: Vec<String>,
    pub layers: Vec<crate::nn::Layer>,
}

/// Ground truth, constraints and a seeded initial network for `config`.
pub struct Experiment {
    pub problem: Problem,
    pub test: Trajectory<f64>,
    pub spec: SystemSpec,
}

impl Experiment {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut spec = SystemSpec::preset(config.system);
        spec.noise_sigma = config.noise_sigma;
        spec.noise_seed = config.seed;
        let task = TaskSpec::preset(config.system, config.task);
        let (train, test) = make_task(&spec, &task)?;
        let mut net = Mlp::new(config.architecture.layers(config.system)?)?;
        net.init_params(&mut seeded(config.seed));
        Ok(Self {
            problem: Problem {
                net,
                train,
                constraints: spec.constraints()?,
                solver: config.solver_config(),
            },
            test,
            spec,
        })
    }
}

/// Trains per `config` with the method it names and scores the result.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    let started = Instant::now();
    let exp = Experiment::from_config(config)?;
    let opts = TrainOptions {
        k_max: config.k_max,
        learning_rate: config.lr,
        loss: config.regime()?,
    };
    let training = match config.method {
        MethodKind::SelfAdaptive => train_self_adaptive(&exp.problem, &opts)?,
        MethodKind::Vanilla | MethodKind::Quadratic => train_baseline(&exp.problem, &opts)?,
    };
    let mut net = exp.problem.net.clone();
    net.set_params(training.params.clone())?;
    let solver = exp.problem.solver;
    let on_train = evaluate(&net, &exp.problem.train, &exp.problem.constraints, solver)?;
    let on_test = evaluate(&net, &exp.test, &exp.problem.constraints, solver)?;
    Ok(RunResult {
        config: config.clone(),
        params: training.params,
        metrics: Metrics {
            train_mse: on_train.mse,
            test_mse: on_test.mse,
            test_p_raw: on_test.p_raw,
            diverged: on_train.diverged || on_test.diverged || training.status.is_diverged(),
        },
        history: training.history,
        best_trace: training.best_trace,
        phi_best: training.phi_best,
        status: training.status,
        wall_time_s: started.elapsed().as_secs_f64(),
        constraint_ids: exp.problem.constraints.ids().iter().map(|s| s.to_string()).collect(),
        layers: exp.problem.net.layers().to_vec(),
    })
}

/// φ (or baseline loss) of `params` on `problem`, evaluated without a graph.
pub fn loss_at(problem: &Problem, regime: &LossRegime, params: &[f64]) -> Result<PenaltyReport> {
    let mut net = problem.net.clone();
    net.set_params(params.to_vec())?;
    let pred = predict(&net, &problem.train, problem.solver)?;
    let (_, report) = regime.evaluate(&problem.constraints, &pred, &problem.train, 0)?;
    Ok(report)
}
