//! Synthetic constrained systems and the reconstruction / extrapolation /
//! completion task splits.
//!
//! | system | state            | law                                   |
//! |--------|------------------|---------------------------------------|
//! | `wpg`  | `p`              | logistic growth `p' = r p (1 - p/K)`   |
//! | `cr`   | `m_A .. m_D`     | first-order chain `A -> B -> C -> D`   |
//! | `dho`  | `x, v`           | damped spring `m x'' = -k x - c x'`    |

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constraints::{Constraint, ConstraintExpr, ConstraintKind, ConstraintSet};
use crate::error::{Error, Result};
use crate::nn::HiddenLayer;
use crate::ode::{solve, Method, SolverConfig, TimeGrid, Trajectory, TrajectoryKind};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Wpg,
    Cr,
    Dho,
}

impl System {
    pub const ALL: [System; 3] = [System::Wpg, System::Cr, System::Dho];

    pub fn name(self) -> &'static str {
        match self {
            System::Wpg => "wpg",
            System::Cr => "cr",
            System::Dho => "dho",
        }
    }

    pub fn dim(self) -> usize {
        self.state_names().len()
    }

    pub fn state_names(self) -> &'static [&'static str] {
        match self {
            System::Wpg => &["p"],
            System::Cr => &["m_A", "m_B", "m_C", "m_D"],
            System::Dho => &["x", "v"],
        }
    }

    /// Hidden layers of the shipped network for this system.
    pub fn preset_hidden(self) -> Vec<HiddenLayer> {
        use HiddenLayer::*;
        match self {
            System::Wpg | System::Dho => vec![Linear(50), Tanh, Linear(50), Elu],
            System::Cr => vec![Linear(50), Tanh, Linear(64), Elu, Linear(50), Tanh],
        }
    }

    /// Default physical constants.
    pub fn default_params(self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            System::Wpg => &[("r", 0.025), ("K", 12.0)],
            System::Cr => &[("k1", 0.08), ("k2", 0.04), ("k3", 0.02), ("m_total", 1.0)],
            System::Dho => &[("m", 1.0), ("k", 1.0), ("c", 0.1)],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    pub fn default_y0(self) -> Vec<f64> {
        match self {
            System::Wpg => vec![0.5],
            System::Cr => vec![1.0, 0.0, 0.0, 0.0],
            System::Dho => vec![1.0, 0.0],
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|sys| sys.name() == s)
            .ok_or_else(|| Error::config(format!("unknown system `{s}` (valid: wpg, cr, dho)")))
    }
}

/// A fully specified ground-truth system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub system: System,
    pub params: BTreeMap<String, f64>,
    pub y0: Vec<f64>,
    pub span: (f64, f64),
    pub n_points: usize,
    /// Standard deviation of additive Gaussian observation noise.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

impl SystemSpec {
    /// Default constants on the system's reconstruction grid.
    pub fn preset(system: System) -> Self {
        let task = TaskSpec::preset(system, TaskKind::Reconstruction);
        Self {
            system,
            params: system.default_params(),
            y0: system.default_y0(),
            span: task.train.span,
            n_points: task.train.n_points,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    pub fn with_window(&self, window: Window) -> Self {
        Self {
            span: window.span,
            n_points: window.n_points,
            ..self.clone()
        }
    }

    pub fn param(&self, name: &str) -> Result<f64> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("{} needs parameter `{name}`", self.system)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 {
            return Err(Error::config("n_points must be at least 2"));
        }
        if !(self.span.1 > self.span.0) || !self.span.0.is_finite() || !self.span.1.is_finite() {
            return Err(Error::config(format!(
                "span ({}, {}) must be finite and increasing",
                self.span.0, self.span.1
            )));
        }
        if self.y0.len() != self.system.dim() {
            return Err(Error::Shape {
                context: "initial state",
                expected: self.system.dim(),
                found: self.y0.len(),
            });
        }
        if self.y0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("initial state must be finite"));
        }
        for name in self.system.default_params().keys() {
            let v = self.param(name)?;
            if !v.is_finite() {
                return Err(Error::config(format!("parameter `{name}` must be finite")));
            }
        }
        let positive: &[&str] = match self.system {
            System::Wpg => &["K"],
            System::Cr => &[],
            System::Dho => &["m", "k"],
        };
        for name in positive {
            if self.param(name)? <= 0.0 {
                return Err(Error::config(format!("parameter `{name}` must be positive")));
            }
        }
        if matches!(self.system, System::Cr | System::Dho) {
            let nonneg: &[&str] = if self.system == System::Cr {
                &["k1", "k2", "k3"]
            } else {
                &["c"]
            };
            for name in nonneg {
                if self.param(name)? < 0.0 {
                    return Err(Error::config(format!("parameter `{name}` must be non-negative")));
                }
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be finite and non-negative"));
        }
        Ok(())
    }

    /// The constraints every trajectory of this system must satisfy.
    pub fn constraints(&self) -> Result<ConstraintSet> {
        Ok(ConstraintSet::new(match self.system {
            System::Wpg => vec![Constraint::new(
                "capacity",
                ConstraintKind::Inequality,
                ConstraintExpr::Affine {
                    coeffs: vec![1.0],
                    offset: -self.param("K")?,
                },
            )],
            System::Cr => vec![Constraint::new(
                "mass",
                ConstraintKind::Equality,
                ConstraintExpr::Affine {
                    coeffs: vec![1.0; 4],
                    offset: -self.param("m_total")?,
                },
            )],
            System::Dho => vec![
                Constraint::new(
                    "energy",
                    ConstraintKind::Inequality,
                    ConstraintExpr::EnergyChange {
                        mass: self.param("m")?,
                        stiffness: self.param("k")?,
                    },
                ),
                Constraint::new(
                    "dissipation",
                    ConstraintKind::Equality,
                    ConstraintExpr::DissipationChange {
                        damping: self.param("c")?,
                    },
                ),
            ],
        }))
    }

    fn rhs(&self) -> Result<impl Fn(&[f64]) -> Result<Vec<f64>>> {
        let p = |n| self.param(n);
        let consts = match self.system {
            System::Wpg => [p("r")?, p("K")?, 0.0],
            System::Cr => [p("k1")?, p("k2")?, p("k3")?],
            System::Dho => [p("m")?, p("k")?, p("c")?],
        };
        let system = self.system;
        Ok(move |y: &[f64]| -> Result<Vec<f64>> {
            Ok(match system {
                System::Wpg => {
                    let [r, cap, _] = consts;
                    vec![r * y[0] * (1.0 - y[0] / cap)]
                }
                System::Cr => {
                    let [k1, k2, k3] = consts;
                    let (a, b, c) = (k1 * y[0], k2 * y[1], k3 * y[2]);
                    vec![-a, a - b, b - c, c]
                }
                System::Dho => {
                    let [m, k, c] = consts;
                    vec![y[1], -(k / m) * y[0] - (c / m) * y[1]]
                }
            })
        })
    }
}

/// Substeps per output interval for ground-truth integration.
pub const GROUND_TRUTH_SUBSTEPS: usize = 10;

/// Ground-truth trajectory on the uniform grid of `spec`.
pub fn generate(spec: &SystemSpec) -> Result<Trajectory<f64>> {
    spec.validate()?;
    let grid = TimeGrid::uniform(spec.span.0, spec.span.1, spec.n_points)?;
    let solver = SolverConfig {
        method: Method::Rk4,
        substeps: GROUND_TRUTH_SUBSTEPS,
    };
    let mut traj = solve(spec.rhs()?, &spec.y0, &grid, solver)?;
    traj.kind = TrajectoryKind::GroundTruth;
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::config(format!("noise: {e}")))?;
        let mut rng = seeded(spec.noise_seed);
        for state in &mut traj.states {
            for v in state.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reconstruction,
    Extrapolation,
    Completion,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::Reconstruction,
        TaskKind::Extrapolation,
        TaskKind::Completion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reconstruction => "reconstruction",
            TaskKind::Extrapolation => "extrapolation",
            TaskKind::Completion => "completion",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown task `{s}` (valid: reconstruction, extrapolation, completion)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub span: (f64, f64),
    pub n_points: usize,
}

impl Window {
    pub const fn new(start: f64, end: f64, n_points: usize) -> Self {
        Self {
            span: (start, end),
            n_points,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train: Window,
    pub test: Window,
}

impl TaskSpec {
    /// The published grids for each system and task.
    pub fn preset(system: System, kind: TaskKind) -> Self {
        let (train, extrap_end, completion_n) = match system {
            System::Wpg => (Window::new(0.0, 300.0, 200), 400.0, 300),
            System::Cr => (Window::new(0.0, 100.0, 100), 200.0, 200),
            System::Dho => (Window::new(0.0, 50.0, 400), 400.0, 600),
        };
        let test = match kind {
            TaskKind::Reconstruction => train,
            TaskKind::Extrapolation => Window {
                span: (train.span.0, extrap_end),
                ..train
            },
            TaskKind::Completion => Window {
                n_points: completion_n,
                ..train
            },
        };
        Self { kind, train, test }
    }

    pub fn validate(&self) -> Result<()> {
        let (tr, te) = (self.train, self.test);
        let ok = match self.kind {
            TaskKind::Reconstruction => tr == te,
            TaskKind::Extrapolation => te.span.0 <= tr.span.0 && te.span.1 > tr.span.1,
            TaskKind::Completion => tr.span == te.span && te.n_points > tr.n_points,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "inconsistent {} windows: train {:?}, test {:?}",
                self.kind, tr, te
            )))
        }
    }
}

/// Train and test ground truth for one task, from the same constants and initial state.
pub fn make_task(base: &SystemSpec, task: &TaskSpec) -> Result<(Trajectory<f64>, Trajectory<f64>)> {
    task.validate()?;
    if task.test.span.0 != task.train.span.0 {
        return Err(Error::config("train and test windows must start together"));
    }
    let train = generate(&base.with_window(task.train))?;
    let test = generate(&base.with_window(task.test))?;
    Ok((train, test))
}

/// A dataset file's contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub system: System,
    pub params: BTreeMap<String, f64>,
    pub trajectory: Trajectory<f64>,
}

const DATASET_MAGIC: &str = "# cnode-dataset v1";

/// CSV with a `# cnode-dataset v1 system=.. params=k=v;..` line and a `t,<states>` header.
pub fn write_dataset(
    mut out: impl Write,
    system: System,
    params: &BTreeMap<String, f64>,
    traj: &Trajectory<f64>,
) -> std::io::Result<()> {
    let params: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(out, "{DATASET_MAGIC} system={system} params={}", params.join(";"))?;
    writeln!(out, "t,{}", system.state_names().join(","))?;
    for (t, state) in traj.grid.points().iter().zip(&traj.states) {
        write!(out, "{t}")?;
        for v in state {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Dataset> {
    let bad = |detail: String| Error::Format {
        what: "dataset",
        detail,
    };
    let mut lines = input.lines();
    let mut next = || -> Result<Option<String>> {
        lines
            .next()
            .transpose()
            .map_err(|e| bad(e.to_string()))
    };
    let meta = next()?.ok_or_else(|| bad("empty file".into()))?;
    let meta = meta
        .strip_prefix(DATASET_MAGIC)
        .ok_or_else(|| bad(format!("missing `{DATASET_MAGIC}` line")))?;
    let mut system = None;
    let mut params = BTreeMap::new();
    for field in meta.split_whitespace() {
        if let Some(name) = field.strip_prefix("system=") {
            system = Some(name.parse::<System>()?);
        } else if let Some(list) = field.strip_prefix("params=") {
            for kv in list.split(';').filter(|s| !s.is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad param `{kv}`")))?;
                let v: f64 = v.parse().map_err(|_| bad(format!("bad value in `{kv}`")))?;
                params.insert(k.to_string(), v);
            }
        }
    }
    let system = system.ok_or_else(|| bad("metadata lacks system=".into()))?;
    let header = next()?.ok_or_else(|| bad("missing header".into()))?;
    let expected = format!("t,{}", system.state_names().join(","));
    if header != expected {
        return Err(bad(format!("header `{header}`, expected `{expected}`")));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    while let Some(line) = next()? {
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split(',')
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row `{line}`: {e}")))?;
        if values.len() != system.dim() + 1 {
            return Err(bad(format!("row `{line}` has {} columns", values.len())));
        }
        times.push(values[0]);
        states.push(values[1..].to_vec());
    }
    let grid = TimeGrid::new(times)?;
    let trajectory = Trajectory::new(grid, states, TrajectoryKind::GroundTruth)?;
    Ok(Dataset {
        system,
        params,
        trajectory,
    })
}

pub fn save_dataset(
    path: &Path,
    system: System,
    params: &BTreeMap<String, f64>,
    traj: &Trajectory<f64>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_dataset(&mut out, system, params, traj).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::raw_violation_metric;
    use proptest::prelude::*;

    #[test]
    fn wpg_respects_capacity_and_grows() {
        let traj = generate(&SystemSpec::preset(System::Wpg)).unwrap();
        assert_eq!(traj.len(), 200);
        for w in traj.states.windows(2) {
            assert!(w[1][0] >= w[0][0]);
        }
        assert!(traj.states.iter().all(|s| s[0] <= 12.0));
        // logistic closed form
        let t = traj.grid.end();
        let exact = 12.0 / (1.0 + 23.0 * (-0.025 * t).exp());
        assert!((traj.states[199][0] - exact).abs() < 1e-9);
    }

    #[test]
    fn cr_conserves_mass() {
        let traj = generate(&SystemSpec::preset(System::Cr)).unwrap();
        for s in &traj.states {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn dho_energy_strictly_decreases() {
        let traj = generate(&SystemSpec::preset(System::Dho)).unwrap();
        let energy: Vec<f64> = traj
            .states
            .iter()
            .map(|s| 0.5 * s[1] * s[1] + 0.5 * s[0] * s[0])
            .collect();
        assert!(energy.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn ground_truth_satisfies_wpg_and_cr_constraints() {
        for system in [System::Wpg, System::Cr] {
            for kind in TaskKind::ALL {
                let spec = SystemSpec::preset(system);
                let (train, test) = make_task(&spec, &TaskSpec::preset(system, kind)).unwrap();
                let cs = spec.constraints().unwrap();
                assert!(raw_violation_metric(&cs, &train).unwrap() <= 1e-8);
                assert!(raw_violation_metric(&cs, &test).unwrap() <= 1e-8);
            }
        }
    }

    #[test]
    fn generation_is_bit_identical() {
        for system in System::ALL {
            let spec = SystemSpec::preset(system);
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }
    }

    #[test]
    fn task_presets() {
        let wpg = TaskSpec::preset(System::Wpg, TaskKind::Reconstruction);
        assert_eq!(wpg.train, wpg.test);
        assert_eq!(wpg.train, Window::new(0.0, 300.0, 200));

        let cr = TaskSpec::preset(System::Cr, TaskKind::Extrapolation);
        assert_eq!(cr.train, Window::new(0.0, 100.0, 100));
        assert_eq!(cr.test, Window::new(0.0, 200.0, 100));

        let dho = TaskSpec::preset(System::Dho, TaskKind::Completion);
        assert_eq!(dho.train, Window::new(0.0, 50.0, 400));
        assert_eq!(dho.test, Window::new(0.0, 50.0, 600));

        let (train, test) = make_task(&SystemSpec::preset(System::Dho), &dho).unwrap();
        assert_eq!((train.len(), test.len()), (400, 600));
        assert_eq!(train.states[0], test.states[0]);
    }

    #[test]
    fn inconsistent_tasks_rejected() {
        let mut t = TaskSpec::preset(System::Wpg, TaskKind::Extrapolation);
        t.test.span.1 = 200.0;
        assert!(matches!(t.validate(), Err(Error::Config(_))));
        let mut c = TaskSpec::preset(System::Wpg, TaskKind::Completion);
        c.test.n_points = 100;
        assert!(c.validate().is_err());
        let mut r = TaskSpec::preset(System::Wpg, TaskKind::Reconstruction);
        r.test.n_points = 300;
        assert!(make_task(&SystemSpec::preset(System::Wpg), &r).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut spec = SystemSpec::preset(System::Wpg);
        spec.params.remove("r");
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let mut spec = SystemSpec::preset(System::Dho);
        spec.params.insert("m".into(), 0.0);
        assert!(generate(&spec).is_err());
        let mut spec = SystemSpec::preset(System::Cr);
        spec.y0.pop();
        assert!(generate(&spec).is_err());
        assert!("lorenz".parse::<System>().unwrap_err().to_string().contains("wpg, cr, dho"));
    }

    #[test]
    fn noise_is_seeded() {
        let mut spec = SystemSpec::preset(System::Wpg);
        spec.noise_sigma = 0.1;
        spec.noise_seed = 4;
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        assert_ne!(a, generate(&SystemSpec::preset(System::Wpg)).unwrap());
    }

    #[test]
    fn dataset_file_round_trip() {
        for system in System::ALL {
            let spec = SystemSpec::preset(system);
            let traj = generate(&spec).unwrap();
            let mut buf = Vec::new();
            write_dataset(&mut buf, system, &spec.params, &traj).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(text.starts_with(&format!("# cnode-dataset v1 system={system} params=")));
            let back = read_dataset(buf.as_slice()).unwrap();
            assert_eq!(back.system, system);
            assert_eq!(back.params, spec.params);
            assert_eq!(back.trajectory, traj);
        }
    }

    #[test]
    fn malformed_dataset_rejected() {
        assert!(read_dataset(&b"t,p\n0,1\n"[..]).is_err());
        assert!(read_dataset(&b"# cnode-dataset v1 system=wpg params=\nt,x\n"[..]).is_err());
        assert!(read_dataset(&b"# cnode-dataset v1 system=wpg params=\nt,p\n0,1,2\n1,1,1\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn grids_equally_spaced(n in 2usize..700, end in 1.0f64..500.0) {
            let spec = SystemSpec { n_points: n, span: (0.0, end), ..SystemSpec::preset(System::Wpg) };
            let traj = generate(&spec).unwrap();
            let pts = traj.grid.points();
            let h = pts[1] - pts[0];
            for w in pts.windows(2) {
                prop_assert!((w[1] - w[0] - h).abs() < 1e-12);
            }
        }
    }
}
