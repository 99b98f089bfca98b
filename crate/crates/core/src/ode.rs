//! Fixed-step explicit integrators, generic over [`Scalar`] so a solve can be
//! differentiated end to end.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::Scalar;
use crate::error::{Error, Result};

/// Strictly increasing, finite output times.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::config("time grid needs at least two points"));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("time grid contains non-finite points"));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("time grid must be strictly increasing"));
        }
        Ok(Self { points })
    }

    /// `n` equally spaced points from `start` to `end` inclusive.
    pub fn uniform(start: f64, end: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("time grid needs at least two points"));
        }
        if !(end > start) {
            return Err(Error::config(format!("empty time span [{start}, {end}]")));
        }
        let h = (end - start) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|k| start + k as f64 * h).collect();
        points[n - 1] = end;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    GroundTruth,
    Predicted,
}

/// A time grid with one state vector per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S = f64> {
    pub grid: TimeGrid,
    pub states: Vec<Vec<S>>,
    pub kind: TrajectoryKind,
}

impl<S: Scalar> Trajectory<S> {
    pub fn new(grid: TimeGrid, states: Vec<Vec<S>>, kind: TrajectoryKind) -> Result<Self> {
        if states.len() != grid.len() {
            return Err(Error::Shape {
                context: "trajectory states vs grid",
                expected: grid.len(),
                found: states.len(),
            });
        }
        let dim = states[0].len();
        if let Some(bad) = states.iter().find(|s| s.len() != dim) {
            return Err(Error::Shape {
                context: "trajectory state dimension",
                expected: dim,
                found: bad.len(),
            });
        }
        Ok(Self { grid, states, kind })
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Plain values of every state.
    pub fn values(&self) -> Trajectory<f64> {
        Trajectory {
            grid: self.grid.clone(),
            states: self
                .states
                .iter()
                .map(|s| s.iter().map(Scalar::value).collect())
                .collect(),
            kind: self.kind,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::config(format!(
                "unknown solver `{other}` (expected euler or rk4)"
            ))),
        }
    }
}

/// Integration scheme plus the number of equal substeps between grid points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub substeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            substeps: 1,
        }
    }
}

fn axpy<S: Scalar>(y: &[S], h: f64, k: &[S]) -> Vec<S> {
    y.iter().zip(k).map(|(&a, &b)| a + b * h).collect()
}

fn step<S, F>(f: &mut F, y: &[S], h: f64, method: Method) -> Result<Vec<S>>
where
    S: Scalar,
    F: FnMut(&[S]) -> Result<Vec<S>>,
{
    let mut eval = |state: &[S]| -> Result<Vec<S>> {
        let dy = f(state)?;
        if dy.len() != state.len() {
            return Err(Error::Shape {
                context: "dynamics output",
                expected: state.len(),
                found: dy.len(),
            });
        }
        Ok(dy)
    };
    match method {
        Method::Euler => {
            let k1 = eval(y)?;
            Ok(axpy(y, h, &k1))
        }
        Method::Rk4 => {
            let k1 = eval(y)?;
            let k2 = eval(&axpy(y, 0.5 * h, &k1))?;
            let k3 = eval(&axpy(y, 0.5 * h, &k2))?;
            let k4 = eval(&axpy(y, h, &k3))?;
            Ok(y.iter()
                .enumerate()
                .map(|(i, &yi)| yi + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0))
                .collect())
        }
    }
}

/// Integrates the autonomous system `y' = f(y)` from `y0` at `grid[0]`,
/// emitting one state per grid point (`states[0] == y0`).
pub fn solve<S, F>(
    mut f: F,
    y0: &[S],
    grid: &TimeGrid,
    solver: SolverConfig,
) -> Result<Trajectory<S>>
where
    S: Scalar,
    F: FnMut(&[S]) -> Result<Vec<S>>,
{
    if solver.substeps == 0 {
        return Err(Error::config("substeps must be at least 1"));
    }
    if y0.is_empty() {
        return Err(Error::config("initial state is empty"));
    }
    if y0.iter().any(|v| !v.value().is_finite()) {
        return Err(Error::Divergence {
            index: 0,
            time: grid.start(),
        });
    }
    let mut states = Vec::with_capacity(grid.len());
    states.push(y0.to_vec());
    let mut y = y0.to_vec();
    for (index, w) in grid.points().windows(2).enumerate() {
        let h = (w[1] - w[0]) / solver.substeps as f64;
        for _ in 0..solver.substeps {
            y = step(&mut f, &y, h, solver.method)?;
        }
        if y.iter().any(|v| !v.value().is_finite()) {
            return Err(Error::Divergence {
                index: index + 1,
                time: w[1],
            });
        }
        states.push(y.clone());
    }
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        kind: TrajectoryKind::Predicted,
    })
}
