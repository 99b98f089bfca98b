//! Multilayer perceptrons for the ODE right-hand side, and the Adam optimiser.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::diff::Scalar;
use crate::error::{Error, Result};
use crate::rng::{unit_open, Prng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Linear { inputs: usize, outputs: usize },
    Tanh,
    Elu,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Linear { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }
}

/// Hidden-layer description, independent of the state dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenLayer {
    Linear(usize),
    Tanh,
    Elu,
}

impl fmt::Display for HiddenLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HiddenLayer::Linear(n) => write!(f, "linear:{n}"),
            HiddenLayer::Tanh => f.write_str("tanh"),
            HiddenLayer::Elu => f.write_str("elu"),
        }
    }
}

impl FromStr for HiddenLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(HiddenLayer::Tanh),
            "elu" => Ok(HiddenLayer::Elu),
            other => other
                .strip_prefix("linear:")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n > 0)
                .map(HiddenLayer::Linear)
                .ok_or_else(|| {
                    Error::config(format!(
                        "unknown layer `{other}` (expected linear:<width>, tanh or elu)"
                    ))
                }),
        }
    }
}

/// Builds the layer stack `dim -> hidden... -> dim`, ending in a linear map back to `dim`.
pub fn build_layers(dim: usize, hidden: &[HiddenLayer]) -> Result<Vec<Layer>> {
    if dim == 0 {
        return Err(Error::config("state dimension must be positive"));
    }
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut width = dim;
    for h in hidden {
        layers.push(match *h {
            HiddenLayer::Linear(out) => {
                let layer = Layer::Linear {
                    inputs: width,
                    outputs: out,
                };
                width = out;
                layer
            }
            HiddenLayer::Tanh => Layer::Tanh,
            HiddenLayer::Elu => Layer::Elu,
        });
    }
    layers.push(Layer::Linear {
        inputs: width,
        outputs: dim,
    });
    Ok(layers)
}

/// A feed-forward network `f_θ: R^d -> R^d`.
///
/// Parameters are stored flat, per linear layer in order: the weight matrix
/// row-major (one row per output neuron) followed by the biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    params: Vec<f64>,
}

impl Mlp {
    /// A network with all parameters zero.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for layer in &layers {
            if let Layer::Linear { inputs, outputs } = *layer {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::config("linear layers need nonzero dimensions"));
                }
                if let Some(w) = width {
                    if w != inputs {
                        return Err(Error::Shape {
                            context: "consecutive linear layers",
                            expected: w,
                            found: inputs,
                        });
                    }
                }
                width = Some(outputs);
            }
        }
        if width.is_none() {
            return Err(Error::config("network needs at least one linear layer"));
        }
        let count = layers.iter().map(Layer::param_count).sum();
        Ok(Self {
            layers,
            params: vec![0.0; count],
        })
    }

    pub fn with_params(layers: Vec<Layer>, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::new(layers)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape {
                context: "parameter vector",
                expected: self.params.len(),
                found: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match *l {
                Layer::Linear { inputs, .. } => Some(inputs),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match *l {
                Layer::Linear { outputs, .. } => Some(outputs),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Glorot-uniform weights, zero biases; a pure function of the architecture and seed.
    pub fn init_params(&mut self, rng: &mut Prng) {
        let mut offset = 0;
        for layer in &self.layers {
            if let Layer::Linear { inputs, outputs } = *layer {
                let bound = (6.0 / (inputs + outputs) as f64).sqrt();
                let weights = inputs * outputs;
                for w in &mut self.params[offset..offset + weights] {
                    *w = bound * (2.0 * unit_open(rng.next_u64()) - 1.0);
                }
                self.params[offset + weights..offset + weights + outputs].fill(0.0);
                offset += weights + outputs;
            }
        }
    }

    /// Evaluates the network with this network's own parameters.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_with(&self.params, input)
    }

    /// Evaluates the layer stack with externally supplied parameters, e.g. graph leaves.
    pub fn forward_with<S: Scalar>(&self, params: &[S], input: &[S]) -> Result<Vec<S>> {
        if params.len() != self.params.len() {
            return Err(Error::Shape {
                context: "parameter vector",
                expected: self.params.len(),
                found: params.len(),
            });
        }
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        let mut x = input.to_vec();
        let mut offset = 0;
        for layer in &self.layers {
            x = match *layer {
                Layer::Linear { inputs, outputs } => {
                    let weights = &params[offset..offset + inputs * outputs];
                    let biases = &params[offset + inputs * outputs..offset + inputs * outputs + outputs];
                    offset += inputs * outputs + outputs;
                    weights
                        .chunks_exact(inputs)
                        .zip(biases)
                        .map(|(row, &b)| S::affine(b, row, &x))
                        .collect()
                }
                Layer::Tanh => x.into_iter().map(S::tanh).collect(),
                Layer::Elu => x.into_iter().map(S::elu).collect(),
            };
        }
        Ok(x)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            learning_rate,
        }
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                context: "adam step",
                expected: self.m.len(),
                found: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                index,
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

const PARAMS_MAGIC: &str = "cnode-params v1";

/// Writes `cnode-params v1 <count>\n` followed by little-endian f64 values.
pub fn write_params(mut out: impl Write, params: &[f64]) -> std::io::Result<()> {
    writeln!(out, "{PARAMS_MAGIC} {}", params.len())?;
    let mut buf = Vec::with_capacity(params.len() * 8);
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_params(mut input: impl Read) -> Result<Vec<f64>> {
    let bad = |detail: String| Error::Format {
        what: "parameter snapshot",
        detail,
    };
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| bad(e.to_string()))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|e| bad(e.to_string()))?;
    let count: usize = header
        .strip_prefix(PARAMS_MAGIC)
        .map(str::trim)
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad(format!("bad header `{header}`")))?;
    let body = &bytes[newline + 1..];
    if body.len() != count * 8 {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            count * 8,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn save_params(path: &Path, params: &[f64]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_params(std::io::BufWriter::new(file), params).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(std::io::BufReader::new(file))
}
