//! Graph-convolutional encoder and the mirrored decoder.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use super::params::{fan_in_uniform, noisy_identity, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Tape, Var};

pub const DEFAULT_CHANNELS: [usize; 5] = [2, 32, 16, 8, 8];
pub const ADJACENCY_INIT_NOISE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Factorized spatial and temporal adjacencies.
    Separable,
    /// One dense adjacency over all `V·T` nodes.
    Plain,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Separable => "separable",
            EncoderKind::Plain => "plain",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(EncoderKind::Separable),
            "plain" => Ok(EncoderKind::Plain),
            other => Err(Error::Config(format!(
                "unknown encoder `{other}` (expected separable | plain)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Mean over frames and joints: embedding width `C_out`.
    Mean,
    /// Row-major flatten: embedding width `T·V·C_out`.
    Flatten,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Flatten => "flatten",
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "flatten" => Ok(Pooling::Flatten),
            other => Err(Error::Config(format!(
                "unknown pooling `{other}` (expected mean | flatten)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub frames: usize,
    pub joints: usize,
    /// Widths from the input (2) to the last layer; one more than the layer
    /// count.
    pub channels: Vec<usize>,
    pub kind: EncoderKind,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            frames: crate::data::DEFAULT_WINDOW,
            joints: crate::data::DEFAULT_JOINTS,
            channels: DEFAULT_CHANNELS.to_vec(),
            kind: EncoderKind::Separable,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config(
                "channels must list at least an input and an output width".into(),
            ));
        }
        if self.channels[0] != 2 {
            return Err(Error::Config(format!(
                "channels must start at 2 (x, y), got {}",
                self.channels[0]
            )));
        }
        if self.channels.contains(&0) || self.frames == 0 || self.joints == 0 {
            return Err(Error::Config(
                "channel widths, frames and joints must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn output_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    pub fn embedding_width(&self) -> usize {
        match self.pooling {
            Pooling::Mean => self.output_channels(),
            Pooling::Flatten => self.frames * self.joints * self.output_channels(),
        }
    }

    /// Adjacency parameters of one layer.
    pub fn adjacency_params_per_layer(&self) -> usize {
        match self.kind {
            EncoderKind::Separable => separable_adjacency_params(self.frames, self.joints),
            EncoderKind::Plain => plain_adjacency_params(self.frames, self.joints),
        }
    }
}

/// `T·V² + V·T²`.
pub fn separable_adjacency_params(frames: usize, joints: usize) -> usize {
    frames * joints * joints + joints * frames * frames
}

/// `(V·T)²`.
pub fn plain_adjacency_params(frames: usize, joints: usize) -> usize {
    (frames * joints).pow(2)
}

/// Applies `W: [C, C']` to every node of `[N,T,V,C]` or `[T,V,C]`.
pub fn channel_mix(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let c = *shape.last().unwrap_or(&0);
    let rows = if c == 0 { 0 } else { tape.value(x).numel() / c };
    let flat = tape.reshape(x, &[rows, c])?;
    let mixed = tape.matmul(flat, w)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty shape") = tape.value(w).shape()[1];
    tape.reshape(mixed, &out_shape)
}

/// `σ(A_s · A_t · X · W)`, the temporal contraction applied first.
pub fn separable_layer(
    tape: &mut Tape,
    x: Var,
    a_s: Var,
    a_t: Var,
    w: Var,
    act: Activation,
) -> Result<Var> {
    let h = tape.contract_temporal(a_t, x)?;
    let h = tape.contract_spatial(a_s, h)?;
    let h = channel_mix(tape, h, w)?;
    Ok(tape.activation(h, act))
}

/// `σ(A_st · X · W)` over `X: [N, VT, C]` or `[VT, C]`.
pub fn plain_layer(tape: &mut Tape, x: Var, a_st: Var, w: Var, act: Activation) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let nodes = tape.value(a_st).shape().to_vec();
    if nodes.len() != 2 || nodes[0] != nodes[1] {
        return Err(Error::dim("plain_layer", &nodes, &shape));
    }
    let (n, vt, c) = match shape[..] {
        [vt, c] => (1, vt, c),
        [n, vt, c] => (n, vt, c),
        _ => return Err(Error::dim("plain_layer", &shape, &nodes)),
    };
    let adj = tape.reshape(a_st, &[1, nodes[0], nodes[0]])?;
    let x4 = tape.reshape(x, &[n, 1, vt, c])?;
    let h = tape.contract_spatial(adj, x4)?;
    let h = channel_mix(tape, h, w)?;
    let h = tape.activation(h, act);
    let c_out = *tape.value(h).shape().last().expect("4d");
    if shape.len() == 2 {
        tape.reshape(h, &[vt, c_out])
    } else {
        tape.reshape(h, &[n, vt, c_out])
    }
}

/// Registers the parameters of a stack of graph layers under `prefix`.
pub(crate) fn register_stack(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &EncoderConfig,
    channels: &[usize],
) {
    let (t, v) = (cfg.frames, cfg.joints);
    for l in 0..channels.len() - 1 {
        let (c_in, c_out) = (channels[l], channels[l + 1]);
        match cfg.kind {
            EncoderKind::Separable => {
                params.push(
                    format!("{prefix}.{l}.a_s"),
                    noisy_identity(rng, t, v, ADJACENCY_INIT_NOISE),
                    true,
                );
                params.push(
                    format!("{prefix}.{l}.a_t"),
                    noisy_identity(rng, v, t, ADJACENCY_INIT_NOISE),
                    true,
                );
            }
            EncoderKind::Plain => {
                let a = noisy_identity(rng, 1, t * v, ADJACENCY_INIT_NOISE)
                    .reshape(&[t * v, t * v])
                    .expect("square");
                params.push(format!("{prefix}.{l}.a_st"), a, true);
            }
        }
        params.push(format!("{prefix}.{l}.w"), fan_in_uniform(rng, c_in, c_out), true);
        if c_in != c_out {
            params.push(
                format!("{prefix}.{l}.res"),
                fan_in_uniform(rng, c_in, c_out),
                true,
            );
        }
    }
}

/// Runs a registered layer stack over `x: [N,T,V,C]`. Each layer adds its
/// input (or a 1×1 projection of it) to its output. `last_act` applies to
/// the final layer, ReLU to the others.
pub(crate) fn run_stack(
    tape: &mut Tape,
    var: &dyn Fn(&str) -> Var,
    prefix: &str,
    cfg: &EncoderConfig,
    channels: &[usize],
    x: Var,
    last_act: Activation,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (n, t, v) = match shape[..] {
        [n, t, v, c] if t == cfg.frames && v == cfg.joints && c == channels[0] => (n, t, v),
        _ => {
            return Err(Error::dim(
                "graph stack input",
                &shape,
                &[0, cfg.frames, cfg.joints, channels[0]],
            ))
        }
    };
    let layers = channels.len() - 1;
    let mut h = x;
    for l in 0..layers {
        let act = if l + 1 == layers {
            last_act
        } else {
            Activation::Relu
        };
        let w = var(&format!("{prefix}.{l}.w"));
        let out = match cfg.kind {
            EncoderKind::Separable => {
                let a_s = var(&format!("{prefix}.{l}.a_s"));
                let a_t = var(&format!("{prefix}.{l}.a_t"));
                separable_layer(tape, h, a_s, a_t, w, act)?
            }
            EncoderKind::Plain => {
                let a_st = var(&format!("{prefix}.{l}.a_st"));
                let flat = tape.reshape(h, &[n, t * v, channels[l]])?;
                let o = plain_layer(tape, flat, a_st, w, act)?;
                tape.reshape(o, &[n, t, v, channels[l + 1]])?
            }
        };
        let skip = if channels[l] == channels[l + 1] {
            h
        } else {
            channel_mix(tape, h, var(&format!("{prefix}.{l}.res")))?
        };
        h = tape.add(out, skip)?;
    }
    Ok(h)
}

/// Pools `[N,T,V,C]` features to `[N,E]`.
pub(crate) fn pool(tape: &mut Tape, features: Var, pooling: Pooling) -> Result<Var> {
    let s = tape.value(features).shape().to_vec();
    let (n, t, v, c) = (s[0], s[1], s[2], s[3]);
    match pooling {
        Pooling::Mean => {
            let r = tape.reshape(features, &[n, t * v, c])?;
            tape.mean_nodes(r)
        }
        Pooling::Flatten => tape.reshape(features, &[n, t * v * c]),
    }
}
