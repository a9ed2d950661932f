//! Maps encoder embeddings to raw latent vectors.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use super::params::{fan_in_uniform, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Activation, BatchNormState, BnMode, Tape, Tensor, Var};

pub const DEFAULT_LATENT_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectorKind {
    Identity,
    /// Two stacked affine maps.
    Linear,
    /// Blocks of affine → ReLU → batch norm, then a final affine map.
    Nonlinear,
}

impl ProjectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectorKind::Identity => "identity",
            ProjectorKind::Linear => "linear",
            ProjectorKind::Nonlinear => "nonlinear",
        }
    }
}

impl fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ProjectorKind::Identity),
            "linear" => Ok(ProjectorKind::Linear),
            "nonlinear" => Ok(ProjectorKind::Nonlinear),
            other => Err(Error::Config(format!(
                "unknown projector `{other}` (expected identity | linear | nonlinear)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorConfig {
    pub kind: ProjectorKind,
    pub blocks: usize,
    pub latent_dim: usize,
    pub final_bias: bool,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            kind: ProjectorKind::Nonlinear,
            blocks: 1,
            latent_dim: DEFAULT_LATENT_DIM,
            final_bias: false,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self, embedding_width: usize) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.kind == ProjectorKind::Identity && self.latent_dim != embedding_width {
            return Err(Error::Config(format!(
                "identity projector needs latent_dim == encoder embedding width \
                 ({embedding_width}), got latent_dim {}",
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Number of batch-norm layers.
    pub fn norm_layers(&self) -> usize {
        match self.kind {
            ProjectorKind::Nonlinear => self.blocks,
            _ => 0,
        }
    }
}

pub(crate) fn register(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    cfg: &ProjectorConfig,
    embedding_width: usize,
) {
    let n = cfg.latent_dim;
    let hidden = match cfg.kind {
        ProjectorKind::Identity => return,
        ProjectorKind::Linear => 1,
        ProjectorKind::Nonlinear => cfg.blocks,
    };
    let mut width = embedding_width;
    for b in 0..hidden {
        params.push(format!("proj.{b}.w"), fan_in_uniform(rng, width, n), true);
        params.push(format!("proj.{b}.b"), Tensor::zeros(&[n]), false);
        if cfg.kind == ProjectorKind::Nonlinear {
            params.push(format!("proj.{b}.gamma"), Tensor::from_vec(vec![1.0; n]), false);
            params.push(format!("proj.{b}.beta"), Tensor::zeros(&[n]), false);
        }
        width = n;
    }
    params.push("proj.final.w", fan_in_uniform(rng, width, n), true);
    if cfg.final_bias {
        params.push("proj.final.b", Tensor::zeros(&[n]), false);
    }
}

/// Projects `[N,E]` to `[N,n]`.
pub(crate) fn run(
    tape: &mut Tape,
    var: &dyn Fn(&str) -> Var,
    cfg: &ProjectorConfig,
    bn: &mut [BatchNormState],
    mode: BnMode,
    e: Var,
) -> Result<Var> {
    let hidden = match cfg.kind {
        ProjectorKind::Identity => return Ok(e),
        ProjectorKind::Linear => 1,
        ProjectorKind::Nonlinear => cfg.blocks,
    };
    let mut h = e;
    for b in 0..hidden {
        h = tape.matmul(h, var(&format!("proj.{b}.w")))?;
        h = tape.add_bias(h, var(&format!("proj.{b}.b")))?;
        if cfg.kind == ProjectorKind::Nonlinear {
            h = tape.activation(h, Activation::Relu);
            let (gamma, beta) = (var(&format!("proj.{b}.gamma")), var(&format!("proj.{b}.beta")));
            h = tape.batchnorm(h, gamma, beta, &mut bn[b], mode)?;
        }
    }
    h = tape.matmul(h, var("proj.final.w"))?;
    if cfg.final_bias {
        h = tape.add_bias(h, var("proj.final.b"))?;
    }
    Ok(h)
}
