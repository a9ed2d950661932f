//! One-class training: contraction of normal embeddings toward a center.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_list, KeyValues};
use crate::data::{
    normalize_training_set, window_slice, AgentTrajectory, PoseWindow, RobustStats,
    DEFAULT_JOINTS, DEFAULT_STRIDE, DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::manifold::{centroid, CenterState, CenterStrategy, LatentPoint, Manifold};
use crate::model::{
    reconstruction_error, stack_windows, EncoderConfig, EncoderKind, Model, ModelConfig,
    Pooling, ProjectorConfig, ProjectorKind, DEFAULT_CHANNELS, DEFAULT_LATENT_DIM,
};
use crate::tensor::{Adam, BnMode, Tape, Tensor, Var};

/// Windows per chunk in inference passes.
pub const INFER_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub window: usize,
    pub stride: usize,
    pub joints: usize,
    pub channels: Vec<usize>,
    pub encoder: EncoderKind,
    pub pooling: Pooling,
    pub projector: ProjectorKind,
    pub projector_blocks: usize,
    pub latent_dim: usize,
    pub final_bias: bool,
    pub ae: bool,
    pub manifold: Manifold,
    pub center: CenterStrategy,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight-decay coefficient.
    pub alpha: f64,
    /// Reconstruction-loss weight.
    pub gamma: f64,
    /// Direction-loss weight (spherical).
    pub phi: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            joints: DEFAULT_JOINTS,
            channels: DEFAULT_CHANNELS.to_vec(),
            encoder: EncoderKind::Separable,
            pooling: Pooling::Mean,
            projector: ProjectorKind::Nonlinear,
            projector_blocks: 1,
            latent_dim: DEFAULT_LATENT_DIM,
            final_bias: false,
            ae: false,
            manifold: Manifold::Hyperbolic,
            center: CenterStrategy::Dynamic,
            epochs: 80,
            learning_rate: 1e-4,
            batch_size: 256,
            alpha: 1e-5,
            gamma: 1.0,
            phi: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                frames: self.window,
                joints: self.joints,
                channels: self.channels.clone(),
                kind: self.encoder,
                pooling: self.pooling,
            },
            projector: ProjectorConfig {
                kind: self.projector,
                blocks: self.projector_blocks,
                latent_dim: self.latent_dim,
                final_bias: self.final_bias,
            },
            ae: self.ae,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("phi", self.phi)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.window == 0 || self.stride == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "window, stride and batch_size must be >= 1".into(),
            ));
        }
        self.model_config().validate()
    }

    /// Applies the keys present in `kv`, leaving other fields unchanged.
    pub fn apply_kv(&mut self, kv: &mut KeyValues) -> Result<()> {
        macro_rules! take {
            ($field:ident, $key:literal) => {
                if let Some(v) = kv.take($key)? {
                    self.$field = v;
                }
            };
        }
        take!(window, "window");
        take!(stride, "stride");
        take!(joints, "joints");
        if let Some(s) = kv.take::<String>("channels")? {
            self.channels = parse_list(&s)?;
        }
        take!(encoder, "encoder");
        take!(pooling, "pooling");
        take!(projector, "projector");
        take!(projector_blocks, "projector_blocks");
        take!(latent_dim, "latent_dim");
        take!(final_bias, "final_bias");
        take!(ae, "ae");
        take!(manifold, "manifold");
        take!(center, "center");
        take!(epochs, "epochs");
        take!(learning_rate, "learning_rate");
        take!(batch_size, "batch_size");
        take!(alpha, "alpha");
        take!(gamma, "gamma");
        take!(phi, "phi");
        take!(seed, "seed");
        Ok(())
    }

    /// Reads a complete config file over the defaults. Unknown keys fail.
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        [
            ("window", self.window.to_string()),
            ("stride", self.stride.to_string()),
            ("joints", self.joints.to_string()),
            ("channels", channels.join(",")),
            ("encoder", self.encoder.to_string()),
            ("pooling", self.pooling.as_str().to_string()),
            ("projector", self.projector.to_string()),
            ("projector_blocks", self.projector_blocks.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("final_bias", self.final_bias.to_string()),
            ("ae", self.ae.to_string()),
            ("manifold", self.manifold.to_string()),
            ("center", self.center.as_str().to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", format!("{:e}", self.learning_rate)),
            ("batch_size", self.batch_size.to_string()),
            ("alpha", format!("{:e}", self.alpha)),
            ("gamma", format!("{:e}", self.gamma)),
            ("phi", format!("{:e}", self.phi)),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Slices every trajectory and normalizes with statistics fitted on the
/// result.
pub fn prepare_training_windows(
    trajectories: &[AgentTrajectory],
    window: usize,
    stride: usize,
) -> Result<(Vec<PoseWindow>, RobustStats)> {
    let raw: Vec<PoseWindow> = trajectories
        .iter()
        .flat_map(|t| window_slice(t, window, stride))
        .collect();
    if raw.is_empty() {
        return Err(Error::EmptySet("training windows (trajectories shorter than the window?)"));
    }
    normalize_training_set(&raw)
}

/// Per-window inference results.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub latent: LatentPoint,
    /// Reconstruction MSE in AE mode.
    pub reconstruction: Option<f64>,
}

/// Inference-mode pass over `windows` in fixed-size chunks.
pub fn infer(model: &mut Model, manifold: Manifold, windows: &[&Tensor]) -> Result<Vec<Inference>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(INFER_CHUNK) {
        out.extend(infer_chunk(model, manifold, chunk)?);
    }
    Ok(out)
}

pub(crate) fn infer_chunk(
    model: &mut Model,
    manifold: Manifold,
    windows: &[&Tensor],
) -> Result<Vec<Inference>> {
    let x = stack_windows(windows.iter().copied())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let fwd = model.forward(&mut tape, xv, false, BnMode::Infer)?;
    let rec = match fwd.reconstruction {
        Some(r) => Some(reconstruction_error(&mut tape, r, xv)?),
        None => None,
    };
    let latent = tape.value(fwd.latent);
    let n = latent.shape()[0];
    (0..n)
        .map(|i| {
            Ok(Inference {
                latent: manifold.embed(latent.row(i))?,
                reconstruction: rec.map(|r| tape.value(r).data()[i]),
            })
        })
        .collect()
}

/// Mean over latent dimensions of the per-dimension variance.
pub fn embedding_variance(points: &[LatentPoint]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let (n, dim) = (points.len() as f64, first.dim());
    let mut total = 0.0;
    for j in 0..dim {
        let mean = points.iter().map(|p| p.coords()[j]).sum::<f64>() / n;
        total += points
            .iter()
            .map(|p| (p.coords()[j] - mean).powi(2))
            .sum::<f64>()
            / n;
    }
    total / dim as f64
}

/// Loss and parameter gradients for one batch.
#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub loss: f64,
    /// One per parameter, zero where the loss does not depend on it.
    pub grads: Vec<Vec<f64>>,
}

/// Contraction loss of `batch: [N,T,V,2]` toward `center`, plus the weighted
/// reconstruction and weight-decay terms.
pub fn objective(
    model: &mut Model,
    config: &TrainConfig,
    center: Option<&CenterState>,
    batch: &Tensor,
    mode: BnMode,
) -> Result<ObjectiveValue> {
    let center = center.ok_or_else(|| Error::State("center is not initialized".into()))?;
    if center.point.manifold() != config.manifold {
        return Err(Error::State(format!(
            "center lives on {} but the objective uses {}",
            center.point.manifold(),
            config.manifold
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let fwd = model.forward(&mut tape, x, true, mode)?;
    let z = config.manifold.embed_rows(&mut tape, fwd.latent)?;
    let c = tape.constant(Tensor::from_vec(center.point.coords().to_vec()));
    let d = config.manifold.distance_rows(&mut tape, z, c)?;
    let mut loss = tape.mean(d);
    if config.manifold == Manifold::Spherical {
        loss = tape.scale(loss, config.phi);
    }
    if let Some(r) = fwd.reconstruction {
        let rec = reconstruction_error(&mut tape, r, x)?;
        let rec = tape.mean(rec);
        let rec = tape.scale(rec, config.gamma);
        loss = tape.add(loss, rec)?;
    }
    if config.alpha > 0.0 {
        if let Some(p) = model.weight_penalty(&mut tape, &fwd.params)? {
            let p = tape.scale(p, config.alpha);
            loss = tape.add(loss, p)?;
        }
    }
    let value = tape.value(loss).item();
    let g = tape.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .zip(model.params.iter())
        .map(|(v, p): (&Var, _)| {
            g.get(*v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()])
        })
        .collect();
    Ok(ObjectiveValue { loss: value, grads })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Of the training latents at epoch start.
    pub embedding_variance: f64,
    /// Center used throughout the epoch.
    pub center: Vec<f64>,
}

impl EpochRecord {
    pub fn center_norm(&self) -> f64 {
        self.center.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Training state: parameters, optimizer moments, center and history.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub center: Option<CenterState>,
    pub history: Vec<EpochRecord>,
    shuffle_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(), config.seed)?;
        let optimizer = Adam::new(
            config.learning_rate,
            &model.params.iter().map(|p| &p.value).collect::<Vec<_>>(),
        );
        let shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        Ok(Self {
            config,
            model,
            optimizer,
            center: None,
            history: Vec::new(),
            shuffle_rng,
        })
    }

    /// Latent points of `windows` under the current parameters.
    pub fn embed_all(&mut self, windows: &[&Tensor]) -> Result<Vec<LatentPoint>> {
        Ok(infer(&mut self.model, self.config.manifold, windows)?
            .into_iter()
            .map(|i| i.latent)
            .collect())
    }

    /// One train-mode pass over `windows` that sets the batch-norm running
    /// statistics to the average of the per-batch moments.
    pub fn warm_up_batchnorm(&mut self, windows: &[&Tensor]) -> Result<()> {
        if self.model.bn.is_empty() {
            return Ok(());
        }
        let saved: Vec<f64> = self.model.bn.iter().map(|b| b.momentum).collect();
        let mut seen = 0usize;
        let mut result = Ok(());
        for chunk in windows.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            seen += 1;
            for bn in &mut self.model.bn {
                bn.momentum = 1.0 / seen as f64;
            }
            let x = stack_windows(chunk.iter().copied())?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            if let Err(e) = self.model.forward(&mut tape, xv, false, BnMode::Train) {
                result = Err(e);
                break;
            }
        }
        for (bn, m) in self.model.bn.iter_mut().zip(saved) {
            bn.momentum = m;
        }
        result
    }

    /// Warms up the batch-norm statistics, then sets the center to the
    /// centroid of the training latents.
    pub fn init_center(&mut self, windows: &[&Tensor]) -> Result<CenterState> {
        if windows.is_empty() {
            return Err(Error::EmptySet("center of an empty training set"));
        }
        self.warm_up_batchnorm(windows)?;
        let points = self.embed_all(windows)?;
        let c = CenterState {
            point: centroid(&points, self.config.manifold)?,
            strategy: self.config.center,
        };
        self.center = Some(c.clone());
        Ok(c)
    }

    /// Epoch-start refresh: dynamic centers move to the current centroid,
    /// static centers stay put. Returns the latents it computed.
    pub fn update_center(&mut self, windows: &[&Tensor]) -> Result<Vec<LatentPoint>> {
        let points = self.embed_all(windows)?;
        match &mut self.center {
            None => {
                self.center = Some(CenterState {
                    point: centroid(&points, self.config.manifold)?,
                    strategy: self.config.center,
                })
            }
            Some(c) if c.strategy == CenterStrategy::Dynamic => {
                c.point = centroid(&points, self.config.manifold)?;
            }
            Some(_) => {}
        }
        Ok(points)
    }

    /// One epoch: center update, seeded shuffle, then one Adam step per
    /// minibatch.
    pub fn run_epoch(&mut self, windows: &[&Tensor]) -> Result<EpochRecord> {
        if windows.is_empty() {
            return Err(Error::EmptySet("training windows"));
        }
        let epoch = self.history.len() + 1;
        let points = self.update_center(windows)?;
        let variance = embedding_variance(&points);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let mut weighted = 0.0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let batch = stack_windows(idx.iter().map(|&i| windows[i]))?;
            // a lone sample has no batch statistics
            let mode = if idx.len() >= 2 {
                BnMode::Train
            } else {
                BnMode::Infer
            };
            let value = objective(
                &mut self.model,
                &self.config,
                self.center.as_ref(),
                &batch,
                mode,
            )?;
            if !value.loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b + 1,
                    value: value.loss,
                });
            }
            weighted += value.loss * idx.len() as f64;
            let grads: Vec<&[f64]> = value.grads.iter().map(|g| g.as_slice()).collect();
            let mut params: Vec<&mut Tensor> =
                self.model.params.iter_mut().map(|p| &mut p.value).collect();
            self.optimizer.step(&mut params, &grads)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: weighted / windows.len() as f64,
            embedding_variance: variance,
            center: self
                .center
                .as_ref()
                .expect("set by update_center")
                .point
                .coords()
                .to_vec(),
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Runs the configured number of epochs.
    pub fn train(&mut self, windows: &[&Tensor]) -> Result<&[EpochRecord]> {
        if self.center.is_none() {
            self.init_center(windows)?;
        }
        for _ in 0..self.config.epochs {
            self.run_epoch(windows)?;
        }
        Ok(&self.history)
    }
}

/// Loss history as CSV.
pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,embedding_variance,center_norm\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.epoch,
            r.mean_loss,
            r.embedding_variance,
            r.center_norm()
        );
    }
    out
}

/// Center coordinates per epoch as CSV.
pub fn center_csv(history: &[EpochRecord]) -> String {
    let dim = history.first().map_or(0, |r| r.center.len());
    let mut out = String::from("epoch");
    for j in 0..dim {
        let _ = write!(out, ",c{j}");
    }
    out.push('\n');
    for r in history {
        let _ = write!(out, "{}", r.epoch);
        for c in &r.center {
            let _ = write!(out, ",{c:e}");
        }
        out.push('\n');
    }
    out
}
