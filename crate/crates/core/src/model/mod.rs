//! Encoder, projector and optional decoder with their parameters.

mod encoder;
mod params;
mod projector;

pub use encoder::{
    channel_mix, plain_adjacency_params, plain_layer, separable_adjacency_params,
    separable_layer, EncoderConfig, EncoderKind, Pooling, ADJACENCY_INIT_NOISE, DEFAULT_CHANNELS,
};
pub use params::{fan_in_uniform, noisy_identity, Param, ParamSet};
pub use projector::{ProjectorConfig, ProjectorKind, DEFAULT_LATENT_DIM};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Activation, BatchNormState, BnMode, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    /// Adds the decoder and reconstruction output.
    pub ae: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projector.validate(self.encoder.embedding_width())
    }

    fn decoder_channels(&self) -> Vec<usize> {
        self.encoder.channels.iter().rev().copied().collect()
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// One per parameter, in [`ParamSet`] order.
    pub params: Vec<Var>,
    /// `[N, E]`.
    pub embedding: Var,
    /// Raw projector output `[N, n]`, before the manifold map.
    pub latent: Var,
    /// `[N, T, V, 2]` in AE mode.
    pub reconstruction: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// One per projector batch-norm layer.
    pub bn: Vec<BatchNormState>,
}

impl Model {
    /// Builds a model with seeded initial parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let enc = &config.encoder;
        encoder::register_stack(&mut params, &mut rng, "enc", enc, &enc.channels);
        projector::register(&mut params, &mut rng, &config.projector, enc.embedding_width());
        if config.ae {
            params.push(
                "dec.unpool",
                fan_in_uniform(&mut rng, enc.embedding_width(), enc.output_channels()),
                true,
            );
            encoder::register_stack(&mut params, &mut rng, "dec", enc, &config.decoder_channels());
        }
        let bn = (0..config.projector.norm_layers())
            .map(|_| BatchNormState::new(config.projector.latent_dim))
            .collect();
        Ok(Self { config, params, bn })
    }

    /// Adjacency parameters of the encoder.
    pub fn adjacency_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| {
                p.name.starts_with("enc.")
                    && (p.name.ends_with(".a_s")
                        || p.name.ends_with(".a_t")
                        || p.name.ends_with(".a_st"))
            })
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter on `tape`, as gradient leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone().with_grad())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    fn lookup<'a>(&'a self, vars: &'a [Var]) -> impl Fn(&str) -> Var + 'a {
        move |name: &str| {
            let i = self
                .params
                .position(name)
                .unwrap_or_else(|| panic!("parameter {name} not registered"));
            vars[i]
        }
    }

    /// Encoder features `[N,T,V,C_out]` and pooled embedding `[N,E]`.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let var = self.lookup(vars);
        let enc = &self.config.encoder;
        let x = batched(tape, x)?;
        let features = encoder::run_stack(
            tape,
            &var,
            "enc",
            enc,
            &enc.channels,
            x,
            Activation::Relu,
        )?;
        let embedding = encoder::pool(tape, features, enc.pooling)?;
        Ok((features, embedding))
    }

    /// Raw latent vectors `[N,n]` from embeddings `[N,E]`.
    pub fn project(&mut self, tape: &mut Tape, vars: &[Var], e: Var, mode: BnMode) -> Result<Var> {
        let Model {
            config, params, bn, ..
        } = self;
        let var = |name: &str| vars[params.position(name).expect("registered")];
        projector::run(tape, &var, &config.projector, bn, mode, e)
    }

    /// Reconstructs `[N,T,V,2]` from embeddings `[N,E]`.
    pub fn decode(&self, tape: &mut Tape, vars: &[Var], e: Var) -> Result<Var> {
        if !self.config.ae {
            return Err(Error::Unsupported("decode without AE mode"));
        }
        let var = self.lookup(vars);
        let enc = &self.config.encoder;
        let (t, v, c) = (enc.frames, enc.joints, enc.output_channels());
        let n = tape.value(e).shape()[0];
        let h = tape.matmul(e, var("dec.unpool"))?;
        let h = tape.broadcast_nodes(h, t * v)?;
        let h = tape.reshape(h, &[n, t, v, c])?;
        encoder::run_stack(
            tape,
            &var,
            "dec",
            enc,
            &self.config.decoder_channels(),
            h,
            Activation::Identity,
        )
    }

    /// Full pass over `x: [N,T,V,2]` (or a single `[T,V,2]` window).
    pub fn forward(&mut self, tape: &mut Tape, x: Var, trainable: bool, mode: BnMode) -> Result<Forward> {
        let params = self.bind(tape, trainable);
        let (_, embedding) = self.encode(tape, &params, x)?;
        let latent = self.project(tape, &params, embedding, mode)?;
        let reconstruction = if self.config.ae {
            Some(self.decode(tape, &params, embedding)?)
        } else {
            None
        };
        Ok(Forward {
            params,
            embedding,
            latent,
            reconstruction,
        })
    }

    /// `Σ w²` over the decayed parameters bound in `vars`.
    pub fn weight_penalty(&self, tape: &mut Tape, vars: &[Var]) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for (p, &v) in self.params.iter().zip(vars) {
            if !p.decay {
                continue;
            }
            let s = tape.sum_squares(v);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        Ok(total)
    }
}

/// Per-sample mean squared error between `[N,...]` tensors: `[N]`.
pub fn reconstruction_error(tape: &mut Tape, recon: Var, target: Var) -> Result<Var> {
    let d = tape.sub(recon, target)?;
    let sq = tape.square(d);
    tape.mean_per_sample(sq)
}

fn batched(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    match s[..] {
        [_, _, _, _] => Ok(x),
        [t, v, c] => tape.reshape(x, &[1, t, v, c]),
        _ => Err(Error::dim("model input", &s, &[0, 0, 0, 2])),
    }
}

/// Stacks `[T,V,C]` windows into `[N,T,V,C]`.
pub fn stack_windows<'a>(windows: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for w in windows {
        match &shape {
            None => shape = Some(w.shape().to_vec()),
            Some(s) if s != w.shape() => return Err(Error::dim("stack_windows", s, w.shape())),
            _ => {}
        }
        data.extend_from_slice(w.data());
        n += 1;
    }
    let Some(s) = shape else {
        return Err(Error::EmptySet("stack of no windows"));
    };
    let mut full = vec![n];
    full.extend(s);
    Tensor::new(&full, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::Manifold;
    use crate::testutil::{random_tensor, FD_STEP};

    fn tiny(kind: EncoderKind, projector: ProjectorKind, ae: bool) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                frames: 3,
                joints: 4,
                channels: vec![2, 3, 3, 2, 2],
                kind,
                pooling: Pooling::Mean,
            },
            projector: ProjectorConfig {
                kind: projector,
                blocks: 1,
                latent_dim: if projector == ProjectorKind::Identity { 2 } else { 4 },
                final_bias: false,
            },
            ae,
        }
    }

    /// Relative error between analytic and central-difference gradients of
    /// `loss` with respect to every parameter.
    fn model_grad_check(
        model: &Model,
        x: &Tensor,
        mode: BnMode,
        loss: &dyn Fn(&mut Tape, &Forward, Var) -> Var,
    ) -> f64 {
        let eval = |m: &Model, grad: bool| {
            let mut m = m.clone();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let fwd = m.forward(&mut tape, xv, grad, mode).unwrap();
            let l = loss(&mut tape, &fwd, xv);
            let value = tape.value(l).item();
            let grads = grad.then(|| {
                let g = tape.backward(l).unwrap();
                fwd.params
                    .iter()
                    .zip(m.params.iter())
                    .map(|(v, p)| {
                        g.get(*v)
                            .map(|s| s.to_vec())
                            .unwrap_or_else(|| vec![0.0; p.value.numel()])
                    })
                    .collect::<Vec<_>>()
            });
            (value, grads)
        };
        let analytic = eval(model, true).1.unwrap();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (k, p) in model.params.iter().enumerate() {
            for i in 0..p.value.numel() {
                let mut plus = model.clone();
                plus.params.iter_mut().nth(k).unwrap().value.data_mut()[i] += FD_STEP;
                let mut minus = model.clone();
                minus.params.iter_mut().nth(k).unwrap().value.data_mut()[i] -= FD_STEP;
                let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
                let a = analytic[k][i];
                diff += (a - numeric).powi(2);
                na += a * a;
                nn += numeric * numeric;
            }
        }
        diff.sqrt() / na.sqrt().max(nn.sqrt())
    }

    fn perturb_adjacencies(model: &mut Model, seed: u64) {
        // push adjacencies away from identity so every entry matters
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params.iter_mut() {
            let noise = random_tensor(&mut rng, p.value.shape());
            for (w, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
                *w += 0.3 * n;
            }
        }
    }

    #[test]
    fn encoder_to_distance_gradients() {
        for (kind, manifold) in [
            (EncoderKind::Separable, Manifold::Euclidean),
            (EncoderKind::Separable, Manifold::Hyperbolic),
            (EncoderKind::Plain, Manifold::Spherical),
        ] {
            let mut model = Model::new(tiny(kind, ProjectorKind::Nonlinear, false), 1).unwrap();
            perturb_adjacencies(&mut model, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = random_tensor(&mut rng, &[3, 3, 4, 2]);
            let c = random_tensor(&mut rng, &[4]);
            let c = Tensor::from_vec(manifold.embed(c.data()).unwrap().coords().to_vec());
            let err = model_grad_check(&model, &x, BnMode::Train, &|tape, fwd, _| {
                let z = manifold.embed_rows(tape, fwd.latent).unwrap();
                let cv = tape.constant(c.clone());
                let d = manifold.distance_rows(tape, z, cv).unwrap();
                tape.mean(d)
            });
            assert!(err < 1e-5, "{kind:?}/{manifold:?}: {err}");
        }
    }

    #[test]
    fn decoder_gradients() {
        let mut model = Model::new(tiny(EncoderKind::Separable, ProjectorKind::Linear, true), 7)
            .unwrap();
        perturb_adjacencies(&mut model, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, &[2, 3, 4, 2]);
        let err = model_grad_check(&model, &x, BnMode::Train, &|tape, fwd, xv| {
            let r = reconstruction_error(tape, fwd.reconstruction.unwrap(), xv).unwrap();
            let p = model_penalty(tape, fwd);
            let m = tape.mean(r);
            tape.add(m, p).unwrap()
        });
        assert!(err < 1e-5, "{err}");
    }

    fn model_penalty(tape: &mut Tape, fwd: &Forward) -> Var {
        let s = tape.sum_squares(fwd.params[0]);
        tape.scale(s, 0.01)
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut model = Model::new(tiny(EncoderKind::Separable, ProjectorKind::Nonlinear, false), 1)
            .unwrap();
        for p in model.params.iter_mut() {
            if p.name.ends_with(".w") || p.name.ends_with(".res") {
                p.value.data_mut().fill(0.0);
            }
            if p.name.ends_with(".a_s") || p.name.ends_with(".a_t") {
                let shape = p.value.shape().to_vec();
                p.value = Tensor::eye_stack(shape[0], shape[1]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&mut rng, &[2, 3, 4, 2]));
        let fwd = model.forward(&mut tape, x, false, BnMode::Infer).unwrap();
        assert!(tape.value(fwd.embedding).data().iter().all(|&v| v == 0.0));
        // no final bias: zero weights project to zero
        assert!(tape.value(fwd.latent).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_windows_give_identical_embeddings() {
        let mut model = Model::new(ModelConfig::default(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_tensor(&mut rng, &[12, 17, 2]);
        let x = stack_windows([&w, &w]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = model.forward(&mut tape, xv, false, BnMode::Infer).unwrap();
        let e = tape.value(fwd.latent);
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn single_joint_perturbation_changes_embedding() {
        let mut model = Model::new(ModelConfig::default(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&mut rng, &[12, 17, 2]);
        let embed = |model: &mut Model, x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let fwd = model.forward(&mut tape, xv, false, BnMode::Infer).unwrap();
            tape.value(fwd.embedding).data().to_vec()
        };
        let base = embed(&mut model, &x);
        let mut moved = x.clone();
        moved.data_mut()[5 * 34 + 2 * 3] += FD_STEP;
        let jvp: f64 = embed(&mut model, &moved)
            .iter()
            .zip(&base)
            .map(|(a, b)| ((a - b) / FD_STEP).powi(2))
            .sum();
        assert!(jvp > 1e-8, "{jvp}");
    }

    #[test]
    fn identity_and_linear_projectors() {
        let mut model = Model::new(tiny(EncoderKind::Separable, ProjectorKind::Identity, false), 1)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_tensor(&mut rng, &[5, 2]);
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let out = model.project(&mut tape, &[], ev, BnMode::Train).unwrap();
        assert_eq!(tape.value(out), &e);

        let mut cfg = tiny(EncoderKind::Separable, ProjectorKind::Linear, false);
        cfg.projector.latent_dim = 2;
        let mut model = Model::new(cfg, 1).unwrap();
        model.params.get_mut("proj.0.w").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        model.params.get_mut("proj.final.w").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let ev = tape.constant(e.clone());
        let out = model.project(&mut tape, &vars, ev, BnMode::Train).unwrap();
        assert_eq!(tape.value(out), &e);
    }

    #[test]
    fn identity_projector_width_mismatch_is_config_error() {
        let mut cfg = tiny(EncoderKind::Separable, ProjectorKind::Identity, false);
        cfg.projector.latent_dim = 8;
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn nonlinear_projector_gradients() {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                frames: 2,
                joints: 3,
                channels: vec![2, 6],
                ..EncoderConfig::default()
            },
            projector: ProjectorConfig {
                latent_dim: 4,
                final_bias: true,
                ..ProjectorConfig::default()
            },
            ae: false,
        };
        let mut model = Model::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random_tensor(&mut rng, &[8, 6]);
        let target = random_tensor(&mut rng, &[8, 4]);
        // gradient with respect to the embedding and projector parameters
        let run = |model: &mut Model, e: &Tensor, grad: bool| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, grad);
            let mut et = e.clone();
            et.requires_grad = grad;
            let ev = tape.leaf(et);
            let out = model.project(&mut tape, &vars, ev, BnMode::Train).unwrap();
            let t = tape.constant(target.clone());
            let d = tape.sub(out, t).unwrap();
            let d = tape.activation(d, Activation::Tanh);
            let l = tape.sum_squares(d);
            let value = tape.value(l).item();
            let g = grad.then(|| tape.backward(l).unwrap().get(ev).unwrap().to_vec());
            (value, g)
        };
        let analytic = run(&mut model, &e, true).1.unwrap();
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..e.numel() {
            let mut p = e.clone();
            p.data_mut()[i] += FD_STEP;
            let mut m = e.clone();
            m.data_mut()[i] -= FD_STEP;
            let numeric = (run(&mut model, &p, false).0 - run(&mut model, &m, false).0) / (2.0 * FD_STEP);
            diff += (numeric - analytic[i]).powi(2);
            norm += numeric * numeric;
        }
        assert!(diff.sqrt() / norm.sqrt() < 1e-5);
        let err = model_grad_check(&model, &random_tensor(&mut rng, &[8, 2, 3, 2]), BnMode::Train, &|tape, fwd, _| {
            let s = tape.square(fwd.latent);
            tape.sum(s)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn infer_projection_is_batch_independent() {
        let mut model = Model::new(ModelConfig::default(), 5).unwrap();
        model.bn[0].running_mean.iter_mut().for_each(|m| *m = 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_tensor(&mut rng, &[12, 17, 2]);
        let b = random_tensor(&mut rng, &[12, 17, 2]);
        let latent = |model: &mut Model, x: Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fwd = model.forward(&mut tape, xv, false, BnMode::Infer).unwrap();
            tape.value(fwd.latent).clone()
        };
        let alone = latent(&mut model, stack_windows([&a]).unwrap());
        let together = latent(&mut model, stack_windows([&a, &b]).unwrap());
        assert_eq!(alone.row(0), together.row(0));
    }

    #[test]
    fn decoder_shape_and_mode() {
        let mut model = Model::new(tiny(EncoderKind::Plain, ProjectorKind::Nonlinear, true), 1)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&mut rng, &[1, 3, 4, 2]));
        let fwd = model.forward(&mut tape, x, false, BnMode::Infer).unwrap();
        assert_eq!(tape.value(fwd.reconstruction.unwrap()).shape(), &[1, 3, 4, 2]);
        // L_rec(x, x) = 0
        let r = reconstruction_error(&mut tape, x, x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0]);

        let model = Model::new(tiny(EncoderKind::Plain, ProjectorKind::Nonlinear, false), 1)
            .unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            model.decode(&mut tape, &[], e),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn default_adjacency_counts() {
        let model = Model::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(model.adjacency_param_count(), 4 * 5916);
        let mut cfg = ModelConfig::default();
        cfg.encoder.kind = EncoderKind::Plain;
        let plain = Model::new(cfg, 0).unwrap();
        assert_eq!(plain.adjacency_param_count(), 4 * 41616);
    }
}
