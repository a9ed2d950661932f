//! Versioned text checkpoints.
//!
//! A checkpoint is a `key = value` file. Floats are written in shortest
//! round-trip scientific notation, so a save/load cycle is bit-exact.
//!
//! ```text
//! format = skelocc-checkpoint
//! version = 1
//! config.<key> = ...            training configuration
//! stats.<key> = ...             robust normalization statistics
//! center.strategy = dynamic
//! center.coords = c0,c1,...
//! median.<score kind> = ...     training-set median window score
//! bn.<i>.running_mean = ...
//! bn.<i>.running_var = ...
//! param.<name>.shape = d0,d1,...
//! param.<name> = v0,v1,...      row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{parse_list, render, KeyValues};
use crate::data::RobustStats;
use crate::error::{Error, Result};
use crate::manifold::{CenterState, CenterStrategy, LatentPoint};
use crate::model::Model;
use crate::scoring::ScoreKind;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const FORMAT: &str = "skelocc-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub center: CenterState,
    pub stats: RobustStats,
    /// Median training-window score per score kind.
    pub train_medians: BTreeMap<String, f64>,
}

fn floats(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
    parts.join(",")
}

fn take_floats(kv: &mut KeyValues, key: &str) -> Result<Vec<f64>> {
    let s: String = kv.take_required(key)?;
    if s.is_empty() {
        return Ok(Vec::new());
    }
    parse_list(&s).map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("format".into(), FORMAT.into()),
            ("version".into(), VERSION.to_string()),
        ];
        pairs.extend(
            self.config
                .to_pairs()
                .into_iter()
                .map(|(k, v)| (format!("config.{k}"), v)),
        );
        pairs.extend(
            self.stats
                .to_pairs()
                .into_iter()
                .map(|(k, v)| (format!("stats.{k}"), v)),
        );
        pairs.push(("center.strategy".into(), self.center.strategy.as_str().into()));
        pairs.push(("center.coords".into(), floats(self.center.point.coords())));
        for (kind, m) in &self.train_medians {
            pairs.push((format!("median.{kind}"), format!("{m:e}")));
        }
        for (i, bn) in self.model.bn.iter().enumerate() {
            pairs.push((format!("bn.{i}.running_mean"), floats(&bn.running_mean)));
            pairs.push((format!("bn.{i}.running_var"), floats(&bn.running_var)));
        }
        for p in self.model.params.iter() {
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            pairs.push((format!("param.{}.shape", p.name), shape.join(",")));
            pairs.push((format!("param.{}", p.name), floats(p.value.data())));
        }
        render(&pairs)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let format: Option<String> = kv.take("format")?;
        if format.as_deref() != Some(FORMAT) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version: u32 = kv.take_required("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }

        // split the namespaced sections back out
        let mut config_kv = String::new();
        let mut stats_kv = String::new();
        let mut rest = String::new();
        for line in text.lines() {
            if let Some(s) = line.strip_prefix("config.") {
                config_kv.push_str(s);
                config_kv.push('\n');
            } else if let Some(s) = line.strip_prefix("stats.") {
                stats_kv.push_str(s);
                stats_kv.push('\n');
            } else if !line.starts_with("format") && !line.starts_with("version") {
                rest.push_str(line);
                rest.push('\n');
            }
        }
        let config = TrainConfig::from_kv(KeyValues::parse(&config_kv)?)?;
        config.validate()?;
        let mut skv = KeyValues::parse(&stats_kv)?;
        let stats = RobustStats::from_kv(&mut skv)?;
        skv.finish()?;

        let mut kv = KeyValues::parse(&rest)?;
        let strategy: CenterStrategy = kv.take_required("center.strategy")?;
        let coords = take_floats(&mut kv, "center.coords")?;
        let center = CenterState {
            point: LatentPoint::new(config.manifold, coords)?,
            strategy,
        };
        let mut train_medians = BTreeMap::new();
        for kind in ScoreKind::ALL {
            if let Some(m) = kv.take::<f64>(&format!("median.{kind}"))? {
                train_medians.insert(kind.to_string(), m);
            }
        }

        let mut model = Model::new(config.model_config(), config.seed)?;
        for (i, bn) in model.bn.iter_mut().enumerate() {
            let mean = take_floats(&mut kv, &format!("bn.{i}.running_mean"))?;
            let var = take_floats(&mut kv, &format!("bn.{i}.running_var"))?;
            if mean.len() != bn.features() || var.len() != bn.features() {
                return Err(Error::Checkpoint(format!(
                    "batch-norm layer {i} expects {} features",
                    bn.features()
                )));
            }
            bn.running_mean = mean;
            bn.running_var = var;
        }
        let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
        let mut values = Vec::with_capacity(names.len());
        for name in names {
            let shape: String = kv.take_required(&format!("param.{name}.shape"))?;
            let shape: Vec<usize> = parse_list(&shape)?;
            let data = take_floats(&mut kv, &format!("param.{name}"))?;
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            values.push((name, t));
        }
        model.params.assign(values)?;
        kv.finish()?;
        if center.point.dim() != config.latent_dim {
            return Err(Error::Checkpoint(format!(
                "center has {} coordinates, latent_dim is {}",
                center.point.dim(),
                config.latent_dim
            )));
        }
        Ok(Self {
            config,
            model,
            center,
            stats,
            train_medians,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
