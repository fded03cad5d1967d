//! Run configuration.
//!
//! A run is described by one TOML file: `key = value` lines grouped under
//! `[section]` headers (nested sections use dotted headers such as
//! `[slow.train]`). Every key has a default, so an empty file is a valid
//! configuration. Unknown sections or keys are rejected. Command-line
//! overrides use the same dotted paths: `--set fast.train.steps=500`.
//!
//! ```toml
//! [run]
//! seed = 0
//! out_dir = "runs/default"
//!
//! [distill]
//! tau = 10.0
//! alpha_over_tau2 = 0.001
//!
//! [pipeline]
//! k = 10
//! beta = 0.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, Split};
use crate::distill::DistillConfig;
use crate::encoders::{DualEncoderConfig, ImageEncoderConfig};
use crate::error::{Error, Result};
use crate::index::PqConfig;
use crate::io::write_atomic;
use crate::optim::TrainConfig;
use crate::pipeline::PipelineConfig;
use crate::slow::{DecoderConfig, SlowConfig};

/// File name of the resolved configuration written next to every output.
pub const RESOLVED_NAME: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Seed for data generation and parameter initialization.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Write measured times into CSVs; off gives byte-stable outputs.
    pub record_timings: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            record_timings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlowSection {
    pub resolution: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub share_embeddings: bool,
    pub image: ImageEncoderConfig,
    pub train: TrainConfig,
}

impl Default for SlowSection {
    fn default() -> Self {
        SlowSection {
            resolution: 8,
            width: 64,
            heads: 4,
            layers: 2,
            share_embeddings: false,
            image: ImageEncoderConfig::default(),
            train: TrainConfig {
                steps: 1000,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FastSection {
    pub embed_dim: usize,
    pub image: ImageEncoderConfig,
    /// Used for both plain and distilled training.
    pub train: TrainConfig,
}

impl Default for FastSection {
    fn default() -> Self {
        FastSection {
            embed_dim: 64,
            image: ImageEncoderConfig::default(),
            train: TrainConfig {
                steps: 3000,
                batch_size: 32,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub tau: f64,
    pub alpha_over_tau2: f64,
    pub block_size: usize,
    /// Grid axes of `sweep-distill`.
    pub sweep_taus: Vec<f64>,
    pub sweep_alpha_over_tau2: Vec<f64>,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            tau: d.tau,
            alpha_over_tau2: d.alpha_over_tau2,
            block_size: d.block_size,
            sweep_taus: crate::distill::SWEEP_TAUS.to_vec(),
            sweep_alpha_over_tau2: crate::distill::SWEEP_ALPHA_OVER_TAU2.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Exact,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexSection {
    pub kind: IndexKind,
    pub m: usize,
    pub kc: usize,
    pub iters: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        let p = PqConfig::default();
        IndexSection {
            kind: IndexKind::Exact,
            m: p.m,
            kc: p.kc,
            iters: p.iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Split used as corpus and query set.
    pub split: Split,
    /// Queries used by `rerank-curve` and `eval`; 0 means the whole split.
    pub queries: usize,
    pub curve_ks: Vec<usize>,
    pub curve_betas: Vec<f64>,
    pub bench_ks: Vec<usize>,
    pub bench_queries: usize,
    pub bench_warmup: usize,
    pub bench_exhaustive_queries: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: Split::Test,
            queries: 0,
            curve_ks: vec![1, 2, 5, 10, 20, 50],
            curve_betas: vec![0.0, 0.1, 1.0],
            bench_ks: vec![1, 10, 50],
            bench_queries: 20,
            bench_warmup: 3,
            bench_exhaustive_queries: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataConfig,
    pub slow: SlowSection,
    pub fast: FastSection,
    pub distill: DistillSection,
    pub index: IndexSection,
    pub pipeline: PipelineConfig,
    pub eval: EvalSection,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim().replace('\n', " "))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value; bare words
/// become strings.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Parses a configuration text; keys it leaves out take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::resolve_table(text.parse::<toml::Table>().map_err(config_err)?, &[])
    }

    /// Reads `path` (or starts from defaults when `None`) and applies
    /// `section.key=value` overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), config_err(e))))?
            }
            None => toml::Table::new(),
        };
        Self::resolve_table(table, overrides)
    }

    fn resolve_table(user: toml::Table, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(config_err)?;
        merge(&mut table, user);
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {o:?} is not of the form key=value"))
            })?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            let mut node = &mut table;
            for k in &keys[..keys.len() - 1] {
                node = match node.get_mut(*k) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(Error::Config(format!("unknown config section {path:?}"))),
                };
            }
            let last = keys[keys.len() - 1];
            if !node.contains_key(last) {
                return Err(Error::Config(format!("unknown config key {path:?}")));
            }
            node.insert(last.to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.distill_config().validate()?;
        if self.pipeline.k == 0 {
            return Err(Error::Config("pipeline.k must be at least 1".into()));
        }
        if !self.pipeline.beta.is_finite() {
            return Err(Error::Config("pipeline.beta must be finite".into()));
        }
        for t in [&self.slow.train, &self.fast.train] {
            if t.batch_size == 0 {
                return Err(Error::Config("train.batch_size must be at least 1".into()));
            }
            if !(t.lr > 0.0) {
                return Err(Error::Config("train.lr must be positive".into()));
            }
        }
        Ok(())
    }

    /// The resolved configuration as TOML text.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_NAME);
        write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }

    pub fn slow_config(&self, vocab_size: usize) -> SlowConfig {
        SlowConfig {
            image: self.slow.image.clone(),
            resolution: self.slow.resolution,
            decoder: DecoderConfig {
                vocab_size,
                width: self.slow.width,
                heads: self.slow.heads,
                layers: self.slow.layers,
                max_len: DataConfig::caption_len(self.data.max_objects) + 1,
            },
            share_embeddings: self.slow.share_embeddings,
        }
    }

    pub fn fast_config(&self, vocab_size: usize) -> DualEncoderConfig {
        DualEncoderConfig {
            image: self.fast.image.clone(),
            embed_dim: self.fast.embed_dim,
            vocab_size,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            tau: self.distill.tau,
            alpha_over_tau2: self.distill.alpha_over_tau2,
            block_size: self.distill.block_size,
        }
    }

    pub fn pq_config(&self) -> PqConfig {
        PqConfig {
            m: self.index.m,
            kc: self.index.kc,
            iters: self.index.iters,
            seed: self.run.seed,
        }
    }
}
