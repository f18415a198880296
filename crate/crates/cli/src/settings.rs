//! Layered settings: a `key=value` file, then `--set` overrides, then typed flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};
use recall_core::classifier::{NetConfig, RetrievalMode, TrainConfig};
use recall_core::config::KvConfig;
use recall_core::dataset::TRAIN_FRACTION;
use recall_core::eval::SyntheticSpec;
use recall_core::features::FeatureMask;

/// Keys read by the offline commands.
pub const KEYS: &[&str] = &[
    "dataset",
    "embeddings",
    "checkpoint",
    "out",
    "hlr_out",
    "train_fraction",
    "hidden",
    "k",
    "retrieval",
    "use_embeddings",
    "features",
    "learning_rate",
    "batch_size",
    "epochs",
    "dropout",
    "seed",
    "n_users",
    "n_cards",
    "n_records",
    "days",
    "embed_dim",
    "model",
    "hlr_weights",
    "user",
    "card",
    "at",
    "variants",
    "format",
];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    kv: KvConfig,
}

impl Settings {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = match file {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        kv.merge_overrides(overrides.iter().map(String::as_str))?;
        let known: Vec<&str> = KEYS.iter().chain(recall_service::config::KEYS).copied().collect();
        kv.check_known(&known)?;
        Ok(Self { kv })
    }

    /// Sets `key` when the flag was given.
    pub fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.kv.set(key, v.to_string());
        }
        self
    }

    pub fn switch(&mut self, key: &str, on: bool) -> &mut Self {
        if on {
            self.kv.set(key, "true");
        }
        self
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.kv.get_or(key, default)?)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.kv.get_str(key)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.str(key).map(PathBuf::from)
    }

    pub fn require(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| anyhow!("missing {key} (flag --{} or config key {key})", key.replace('_', "-")))
    }

    pub fn train_fraction(&self) -> Result<f64> {
        let f = self.get_or("train_fraction", TRAIN_FRACTION)?;
        anyhow::ensure!(f > 0.0 && f < 1.0, "train_fraction must be in (0, 1), got {f}");
        Ok(f)
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let d = NetConfig::default();
        let retrieval: RetrievalMode = self.get_or("retrieval", d.retrieval).map_err(|e| anyhow!("{e}"))?;
        let mask = match self.str("features") {
            Some(spec) => FeatureMask::parse(spec).context("features")?,
            None => d.mask,
        };
        Ok(NetConfig {
            hidden: self.get_or("hidden", d.hidden)?,
            k: self.get_or("k", d.k)?,
            retrieval,
            use_embeddings: self.get_or("use_embeddings", d.use_embeddings)?,
            mask,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            learning_rate: self.get_or("learning_rate", d.learning_rate)?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            epochs: self.get_or("epochs", d.epochs)?,
            dropout: self.get_or("dropout", d.dropout)?,
            seed: self.get_or("seed", d.seed)?,
            ..d
        })
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let d = SyntheticSpec::default();
        Ok(SyntheticSpec {
            days: self.get_or("days", d.days)?,
            embed_dim: self.get_or("embed_dim", d.embed_dim)?,
            seed: self.get_or("seed", d.seed)?,
            ..d
        })
    }

    /// The subset of keys the HTTP service understands.
    pub fn service_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        for (k, v) in self.kv.iter().filter(|(k, _)| recall_service::config::KEYS.contains(k)) {
            kv.set(k, v);
        }
        kv
    }
}
