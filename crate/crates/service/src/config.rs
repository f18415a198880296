use std::path::PathBuf;
use std::str::FromStr;

use recall_core::config::{ConfigError, KvConfig};
use recall_core::domain::SECONDS_PER_DAY;

use crate::error::ServiceError;

/// Student model backing predictions and schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Checkpoint,
    Hlr,
    Leitner,
    Sm2,
    Fsrs,
}

impl FromStr for ModelChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "checkpoint" => Ok(Self::Checkpoint),
            "hlr" => Ok(Self::Hlr),
            "leitner" => Ok(Self::Leitner),
            "sm2" => Ok(Self::Sm2),
            "fsrs" => Ok(Self::Fsrs),
            other => Err(format!("unknown model {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: String,
    pub log_path: PathBuf,
    /// JSON Lines file of flashcards.
    pub cards_path: Option<PathBuf>,
    pub model: ModelChoice,
    pub checkpoint_path: Option<PathBuf>,
    pub embeddings_path: Option<PathBuf>,
    pub hlr_weights_path: Option<PathBuf>,
    /// Honor `X-Clock-Override`. Test deployments only.
    pub test_clock: bool,
    pub fsync: bool,
    pub snapshot_every: usize,
    pub delta_interval_seconds: i64,
    pub retention_threshold: f64,
    pub default_n: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            log_path: PathBuf::from("recall-events.jsonl"),
            cards_path: None,
            model: ModelChoice::Leitner,
            checkpoint_path: None,
            embeddings_path: None,
            hlr_weights_path: None,
            test_clock: false,
            fsync: true,
            snapshot_every: 1000,
            delta_interval_seconds: SECONDS_PER_DAY,
            retention_threshold: 0.9,
            default_n: 10,
        }
    }
}

pub const KEYS: &[&str] = &[
    "bind",
    "log",
    "cards",
    "model",
    "checkpoint",
    "embeddings",
    "hlr_weights",
    "test_clock",
    "fsync",
    "snapshot_every",
    "delta_interval_seconds",
    "retention_threshold",
    "default_n",
];

impl ServiceConfig {
    /// Reads the keys in [`KEYS`]; anything absent keeps its default.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ServiceError> {
        let err = |e: ConfigError| ServiceError::Config(e.to_string());
        kv.check_known(KEYS).map_err(err)?;
        let d = Self::default();
        let path = |k: &str| kv.get_str(k).map(PathBuf::from);
        Ok(Self {
            bind: kv.get_str("bind").map_or(d.bind, str::to_owned),
            log_path: path("log").unwrap_or(d.log_path),
            cards_path: path("cards"),
            model: kv.get_or("model", d.model).map_err(err)?,
            checkpoint_path: path("checkpoint"),
            embeddings_path: path("embeddings"),
            hlr_weights_path: path("hlr_weights"),
            test_clock: kv.get_or("test_clock", d.test_clock).map_err(err)?,
            fsync: kv.get_or("fsync", d.fsync).map_err(err)?,
            snapshot_every: kv.get_or("snapshot_every", d.snapshot_every).map_err(err)?,
            delta_interval_seconds: kv.get_or("delta_interval_seconds", d.delta_interval_seconds).map_err(err)?,
            retention_threshold: kv.get_or("retention_threshold", d.retention_threshold).map_err(err)?,
            default_n: kv.get_or("default_n", d.default_n).map_err(err)?,
        })
    }
}
