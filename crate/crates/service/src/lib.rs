//! HTTP service over the recall engine: users, study recording, schedules,
//! predictions, forgetting curves, and the six-day test-mode protocol, all
//! rebuilt from an append-only event log on boot.

pub mod config;
pub mod engine;
pub mod error;
pub mod events;
pub mod http;

#[cfg(test)]
#[path = "../tests/common/mod.rs"]
mod test_support;

use std::future::Future;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use recall_core::baselines::{FsrsModel, HlrModel, HlrWeights, LeitnerModel, Sm2Model};
use recall_core::classifier::{ContentAwareModel, RecallNet};
use recall_core::model::StudentModel;
use recall_core::retrieval::EmbeddingStore;
use recall_core::{Corpus, Flashcard};

pub use config::{ModelChoice, ServiceConfig};
pub use engine::{Engine, EngineOptions, RecordRequest};
pub use error::ServiceError;
pub use http::{router, AppState};

fn startup(path: &Path, reason: impl ToString) -> ServiceError {
    ServiceError::Startup {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Reads one JSON flashcard per line.
pub fn load_cards(path: &Path) -> Result<Corpus, ServiceError> {
    let file = std::fs::File::open(path).map_err(|e| startup(path, e))?;
    let mut corpus = Corpus::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| startup(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let card: Flashcard = serde_json::from_str(&line).map_err(|e| startup(path, format!("line {}: {e}", i + 1)))?;
        card.validate().map_err(|e| startup(path, format!("line {}: {e}", i + 1)))?;
        corpus.insert(card).map_err(|e| startup(path, format!("line {}: {e}", i + 1)))?;
    }
    Ok(corpus)
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, key: &str) -> Result<&'a Path, ServiceError> {
    p.as_deref().ok_or_else(|| ServiceError::Config(format!("{key} is required for this model")))
}

/// Loads the configured student model.
pub fn load_model(config: &ServiceConfig) -> Result<Arc<dyn StudentModel>, ServiceError> {
    Ok(match config.model {
        ModelChoice::Leitner => Arc::new(LeitnerModel),
        ModelChoice::Sm2 => Arc::new(Sm2Model),
        ModelChoice::Fsrs => Arc::new(FsrsModel),
        ModelChoice::Hlr => {
            let path = required(&config.hlr_weights_path, "hlr_weights")?;
            let text = std::fs::read_to_string(path).map_err(|e| startup(path, e))?;
            let weights = HlrWeights::from_kv(&text).map_err(|e| startup(path, e))?;
            Arc::new(HlrModel { weights })
        }
        ModelChoice::Checkpoint => {
            let ckpt = required(&config.checkpoint_path, "checkpoint")?;
            let emb = required(&config.embeddings_path, "embeddings")?;
            let net = RecallNet::load(ckpt).map_err(|e| startup(ckpt, e))?;
            let store = EmbeddingStore::load(emb).map_err(|e| startup(emb, e))?;
            Arc::new(ContentAwareModel::new(net, Arc::new(store)).map_err(|e| startup(emb, e))?)
        }
    })
}

/// Builds the engine described by `config`, replaying its log.
pub fn open_engine(config: &ServiceConfig) -> Result<Engine, ServiceError> {
    let cards = required(&config.cards_path, "cards")?;
    let corpus = load_cards(cards)?;
    let model = load_model(config)?;
    Engine::open(
        corpus,
        model,
        &config.log_path,
        EngineOptions {
            fsync: config.fsync,
            snapshot_every: config.snapshot_every,
            delta_interval_seconds: config.delta_interval_seconds,
            retention_threshold: config.retention_threshold,
            default_n: config.default_n,
        },
    )
}

/// Serves `engine` on `config.bind` until `shutdown` resolves, then writes a
/// final snapshot.
pub async fn serve_engine(config: &ServiceConfig, engine: Arc<Engine>, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(&config.bind).await.map_err(|e| ServiceError::Bind {
        addr: config.bind.clone(),
        reason: if e.kind() == std::io::ErrorKind::AddrInUse {
            "address already in use".into()
        } else {
            e.to_string()
        },
    })?;
    log::info!("listening on {}", listener.local_addr()?);
    let app = router(AppState {
        engine: engine.clone(),
        test_clock: config.test_clock,
    });
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    engine.write_snapshot()?;
    Ok(())
}

/// Opens the engine and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let engine = Arc::new(open_engine(&config)?);
    serve_engine(&config, engine, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
