use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use recall_core::baselines::{hlr_examples, hlr_fit, FsrsModel, HlrFitConfig, HlrModel, HlrWeights, LeitnerModel, Sm2Model};
use recall_core::classifier::{train as train_net, ContentAwareModel, NetConfig, RecallNet, RetrievalMode};
use recall_core::dataset::StudyLog;
use recall_core::eval::{evaluate, forgetting_curve, generate, EvalReport};
use recall_core::features::{CardStats, FeatureMask};
use recall_core::ingestion::{build_histories, load_dataset, parse_datetime, write_jsonl, DatasetRow};
use recall_core::model::{StudentModel, StudentView};
use recall_core::retrieval::EmbeddingStore;
use recall_core::{StudyHistory, Timestamp};
use recall_service::{ModelChoice, ServiceConfig};
use serde_json::json;

use crate::settings::Settings;

struct Data {
    log: StudyLog,
    split: usize,
}

fn load_data(s: &Settings) -> Result<Data> {
    let path = s.require("dataset")?;
    let rows = load_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
    let log = build_histories(&rows)?;
    let split = log.split_index(s.train_fraction()?);
    log::info!("{} records from {} users; {} for training", log.len(), log.users().count(), split);
    Ok(Data { log, split })
}

fn load_store(s: &Settings) -> Result<EmbeddingStore> {
    let path = s.require("embeddings")?;
    EmbeddingStore::load(&path).with_context(|| format!("reading {}", path.display()))
}

fn model_choice(s: &Settings) -> Result<ModelChoice> {
    s.get_or("model", ModelChoice::Checkpoint)
}

fn json_output(s: &Settings) -> bool {
    s.str("format") == Some("json")
}

fn fit_hlr(records: &[recall_core::StudyRecord]) -> Result<HlrWeights> {
    Ok(hlr_fit(&hlr_examples(records), &HlrFitConfig::default())?.weights)
}

/// HLR weights from `hlr_weights` when set, else fitted on the training split.
fn hlr_weights(s: &Settings, data: &Data) -> Result<HlrWeights> {
    match s.path("hlr_weights") {
        Some(p) => Ok(HlrWeights::from_kv(
            &std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => fit_hlr(&data.log.records()[..data.split]),
    }
}

fn student_model(s: &Settings, data: &Data) -> Result<Box<dyn StudentModel>> {
    Ok(match model_choice(s)? {
        ModelChoice::Checkpoint => {
            let net = RecallNet::load(s.require("checkpoint")?)?;
            Box::new(ContentAwareModel::new(net, Arc::new(load_store(s)?))?)
        }
        ModelChoice::Hlr => Box::new(HlrModel {
            weights: hlr_weights(s, data)?,
        }),
        ModelChoice::Leitner => Box::new(LeitnerModel),
        ModelChoice::Sm2 => Box::new(Sm2Model),
        ModelChoice::Fsrs => Box::new(FsrsModel),
    })
}

fn print_report(s: &Settings, report: &EvalReport) -> Result<()> {
    if json_output(s) {
        println!("{}", serde_json::to_string_pretty(report)?);
    } else {
        print!("{}", report.to_kv());
    }
    Ok(())
}

pub fn train(s: &Settings) -> Result<()> {
    let out = s.require("out")?;
    let data = load_data(s)?;
    let store = load_store(s)?;
    let trained = train_net(&store, data.log.records(), data.log.stats(), data.split, &s.net_config()?, &s.train_config()?)?;
    for (epoch, loss) in trained.epoch_losses.iter().enumerate() {
        log::info!("epoch {}: loss {loss:.5}", epoch + 1);
    }
    trained.net.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!("checkpoint={}", out.display());
    println!("params={}", trained.net.params.num_params());
    if let Some(loss) = trained.epoch_losses.last() {
        println!("final_loss={loss:.6}");
    }
    if let Some(path) = s.path("hlr_out") {
        let weights = fit_hlr(&data.log.records()[..data.split])?;
        std::fs::write(&path, weights.to_kv()).with_context(|| format!("writing {}", path.display()))?;
        println!("hlr_weights={}", path.display());
    }
    Ok(())
}

pub fn eval(s: &Settings) -> Result<()> {
    let data = load_data(s)?;
    let report = match model_choice(s)? {
        ModelChoice::Checkpoint => RecallNet::load(s.require("checkpoint")?)?.evaluate(&load_store(s)?, &data.log, data.split)?,
        _ => evaluate(student_model(s, &data)?.as_ref(), &data.log, data.split)?,
    };
    print_report(s, &report)
}

/// Input variant of an ablation sweep applied on top of the base config.
fn variant(name: &str, base: &NetConfig) -> Result<NetConfig> {
    let mut c = base.clone();
    match name {
        "full" => {}
        "no-embeddings" => c.use_embeddings = false,
        "no-features" => c.mask = FeatureMask::none(),
        "all-features" => c.mask = FeatureMask::all(),
        "past-k" => c.retrieval = RetrievalMode::PastK,
        k if k.starts_with('k') => {
            c.k = k[1..].parse().map_err(|_| anyhow!("unknown variant {k:?}"))?;
            if c.k == 0 {
                c.retrieval = RetrievalMode::None;
            }
        }
        other => bail!("unknown variant {other:?}"),
    }
    Ok(c)
}

pub fn ablate(s: &Settings) -> Result<()> {
    let data = load_data(s)?;
    let store = load_store(s)?;
    let base = s.net_config()?;
    let train_config = s.train_config()?;
    let names: Vec<String> = s
        .str("variants")
        .unwrap_or("full,no-embeddings,no-features,k0")
        .split(',')
        .map(|v| v.trim().to_owned())
        .filter(|v| !v.is_empty())
        .collect();
    let configs = names.iter().map(|n| variant(n, &base)).collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    for (name, config) in names.iter().zip(&configs) {
        log::info!("training variant {name}");
        let trained = train_net(&store, data.log.records(), data.log.stats(), data.split, config, &train_config)?;
        let report = trained.net.evaluate(&store, &data.log, data.split)?;
        results.push((name, report));
    }
    if json_output(s) {
        let rows: Vec<_> = results.iter().map(|(n, r)| json!({ "variant": n, "report": r })).collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        let na = |v: Option<f64>| v.map_or_else(|| "na".to_owned(), |x| format!("{x:.4}"));
        println!(
            "{:<16} {:>9} {:>10} {:>9} {:>10}",
            "variant", "seen_auc", "unseen_auc", "seen_ece", "unseen_ece"
        );
        for (name, r) in &results {
            println!(
                "{:<16} {:>9} {:>10} {:>9} {:>10}",
                name,
                na(r.seen.auc),
                na(r.unseen.auc),
                na(r.seen.ece),
                na(r.unseen.ece)
            );
        }
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn simulate(s: &Settings, train: bool) -> Result<()> {
    let spec = s.synthetic_spec()?;
    let data = generate(&spec, s.get_or("n_users", 50)?, s.get_or("n_cards", 2000)?, s.get_or("n_records", 50_000)?);
    log::info!("generated {} records over {} cards", data.records.len(), data.card_ids.len());
    let out = s.path("out");
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
        let rows: Vec<DatasetRow> = data
            .records
            .iter()
            .map(|r| {
                let mut row = DatasetRow::new(r.user_id.clone(), r.card_id.clone(), r.timestamp, r.is_correct());
                row.deck_id = r.deck_id.clone();
                row
            })
            .collect();
        write_file(&dir.join("records.jsonl"), |w| Ok(write_jsonl(&rows, w)?))?;
        write_file(&dir.join("cards.jsonl"), |w| {
            for card in data.corpus.iter() {
                serde_json::to_writer(&mut *w, card)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
        write_file(&dir.join("embeddings.txt"), |w| Ok(data.embeddings.write_text(w)?))?;
        println!("wrote {}", dir.display());
    }
    if !train {
        return Ok(());
    }
    let log = StudyLog::new(data.records.clone())?;
    let split = log.split_index(s.train_fraction()?);
    let trained = train_net(&data.embeddings, log.records(), log.stats(), split, &s.net_config()?, &s.train_config()?)?;
    let report = trained.net.evaluate(&data.embeddings, &log, split)?;
    if let Some(dir) = &out {
        trained.net.save(dir.join("model.ckpt"))?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    print_report(s, &report)
}

fn parse_at(text: &str) -> Result<Timestamp> {
    text.trim()
        .parse::<i64>()
        .map(Timestamp)
        .ok()
        .or_else(|| parse_datetime(text))
        .ok_or_else(|| anyhow!("unreadable time {text:?}"))
}

pub fn curve(s: &Settings) -> Result<()> {
    let data = load_data(s)?;
    let user = s.str("user").ok_or_else(|| anyhow!("missing user (flag --user)"))?;
    let card = s.str("card").ok_or_else(|| anyhow!("missing card (flag --card)"))?;
    let full = data.log.history(user).ok_or_else(|| anyhow!("user {user:?} has no records"))?;
    let start = match s.str("at") {
        Some(t) => parse_at(t)?,
        None => data.log.records().last().map_or(Timestamp(0), |r| r.timestamp.plus_seconds(1)),
    };
    let mut history = StudyHistory::new(full.user_id().clone());
    for r in full.before(start) {
        history.push(r.clone())?;
    }
    let earlier = data.log.records().partition_point(|r| r.timestamp < start);
    let stats = CardStats::from_records(&data.log.records()[..earlier]);
    let model = student_model(s, &data)?;
    let curve = forgetting_curve(model.as_ref(), &StudentView::new(&history, &stats), card, start)?;
    if json_output(s) {
        let body = json!({ "user_id": user, "card_id": curve.card_id, "start": start, "model": model.tag(), "points": curve.points });
        println!("{}", serde_json::to_string_pretty(&body)?);
    } else {
        for p in &curve.points {
            println!("{}\t{:.6}", p.day, p.probability);
        }
    }
    Ok(())
}

pub fn serve(s: &Settings) -> Result<()> {
    let config = ServiceConfig::from_kv(&s.service_kv())?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(recall_service::serve(config))?;
    Ok(())
}
