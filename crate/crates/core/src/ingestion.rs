//! Released-dataset schema: JSON Lines (canonical) and CSV parsing,
//! per-user histories, chronological train/eval manifests, and validation of
//! stored feature columns against replayed features.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{self, BufRead, Read, Write};

use chrono::{DateTime, NaiveDateTime};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::StudyLog;
use crate::domain::{CardId, Corpus, DomainError, Flashcard, Label, StudyRecord, Timestamp, UserId};
use crate::features::{CardStats, Feature, FeatureContext, FeatureVector, UserReplay};

/// Feature columns present in the dataset (7.1 through 7.22).
pub const STORED_FEATURES: usize = 22;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed row: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: missing column {column}")]
    MissingColumn { line: usize, column: &'static str },
    #[error("line {line}: column {column} expected {expected}")]
    TypeMismatch {
        line: usize,
        column: &'static str,
        expected: &'static str,
    },
    #[error("line {line}: response must be 0 or 1, found {value}")]
    InvalidResponse { line: usize, value: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// One row of the released dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub user_id: UserId,
    pub card_id: CardId,
    pub card_text: String,
    pub deck_id: String,
    pub deck_name: String,
    /// Stored values of features 7.1..7.22, when the columns are present.
    pub stored: [Option<f64>; STORED_FEATURES],
    pub elapsed_milliseconds: Option<f64>,
    pub n_minutes_spent: Option<f64>,
    pub correct_on_first_try: Option<f64>,
    pub response: Label,
    pub utc_datetime: Timestamp,
    pub utc_date: Option<String>,
}

impl DatasetRow {
    pub fn new(user_id: impl Into<UserId>, card_id: impl Into<CardId>, utc_datetime: Timestamp, correct: bool) -> Self {
        Self {
            user_id: user_id.into(),
            card_id: card_id.into(),
            card_text: String::new(),
            deck_id: String::new(),
            deck_name: String::new(),
            stored: [None; STORED_FEATURES],
            elapsed_milliseconds: None,
            n_minutes_spent: None,
            correct_on_first_try: None,
            response: Label::new(correct),
            utc_datetime,
            utc_date: None,
        }
    }

    pub fn stored(&self, f: Feature) -> Option<f64> {
        self.stored.get(f.index()).copied().flatten()
    }

    pub fn to_record(&self) -> StudyRecord {
        let mut r = StudyRecord::new(self.user_id.clone(), self.card_id.clone(), self.utc_datetime, self.response.is_correct());
        r.elapsed_ms = self.elapsed_milliseconds.map_or(0, |ms| ms.max(0.0).round() as u64);
        r.deck_id = self.deck_id.clone();
        r
    }

    /// Canonical JSON object; absent optional columns are omitted.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("user_id".into(), self.user_id.as_str().into());
        m.insert("card_id".into(), self.card_id.as_str().into());
        m.insert("card_text".into(), self.card_text.clone().into());
        m.insert("deck_id".into(), self.deck_id.clone().into());
        m.insert("deck_name".into(), self.deck_name.clone().into());
        for (f, v) in Feature::ALL.iter().zip(&self.stored) {
            if let Some(v) = v {
                m.insert(f.column().into(), (*v).into());
            }
        }
        for (name, v) in [
            ("elapsed_milliseconds", self.elapsed_milliseconds),
            ("n_minutes_spent", self.n_minutes_spent),
            ("correct_on_first_try", self.correct_on_first_try),
        ] {
            if let Some(v) = v {
                m.insert(name.into(), v.into());
            }
        }
        m.insert("response".into(), u8::from(self.response.is_correct()).into());
        m.insert("utc_datetime".into(), self.utc_datetime.to_rfc3339().into());
        if let Some(d) = &self.utc_date {
            m.insert("utc_date".into(), d.clone().into());
        }
        Value::Object(m)
    }
}

enum Cell<'a> {
    Str(&'a str),
    Num(f64),
    Int(i64),
    Bool(bool),
    Null,
    Other,
}

fn json_cell(v: &Value) -> Cell<'_> {
    match v {
        Value::Null => Cell::Null,
        Value::Bool(b) => Cell::Bool(*b),
        Value::String(s) => Cell::Str(s),
        Value::Number(n) => match n.as_i64() {
            Some(i) => Cell::Int(i),
            None => n.as_f64().map_or(Cell::Other, Cell::Num),
        },
        _ => Cell::Other,
    }
}

/// Parses a dataset datetime, truncated to whole seconds. Accepts RFC 3339,
/// `YYYY-MM-DD HH:MM:SS[.fff][offset]` (naive times are UTC), or epoch seconds.
pub fn parse_datetime(s: &str) -> Option<Timestamp> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(Timestamp(dt.timestamp()));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f%:z", "%Y-%m-%d %H:%M:%S%.f%#z"] {
        if let Ok(dt) = DateTime::parse_from_str(s, fmt) {
            return Some(Timestamp(dt.timestamp()));
        }
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Timestamp(dt.and_utc().timestamp()));
        }
    }
    s.parse::<f64>().ok().filter(|x| x.is_finite()).map(|x| Timestamp(x.floor() as i64))
}

struct RowReader<'a, F: Fn(&str) -> Option<Cell<'a>>> {
    line: usize,
    get: F,
}

impl<'a, F: Fn(&str) -> Option<Cell<'a>>> RowReader<'a, F> {
    fn cell(&self, column: &'static str) -> Option<Cell<'a>> {
        match (self.get)(column) {
            None | Some(Cell::Null) => None,
            Some(Cell::Str("")) => None,
            Some(c) => Some(c),
        }
    }

    fn mismatch(&self, column: &'static str, expected: &'static str) -> IngestError {
        IngestError::TypeMismatch {
            line: self.line,
            column,
            expected,
        }
    }

    fn text(&self, column: &'static str) -> Result<Option<String>, IngestError> {
        match self.cell(column) {
            None => Ok(None),
            Some(Cell::Str(s)) => Ok(Some(s.to_owned())),
            Some(Cell::Int(i)) => Ok(Some(i.to_string())),
            Some(_) => Err(self.mismatch(column, "string")),
        }
    }

    fn required_text(&self, column: &'static str) -> Result<String, IngestError> {
        self.text(column)?.ok_or(IngestError::MissingColumn { line: self.line, column })
    }

    fn number(&self, column: &'static str) -> Result<Option<f64>, IngestError> {
        let v = match self.cell(column) {
            None => return Ok(None),
            Some(Cell::Num(x)) => x,
            Some(Cell::Int(i)) => i as f64,
            Some(Cell::Bool(b)) => f64::from(u8::from(b)),
            Some(Cell::Str(s)) => match s.trim() {
                "true" | "True" => 1.0,
                "false" | "False" => 0.0,
                t => t.parse().map_err(|_| self.mismatch(column, "number"))?,
            },
            Some(Cell::Null | Cell::Other) => return Err(self.mismatch(column, "number")),
        };
        if v.is_finite() {
            Ok(Some(v))
        } else {
            Err(self.mismatch(column, "finite number"))
        }
    }

    fn response(&self) -> Result<Label, IngestError> {
        let invalid = |value: String| IngestError::InvalidResponse { line: self.line, value };
        match self.cell("response") {
            None => Err(IngestError::MissingColumn {
                line: self.line,
                column: "response",
            }),
            Some(Cell::Bool(b)) => Ok(Label::new(b)),
            Some(Cell::Int(i)) => Label::from_int(i).ok_or_else(|| invalid(i.to_string())),
            Some(Cell::Num(x)) if x == 0.0 || x == 1.0 => Ok(Label::new(x == 1.0)),
            Some(Cell::Num(x)) => Err(invalid(x.to_string())),
            Some(Cell::Str(s)) => match s.trim() {
                "1" | "1.0" | "true" | "True" | "correct" => Ok(Label::CORRECT),
                "0" | "0.0" | "false" | "False" | "incorrect" => Ok(Label::INCORRECT),
                other => Err(invalid(other.to_owned())),
            },
            Some(Cell::Null | Cell::Other) => Err(invalid("non-scalar".into())),
        }
    }

    fn datetime(&self) -> Result<Timestamp, IngestError> {
        let column = "utc_datetime";
        match self.cell(column) {
            None => Err(IngestError::MissingColumn { line: self.line, column }),
            Some(Cell::Str(s)) => parse_datetime(s).ok_or_else(|| self.mismatch(column, "datetime")),
            Some(Cell::Int(i)) => Ok(Timestamp(i)),
            Some(Cell::Num(x)) if x.is_finite() => Ok(Timestamp(x.floor() as i64)),
            Some(_) => Err(self.mismatch(column, "datetime")),
        }
    }

    fn row(&self) -> Result<DatasetRow, IngestError> {
        let mut stored = [None; STORED_FEATURES];
        for (slot, f) in stored.iter_mut().zip(Feature::ALL) {
            *slot = self.number(f.column())?;
        }
        Ok(DatasetRow {
            user_id: UserId::new(self.required_text("user_id")?),
            card_id: CardId::new(self.required_text("card_id")?),
            card_text: self.text("card_text")?.unwrap_or_default(),
            deck_id: self.text("deck_id")?.unwrap_or_default(),
            deck_name: self.text("deck_name")?.unwrap_or_default(),
            stored,
            elapsed_milliseconds: self.number("elapsed_milliseconds")?,
            n_minutes_spent: self.number("n_minutes_spent")?,
            correct_on_first_try: self.number("correct_on_first_try")?,
            response: self.response()?,
            utc_datetime: self.datetime()?,
            utc_date: self.text("utc_date")?,
        })
    }
}

/// Parses one row object; `line` is used in error reports.
pub fn row_from_json(obj: &Map<String, Value>, line: usize) -> Result<DatasetRow, IngestError> {
    RowReader {
        line,
        get: |c: &str| obj.get(c).map(json_cell),
    }
    .row()
}

/// Parses JSON Lines rows in file order. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<DatasetRow>, IngestError> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(IngestError::Malformed {
                line: line_no,
                reason: "expected a JSON object".into(),
            });
        };
        rows.push(row_from_json(&obj, line_no)?);
    }
    log::info!("parsed {} rows", rows.len());
    Ok(rows)
}

/// Parses comma-separated rows with a header line. Empty cells count as absent.
pub fn parse_csv(reader: impl Read) -> Result<Vec<DatasetRow>, IngestError> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| IngestError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let columns: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let mut rows = Vec::new();
    for record in csv.records() {
        let record = record.map_err(|e| IngestError::Malformed {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let reader = RowReader {
            line,
            get: |c: &str| columns.get(c).and_then(|&i| record.get(i)).map(Cell::Str),
        };
        rows.push(reader.row()?);
    }
    log::info!("parsed {} rows", rows.len());
    Ok(rows)
}

/// Picks the parser by extension: `.csv` is CSV, anything else JSON Lines.
pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<Vec<DatasetRow>, IngestError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_csv(io::BufReader::new(file))
    } else {
        parse_jsonl(io::BufReader::new(file))
    }
}

pub fn write_jsonl(rows: &[DatasetRow], mut w: impl Write) -> io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, &r.to_json())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

const TEXT_COLUMNS: [&str; 5] = ["user_id", "card_id", "card_text", "deck_id", "deck_name"];
const TAIL_COLUMNS: [&str; 6] = [
    "elapsed_milliseconds",
    "n_minutes_spent",
    "correct_on_first_try",
    "response",
    "utc_datetime",
    "utc_date",
];

pub fn write_csv(rows: &[DatasetRow], w: impl Write) -> Result<(), IngestError> {
    let mut csv = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| IngestError::Io(io::Error::other(e));
    let header: Vec<&str> = TEXT_COLUMNS
        .into_iter()
        .chain(Feature::ALL[..STORED_FEATURES].iter().map(|f| f.column()))
        .chain(TAIL_COLUMNS)
        .collect();
    csv.write_record(&header).map_err(csv_err)?;
    let num = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
    for r in rows {
        let mut cells: Vec<String> = vec![
            r.user_id.to_string(),
            r.card_id.to_string(),
            r.card_text.clone(),
            r.deck_id.clone(),
            r.deck_name.clone(),
        ];
        cells.extend(r.stored.iter().map(|v| num(*v)));
        cells.extend([
            num(r.elapsed_milliseconds),
            num(r.n_minutes_spent),
            num(r.correct_on_first_try),
            u8::from(r.response.is_correct()).to_string(),
            r.utc_datetime.to_rfc3339(),
            r.utc_date.clone().unwrap_or_default(),
        ]);
        csv.write_record(&cells).map_err(csv_err)?;
    }
    csv.flush()?;
    Ok(())
}

/// Cards named in the rows, first occurrence wins.
pub fn corpus_from_rows(rows: &[DatasetRow]) -> Corpus {
    let mut corpus = Corpus::new();
    for r in rows {
        if !corpus.contains(r.card_id.as_str()) {
            let mut card = Flashcard::new(r.card_id.clone(), r.card_text.clone(), r.deck_id.clone());
            card.deck_name = r.deck_name.clone();
            corpus.upsert(card);
        }
    }
    corpus
}

/// Per-user chronological histories and global card aggregates.
pub fn build_histories(rows: &[DatasetRow]) -> Result<StudyLog, IngestError> {
    Ok(StudyLog::new(rows.iter().map(DatasetRow::to_record).collect())?)
}

/// Row indices in chronological order; same-second rows keep file order.
fn chronological_order(rows: &[DatasetRow]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| rows[i].utc_datetime);
    order
}

/// Hex SHA-256 of the canonical JSON Lines serialization.
pub fn fingerprint(rows: &[DatasetRow]) -> String {
    let mut hasher = Sha256::new();
    for r in rows {
        hasher.update(r.to_json().to_string().as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Chronological train/eval partition of row indices (file order, 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub ratio: f64,
    pub fingerprint: String,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl SplitManifest {
    pub fn is_degenerate(&self) -> bool {
        self.train.is_empty() || self.eval.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ratio={:?}\nfingerprint={}\n[train]\n", self.ratio, self.fingerprint);
        for i in &self.train {
            let _ = writeln!(s, "{i}");
        }
        s.push_str("[eval]\n");
        for i in &self.eval {
            let _ = writeln!(s, "{i}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let bad = |m: String| IngestError::Manifest(m);
        let mut ratio = None;
        let mut fp = None;
        let mut section: Option<bool> = None;
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for (n, line) in text.lines().enumerate().map(|(n, l)| (n + 1, l.trim())) {
            match line {
                "" => {}
                "[train]" => section = Some(true),
                "[eval]" => section = Some(false),
                _ if section.is_none() => {
                    let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {n}: expected key=value")))?;
                    match k.trim() {
                        "ratio" => ratio = Some(v.trim().parse::<f64>().map_err(|e| bad(format!("line {n}: {e}")))?),
                        "fingerprint" => fp = Some(v.trim().to_owned()),
                        other => return Err(bad(format!("line {n}: unknown key {other}"))),
                    }
                }
                _ => {
                    let id = line.parse::<usize>().map_err(|e| bad(format!("line {n}: {e}")))?;
                    if section == Some(true) {
                        train.push(id);
                    } else {
                        eval.push(id);
                    }
                }
            }
        }
        Ok(Self {
            ratio: ratio.ok_or_else(|| bad("missing ratio".into()))?,
            fingerprint: fp.ok_or_else(|| bad("missing fingerprint".into()))?,
            train,
            eval,
        })
    }

    /// Checks that the manifest matches `rows`: fingerprint, disjoint and
    /// exhaustive coverage, and no eval row earlier than a train row.
    pub fn verify(&self, rows: &[DatasetRow]) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::Manifest(m.to_owned()));
        if self.fingerprint != fingerprint(rows) {
            return bad("fingerprint does not match the dataset");
        }
        let mut seen = HashSet::new();
        for &i in self.train.iter().chain(&self.eval) {
            if i >= rows.len() || !seen.insert(i) {
                return bad("row ids must be in range and appear once");
            }
        }
        if seen.len() != rows.len() {
            return bad("manifest does not cover every row");
        }
        let last_train = self.train.iter().map(|&i| rows[i].utc_datetime).max();
        let first_eval = self.eval.iter().map(|&i| rows[i].utc_datetime).min();
        if let (Some(a), Some(b)) = (last_train, first_eval) {
            if a > b {
                return bad("an eval row precedes a train row");
            }
        }
        Ok(())
    }
}

/// First `ceil(ratio * N)` rows in chronological order go to training.
pub fn chronological_split(rows: &[DatasetRow], ratio: f64) -> Result<SplitManifest, IngestError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(IngestError::InvalidRatio(ratio));
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    let order = chronological_order(rows);
    let cut = ((ratio * rows.len() as f64).ceil() as usize).min(rows.len());
    let manifest = SplitManifest {
        ratio,
        fingerprint: fingerprint(rows),
        train: order[..cut].to_vec(),
        eval: order[cut..].to_vec(),
    };
    if manifest.is_degenerate() {
        log::warn!("degenerate split: {} train / {} eval rows", manifest.train.len(), manifest.eval.len());
    }
    Ok(manifest)
}

/// Features of every row at its own timestamp, from one chronological replay.
/// Output is in file order.
pub fn replay_features(rows: &[DatasetRow]) -> Vec<FeatureVector> {
    let order = chronological_order(rows);
    let records: Vec<StudyRecord> = order.iter().map(|&i| rows[i].to_record()).collect();
    let stats = CardStats::from_records(&records);
    let ctx = FeatureContext::new(&stats);
    let mut users: HashMap<&str, (UserReplay, usize, Vec<usize>)> = HashMap::new();
    let mut out = vec![FeatureVector::default(); rows.len()];
    for (pos, r) in records.iter().enumerate() {
        let (replay, applied, mine) = users.entry(r.user_id.as_str()).or_default();
        while let Some(&j) = mine.get(*applied) {
            if records[j].timestamp >= r.timestamp {
                break;
            }
            replay.apply(&records[j]);
            *applied += 1;
        }
        out[order[pos]] = replay.features(r.card_id.as_str(), r.timestamp, &ctx);
        mine.push(pos);
    }
    out
}

/// Returns a copy of `rows` with columns 7.1..7.22 filled from replay.
pub fn annotate(rows: &[DatasetRow]) -> Vec<DatasetRow> {
    rows.iter()
        .zip(replay_features(rows))
        .map(|(r, v)| {
            let mut r = r.clone();
            for (slot, x) in r.stored.iter_mut().zip(v.0) {
                *slot = Some(x);
            }
            r
        })
        .collect()
}

/// Replay-vs-stored agreement over columns 7.1..7.22.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureAgreement {
    /// Rows with at least one stored feature column.
    pub rows_compared: usize,
    /// Rows whose every stored column agrees.
    pub rows_matching: usize,
    /// `(feature, compared, agreed)` per column.
    pub per_feature: Vec<(Feature, usize, usize)>,
}

impl FeatureAgreement {
    pub fn row_fraction(&self) -> Option<f64> {
        (self.rows_compared > 0).then(|| self.rows_matching as f64 / self.rows_compared as f64)
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1.0)
}

/// Whether a stored value agrees with the replayed one. Time-derived columns
/// get a looser tolerance for sub-second parts in stored datetimes.
/// `usercard_delta_previous` may be stored in seconds instead of hours, and
/// `sm2_efactor` may be stored as 0 for a card never studied before.
pub fn feature_agrees(f: Feature, replayed: &FeatureVector, stored: f64) -> bool {
    let v = replayed[f];
    let time_like = matches!(
        f,
        Feature::UsercardDelta | Feature::UsercardDeltaPrevious | Feature::DeltaToLeitner | Feature::DeltaToSm2
    );
    let rel = if time_like { 1e-3 } else { 1e-6 };
    if close(stored, v, rel) {
        return true;
    }
    match f {
        Feature::UsercardDeltaPrevious => close(stored, v * 3600.0, rel),
        Feature::Sm2Efactor => stored == 0.0 && replayed[Feature::IsNewFact] == 1.0,
        _ => false,
    }
}

pub fn validate_features(rows: &[DatasetRow]) -> FeatureAgreement {
    let replayed = replay_features(rows);
    let mut per = [(0usize, 0usize); STORED_FEATURES];
    let mut agreement = FeatureAgreement::default();
    for (row, v) in rows.iter().zip(&replayed) {
        let mut any = false;
        let mut all = true;
        for (f, stat) in Feature::ALL.iter().zip(per.iter_mut()) {
            if let Some(s) = row.stored(*f) {
                any = true;
                stat.0 += 1;
                if feature_agrees(*f, v, s) {
                    stat.1 += 1;
                } else {
                    all = false;
                }
            }
        }
        if any {
            agreement.rows_compared += 1;
            agreement.rows_matching += usize::from(all);
        }
    }
    agreement.per_feature = Feature::ALL.iter().zip(per).map(|(f, (c, a))| (*f, c, a)).collect();
    agreement
}
