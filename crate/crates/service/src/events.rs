//! Append-only JSON Lines event log. Study events use the dataset row schema
//! plus a few service fields; control events carry an `event` tag.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use recall_core::ingestion::{row_from_json, DatasetRow};
use recall_core::{CardId, Timestamp, UserId};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ControlEvent {
    User { user_id: UserId, at: Timestamp },
    TestStart { user_id: UserId, cards: Vec<CardId>, at: Timestamp },
    TestSelect { user_id: UserId, cards: Vec<CardId>, at: Timestamp },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyEvent {
    pub row: DatasetRow,
    pub idempotency_key: Option<String>,
    pub answer_text: Option<String>,
    /// Answer given inside a test-mode session.
    pub test: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Control(ControlEvent),
    Study(Box<StudyEvent>),
}

impl Event {
    pub fn to_json(&self) -> Value {
        match self {
            Event::Control(c) => serde_json::to_value(c).expect("control events serialize"),
            Event::Study(s) => {
                let Value::Object(mut m) = s.row.to_json() else {
                    unreachable!("rows serialize to objects")
                };
                m.insert("event".into(), "study".into());
                if let Some(k) = &s.idempotency_key {
                    m.insert("idempotency_key".into(), k.clone().into());
                }
                if let Some(a) = &s.answer_text {
                    m.insert("answer_text".into(), a.clone().into());
                }
                if s.test {
                    m.insert("test".into(), true.into());
                }
                Value::Object(m)
            }
        }
    }

    pub fn from_json(value: Value, line: usize) -> Result<Self, String> {
        let Value::Object(obj) = value else {
            return Err("expected a JSON object".into());
        };
        if obj.get("event").and_then(Value::as_str) == Some("study") {
            let text = |m: &Map<String, Value>, k: &str| m.get(k).and_then(Value::as_str).map(str::to_owned);
            return Ok(Event::Study(Box::new(StudyEvent {
                row: row_from_json(&obj, line).map_err(|e| e.to_string())?,
                idempotency_key: text(&obj, "idempotency_key"),
                answer_text: text(&obj, "answer_text"),
                test: obj.get("test").and_then(Value::as_bool).unwrap_or(false),
            })));
        }
        serde_json::from_value(Value::Object(obj)).map(Event::Control).map_err(|e| e.to_string())
    }
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    fsync: bool,
    len: usize,
}

impl EventLog {
    /// Opens (creating if needed) the log and returns its events. A trailing
    /// partial line, left by a crash mid-append, is dropped and truncated away.
    pub fn open(path: impl AsRef<Path>, fsync: bool) -> Result<(Self, Vec<Event>), ServiceError> {
        let path = path.as_ref().to_path_buf();
        let startup = |reason: String| ServiceError::Startup {
            path: path.display().to_string(),
            reason,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| startup(e.to_string()))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| startup(e.to_string()))?;
        let mut events = Vec::new();
        let mut good_bytes = 0u64;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            let mut line_no = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(|e| startup(e.to_string()))?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                let complete = line.ends_with('\n');
                let parsed = serde_json::from_str::<Value>(line.trim_end())
                    .map_err(|e| e.to_string())
                    .and_then(|v| Event::from_json(v, line_no));
                match parsed {
                    Ok(e) if complete => {
                        events.push(e);
                        good_bytes += n as u64;
                    }
                    _ if !complete => {
                        log::warn!("{}: dropping partial trailing line {line_no}", path.display());
                        break;
                    }
                    Ok(_) => unreachable!(),
                    Err(reason) => return Err(startup(format!("line {line_no}: {reason}"))),
                }
            }
        }
        if file.metadata().map_err(|e| startup(e.to_string()))?.len() != good_bytes {
            file.set_len(good_bytes).map_err(|e| startup(e.to_string()))?;
            file.seek(SeekFrom::End(0)).map_err(|e| startup(e.to_string()))?;
        }
        let len = events.len();
        Ok((Self { path, file, fsync, len }, events))
    }

    /// Appends one event and, when configured, syncs it to disk before returning.
    pub fn append(&mut self, event: &Event) -> io::Result<usize> {
        let mut line = serde_json::to_vec(&event.to_json())?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        self.len += 1;
        Ok(self.len)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn study(i: i64) -> Event {
        let mut row = DatasetRow::new("u", format!("c{i}").as_str(), Timestamp(100 + i), i % 2 == 0);
        row.elapsed_milliseconds = Some(1500.0);
        Event::Study(Box::new(StudyEvent {
            row,
            idempotency_key: Some(format!("k{i}")),
            answer_text: Some("an answer".into()),
            test: i == 3,
        }))
    }

    #[test]
    fn round_trips_and_drops_partial_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let control = Event::Control(ControlEvent::User {
            user_id: UserId::new("u"),
            at: Timestamp(1),
        });
        {
            let (mut log, events) = EventLog::open(&path, false).unwrap();
            assert!(events.is_empty());
            log.append(&control).unwrap();
            for i in 0..5 {
                log.append(&study(i)).unwrap();
            }
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"event\":\"stu")
            .unwrap();
        let (mut log, events) = EventLog::open(&path, false).unwrap();
        assert_eq!(events.len(), 6);
        assert_eq!(events[0], control);
        assert_eq!(events[4], study(3));
        log.append(&study(9)).unwrap();
        drop(log);
        let (_, events) = EventLog::open(&path, false).unwrap();
        assert_eq!(events.len(), 7);
        assert_eq!(events[6], study(9));
    }

    #[test]
    fn corrupt_middle_line_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        std::fs::write(&path, "{\"event\":\"user\",\"user_id\":\"u\",\"at\":1}\nnot json\n").unwrap();
        let err = EventLog::open(&path, false).unwrap_err().to_string();
        assert!(err.contains("log.jsonl") && err.contains("line 2"), "{err}");
    }
}
