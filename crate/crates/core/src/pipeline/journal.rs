//! Append-only, hash-chained run journal and per-unit checkpoints.
//!
//! Each journal line is a JSON event whose `hash` covers its own fields and
//! the previous event's hash, so any edit, reorder or deletion of earlier
//! lines is detected on replay. Checkpoint files hold a unit's result; the
//! journal records their hash, and a checkpoint only counts once its event
//! has been appended.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backends::clock::Clock;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::seed::sha256_hex;

pub const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// A unit finished and its checkpoint is durable.
    Done,
    /// A unit hit an error; it will be redone on resume.
    Failed,
    /// Every unit of a stage is done and the stage outputs are written.
    Sealed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEvent {
    pub seq: u64,
    pub stage: String,
    pub unit: String,
    /// Milliseconds on the run clock.
    pub ts_ms: u64,
    pub payload_hash: String,
    pub outcome: Outcome,
    pub prev: String,
    pub hash: String,
}

fn event_hash(e: &JournalEvent) -> String {
    let outcome = serde_json::to_string(&e.outcome).expect("enum serializes");
    sha256_hex(
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.seq, e.stage, e.unit, e.ts_ms, e.payload_hash, outcome, e.prev
        )
        .as_bytes(),
    )
}

/// Parses and verifies a journal; errors name the offending line.
pub fn replay(text: &str) -> Result<Vec<JournalEvent>> {
    let mut events = Vec::new();
    let mut prev = GENESIS.to_string();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let event: JournalEvent = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n,
            message: format!("corrupt journal entry: {e}"),
        })?;
        if event.seq != i as u64 || event.prev != prev || event_hash(&event) != event.hash {
            return Err(Error::Integrity(format!(
                "journal chain broken at line {n}"
            )));
        }
        prev = event.hash.clone();
        events.push(event);
    }
    Ok(events)
}

/// What a replayed journal says is finished.
#[derive(Debug, Clone, Default)]
pub struct Progress {
    pub done: HashMap<(String, String), String>,
    pub sealed: HashMap<String, String>,
}

impl Progress {
    pub fn from_events(events: &[JournalEvent]) -> Self {
        let mut p = Progress::default();
        for e in events {
            match e.outcome {
                Outcome::Done => {
                    p.done
                        .insert((e.stage.clone(), e.unit.clone()), e.payload_hash.clone());
                }
                Outcome::Sealed => {
                    p.sealed.insert(e.stage.clone(), e.payload_hash.clone());
                }
                Outcome::Failed => {}
            }
        }
        p
    }

    pub fn unit_hash(&self, stage: &str, unit: &str) -> Option<&str> {
        self.done
            .get(&(stage.to_string(), unit.to_string()))
            .map(String::as_str)
    }

    pub fn is_sealed(&self, stage: &str) -> bool {
        self.sealed.contains_key(stage)
    }

    pub fn sealed_stages(&self) -> HashSet<&str> {
        self.sealed.keys().map(String::as_str).collect()
    }
}

struct Tail {
    file: File,
    next_seq: u64,
    last_hash: String,
}

/// The single appender for a run's journal.
pub struct Journal {
    path: PathBuf,
    tail: Mutex<Tail>,
    clock: Arc<dyn Clock>,
}

impl Journal {
    /// Opens (creating if needed) and verifies the journal at `path`.
    pub fn open(path: &Path, clock: Arc<dyn Clock>) -> Result<(Journal, Vec<JournalEvent>)> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        let events = replay(&text)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let tail = Tail {
            file,
            next_seq: events.len() as u64,
            last_hash: events
                .last()
                .map_or(GENESIS.to_string(), |e| e.hash.clone()),
        };
        Ok((
            Journal {
                path: path.to_path_buf(),
                tail: Mutex::new(tail),
                clock,
            },
            events,
        ))
    }

    pub fn append(
        &self,
        stage: &str,
        unit: &str,
        payload_hash: &str,
        outcome: Outcome,
    ) -> Result<JournalEvent> {
        let mut tail = self.tail.lock().unwrap();
        let mut event = JournalEvent {
            seq: tail.next_seq,
            stage: stage.to_string(),
            unit: unit.to_string(),
            ts_ms: self.clock.now().as_millis() as u64,
            payload_hash: payload_hash.to_string(),
            outcome,
            prev: tail.last_hash.clone(),
            hash: String::new(),
        };
        event.hash = event_hash(&event);
        let mut line = serde_json::to_string(&event)?;
        line.push('\n');
        tail.file
            .write_all(line.as_bytes())
            .and_then(|_| tail.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))?;
        tail.next_seq += 1;
        tail.last_hash = event.hash.clone();
        Ok(event)
    }
}

/// Per-unit result files under `<run>/checkpoints/<stage>/<unit>.json`.
pub struct Checkpoints {
    root: PathBuf,
}

impl Checkpoints {
    pub fn new(run_dir: &Path) -> Self {
        Checkpoints {
            root: run_dir.join("checkpoints"),
        }
    }

    fn path(&self, stage: &str, unit: &str) -> PathBuf {
        self.root.join(stage).join(format!("{unit}.json"))
    }

    /// Writes the checkpoint and returns the hash to journal.
    pub fn save<T: Serialize>(&self, stage: &str, unit: &str, value: &T) -> Result<String> {
        let bytes = serde_json::to_vec_pretty(value)?;
        fsutil::write_atomic(&self.path(stage, unit), &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load<T: DeserializeOwned>(&self, stage: &str, unit: &str, expected: &str) -> Result<T> {
        let path = self.path(stage, unit);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != expected {
            return Err(Error::Integrity(format!(
                "checkpoint {} does not match the journal",
                path.display()
            )));
        }
        Ok(serde_json::from_slice(&bytes)?)
    }
}
