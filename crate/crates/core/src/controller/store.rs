//! Append-only storage of received data messages.
//!
//! Each node gets `<dir>/<imei>.jsonl`; messages from unknown senders go to
//! `<dir>/quarantine.jsonl`. A line is `{"receivedAt":<ms>,"frame":<wire object>}`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::wire::{self, Message, WireError};

pub const QUARANTINE_FILE: &str = "quarantine.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredEntry {
    pub received_at_ms: i64,
    pub message: Message,
}

#[derive(Serialize)]
struct LogLineOut<'a> {
    #[serde(rename = "receivedAt")]
    received_at: i64,
    frame: &'a RawValue,
}

#[derive(Deserialize)]
struct LogLineIn {
    #[serde(rename = "receivedAt")]
    received_at: i64,
    frame: Box<RawValue>,
}

fn log_line(entry: &StoredEntry) -> Result<Vec<u8>, WireError> {
    let frame = wire::encode(&entry.message)?;
    let text = std::str::from_utf8(&frame[..frame.len() - 1]).expect("encoder emits UTF-8");
    let raw: &RawValue = serde_json::from_str(text)?;
    let mut line = serde_json::to_vec(&LogLineOut {
        received_at: entry.received_at_ms,
        frame: raw,
    })?;
    line.push(b'\n');
    Ok(line)
}

/// Reads a log written by [`DataStore`]. A torn final line is skipped.
pub fn read_log(path: &Path) -> io::Result<Vec<StoredEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut lines = reader.lines().peekable();
    while let Some(line) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<LogLineIn>(&line)
            .map_err(WireError::from)
            .and_then(|l| Ok((l.received_at, wire::decode(l.frame.get().as_bytes())?)));
        match parsed {
            Ok((received_at_ms, message)) => out.push(StoredEntry {
                received_at_ms,
                message,
            }),
            Err(e) if lines.peek().is_none() => {
                tracing::warn!(path = %path.display(), error = %e, "skipping torn final log line");
            }
            Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string())),
        }
    }
    Ok(out)
}

#[derive(Debug)]
struct Persistence {
    dir: PathBuf,
    writers: BTreeMap<String, BufWriter<File>>,
}

impl Persistence {
    fn append(&mut self, file_stem: &str, line: &[u8]) -> io::Result<()> {
        if !self.writers.contains_key(file_stem) {
            let path = self.dir.join(format!("{file_stem}.jsonl"));
            let f = OpenOptions::new().create(true).append(true).open(path)?;
            self.writers.insert(file_stem.to_string(), BufWriter::new(f));
        }
        self.writers
            .get_mut(file_stem)
            .expect("inserted above")
            .write_all(line)
    }
}

/// In-memory log per node, optionally mirrored to disk.
#[derive(Debug, Default)]
pub struct DataStore {
    logs: BTreeMap<String, Vec<Arc<StoredEntry>>>,
    quarantine: Vec<Arc<StoredEntry>>,
    persistence: Option<Persistence>,
    /// Entries older than this (relative to the newest append) are dropped
    /// from memory. Disk logs are never trimmed.
    retention_ms: Option<i64>,
}

impl DataStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persistent(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(DataStore {
            persistence: Some(Persistence {
                dir,
                writers: BTreeMap::new(),
            }),
            ..Self::default()
        })
    }

    pub fn with_retention(mut self, retention_ms: Option<i64>) -> Self {
        self.retention_ms = retention_ms;
        self
    }

    pub fn dir(&self) -> Option<&Path> {
        self.persistence.as_ref().map(|p| p.dir.as_path())
    }

    /// Appends for a known node. Receive times never go backwards per node.
    pub fn append(&mut self, imei: &str, message: Message, now_ms: i64) -> io::Result<Arc<StoredEntry>> {
        let log = self.logs.entry(imei.to_string()).or_default();
        let received_at_ms = log.last().map_or(now_ms, |e| e.received_at_ms.max(now_ms));
        let entry = Arc::new(StoredEntry {
            received_at_ms,
            message,
        });
        log.push(entry.clone());
        if let Some(keep) = self.retention_ms {
            let cutoff = received_at_ms - keep;
            let drop = log.partition_point(|e| e.received_at_ms < cutoff);
            log.drain(..drop);
        }
        if let Some(p) = self.persistence.as_mut() {
            let line = log_line(&entry).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            p.append(imei, &line)?;
        }
        Ok(entry)
    }

    pub fn quarantine(&mut self, message: Message, now_ms: i64) -> io::Result<()> {
        let entry = Arc::new(StoredEntry {
            received_at_ms: now_ms,
            message,
        });
        if let Some(p) = self.persistence.as_mut() {
            let line = log_line(&entry).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            p.append("quarantine", &line)?;
        }
        self.quarantine.push(entry);
        Ok(())
    }

    pub fn entries(&self, imei: &str) -> &[Arc<StoredEntry>] {
        self.logs.get(imei).map_or(&[], Vec::as_slice)
    }

    pub fn quarantined(&self) -> &[Arc<StoredEntry>] {
        &self.quarantine
    }

    /// Entries received at or after `since_ms`, per node.
    pub fn recent(&self, since_ms: i64) -> BTreeMap<String, Vec<Arc<StoredEntry>>> {
        self.logs
            .iter()
            .map(|(imei, log)| {
                let from = log.partition_point(|e| e.received_at_ms < since_ms);
                (imei.clone(), log[from..].to_vec())
            })
            .collect()
    }

    pub fn all(&self) -> &BTreeMap<String, Vec<Arc<StoredEntry>>> {
        &self.logs
    }

    pub fn flush(&mut self) -> io::Result<()> {
        if let Some(p) = self.persistence.as_mut() {
            for w in p.writers.values_mut() {
                w.flush()?;
            }
        }
        Ok(())
    }
}

impl Drop for Persistence {
    fn drop(&mut self) {
        for w in self.writers.values_mut() {
            if let Err(e) = w.flush() {
                tracing::error!(error = %e, "failed to flush data log");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{ImageDataMsg, SensorDataMsg};

    fn image(imei: &str) -> Message {
        ImageDataMsg {
            imei: imei.into(),
            latitude: 28.5,
            longitude: 77.2,
            encoded_image_string: "aGVsbG8=".into(),
        }
        .into()
    }

    #[test]
    fn append_keeps_order_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = DataStore::persistent(dir.path()).unwrap();
        store.append("a", image("a"), 10).unwrap();
        store
            .append("a", SensorDataMsg::end_marker("a", 28.5, 77.2).into(), 5)
            .unwrap();
        store.quarantine(image("ghost"), 12).unwrap();
        store.flush().unwrap();
        let times: Vec<i64> = store.entries("a").iter().map(|e| e.received_at_ms).collect();
        assert_eq!(times, [10, 10]);

        let back = read_log(&dir.path().join("a.jsonl")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].message, image("a"));
        let q = read_log(&dir.path().join(QUARANTINE_FILE)).unwrap();
        assert_eq!(q[0].message.imei(), Some("ghost"));
    }

    #[test]
    fn torn_tail_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut store = DataStore::persistent(dir.path()).unwrap();
            store.append("a", image("a"), 1).unwrap();
        }
        let path = dir.path().join("a.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"receivedAt\":2,\"frame\":{\"imei\"").unwrap();
        assert_eq!(read_log(&path).unwrap().len(), 1);
    }

    #[test]
    fn retention_trims_memory() {
        let mut store = DataStore::in_memory().with_retention(Some(100));
        for t in [0, 50, 120, 200] {
            store.append("a", image("a"), t).unwrap();
        }
        let times: Vec<i64> = store.entries("a").iter().map(|e| e.received_at_ms).collect();
        assert_eq!(times, [120, 200]);
        assert_eq!(store.recent(150).get("a").unwrap().len(), 1);
    }
}
