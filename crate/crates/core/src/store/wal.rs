//! On-disk formats: the append-only log, state snapshots and the manifest.
//!
//! Log layout: an 8-byte magic header followed by records, each
//! `len: u32 LE | crc32: u32 LE | payload: JSON`. A transaction is the run of
//! records up to and including its `TXN_COMMIT`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::state::{Message, MessageId, SliceStamp};
use crate::expr::Atomic;
use crate::lang::{QueueKind, QueueMode};
use crate::xml::parse_document;

pub const LOG_MAGIC: &[u8; 8] = b"QFLOWLG1";
pub const SNAPSHOT_MAGIC: &str = "QFLOWSN1";
pub const MANIFEST_MAGIC: &str = "QFLOWMF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMessage {
    pub id: MessageId,
    pub seq: u64,
    pub queue: String,
    pub body: String,
    pub props: BTreeMap<String, Atomic>,
    pub created_at: DateTime<Utc>,
    pub creating_rule: Option<String>,
    pub slice_stamps: BTreeMap<String, SliceStamp>,
}

impl StoredMessage {
    pub fn from_message(m: &Message) -> Self {
        StoredMessage {
            id: m.id,
            seq: m.seq,
            queue: m.queue.clone(),
            body: m.document().to_xml(),
            props: m.props.clone(),
            created_at: m.created_at,
            creating_rule: m.creating_rule.clone(),
            slice_stamps: m.slice_stamps.clone(),
        }
    }

    pub fn into_message(self) -> Result<Message, String> {
        let body = parse_document(&self.body).map_err(|e| format!("message {}: {e}", self.id))?;
        Ok(Message {
            id: self.id,
            seq: self.seq,
            queue: self.queue,
            body,
            props: self.props,
            created_at: self.created_at,
            creating_rule: self.creating_rule,
            slice_stamps: self.slice_stamps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum WalRecord {
    #[serde(rename = "ENQUEUE")]
    Enqueue { message: StoredMessage },
    #[serde(rename = "MARK_PROCESSED")]
    MarkProcessed { id: MessageId },
    #[serde(rename = "RESET")]
    Reset {
        slicing: String,
        key: String,
        generation: u64,
    },
    #[serde(rename = "REMOVE")]
    Remove { id: MessageId },
    #[serde(rename = "TXN_COMMIT")]
    Commit { version: u64, next_id: u64 },
}

pub struct CommittedTxn {
    pub version: u64,
    pub next_id: u64,
    pub records: Vec<WalRecord>,
}

pub struct LogContents {
    pub txns: Vec<CommittedTxn>,
    /// Byte length of the prefix ending with the last complete commit.
    pub valid_len: u64,
}

pub fn log_path(dir: &Path) -> PathBuf {
    dir.join("log")
}

/// Reads all committed transactions. A torn or corrupt tail ends the scan.
pub fn read_log(path: &Path) -> io::Result<Option<LogContents>> {
    let mut data = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut data)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e),
    }
    if data.is_empty() {
        return Ok(Some(LogContents {
            txns: Vec::new(),
            valid_len: 0,
        }));
    }
    if data.len() < LOG_MAGIC.len() {
        // A crash while writing the header itself.
        if LOG_MAGIC.starts_with(&data) {
            return Ok(Some(LogContents {
                txns: Vec::new(),
                valid_len: 0,
            }));
        }
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad log header"));
    }
    if &data[..8] != LOG_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad log header"));
    }
    let mut pos = 8usize;
    let mut valid_len = 8u64;
    let mut txns = Vec::new();
    let mut pending = Vec::new();
    while pos + 8 <= data.len() {
        let len = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(data[pos + 4..pos + 8].try_into().unwrap());
        let start = pos + 8;
        let Some(payload) = data.get(start..start + len) else {
            break;
        };
        if crc32fast::hash(payload) != crc {
            break;
        }
        let Ok(record) = serde_json::from_slice::<WalRecord>(payload) else {
            break;
        };
        pos = start + len;
        if let WalRecord::Commit { version, next_id } = record {
            txns.push(CommittedTxn {
                version,
                next_id,
                records: std::mem::take(&mut pending),
            });
            valid_len = pos as u64;
        } else {
            pending.push(record);
        }
    }
    Ok(Some(LogContents {
        txns,
        valid_len,
    }))
}

pub fn encode_records(records: &[WalRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in records {
        let payload = serde_json::to_vec(r).expect("log records serialize");
        buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        buf.extend_from_slice(&payload);
    }
    buf
}

/// Appends transactions to the log. An optional byte budget simulates a
/// crash: once exhausted, the write stops part-way and fails.
pub struct WalWriter {
    file: File,
    sync: bool,
    budget: Option<u64>,
}

impl WalWriter {
    /// Opens the log for appending, truncating anything after `valid_len`
    /// and writing the header if the file is new.
    pub fn open(path: &Path, valid_len: u64, sync: bool, budget: Option<u64>) -> io::Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        if valid_len < LOG_MAGIC.len() as u64 {
            file.set_len(0)?;
            file.write_all(LOG_MAGIC)?;
        } else {
            file.set_len(valid_len)?;
        }
        file.seek(SeekFrom::End(0))?;
        file.sync_all()?;
        Ok(WalWriter { file, sync, budget })
    }

    pub fn append(&mut self, records: &[WalRecord]) -> io::Result<()> {
        let buf = encode_records(records);
        if let Some(budget) = self.budget.as_mut() {
            if (buf.len() as u64) > *budget {
                let cut = *budget as usize;
                *budget = 0;
                self.file.write_all(&buf[..cut])?;
                self.file.flush()?;
                return Err(io::Error::other("injected crash while writing the log"));
            }
            *budget -= buf.len() as u64;
        }
        self.file.write_all(&buf)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    /// Empties the log after a snapshot made its contents redundant.
    pub fn reset(&mut self) -> io::Result<()> {
        self.file.set_len(0)?;
        self.file.seek(SeekFrom::Start(0))?;
        self.file.write_all(LOG_MAGIC)?;
        self.file.sync_all()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SnapshotFile {
    pub version: u64,
    pub next_id: u64,
    pub next_seq: u64,
    pub messages: Vec<StoredMessage>,
    pub processed: Vec<MessageId>,
    pub generations: Vec<(String, String, u64)>,
}

fn snapshot_versions(dir: &Path) -> io::Result<Vec<u64>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix("snapshot.") {
            if let Ok(v) = n.parse::<u64>() {
                out.push(v);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Loads the newest readable snapshot, if any.
pub fn read_latest_snapshot(dir: &Path) -> io::Result<Option<SnapshotFile>> {
    for v in snapshot_versions(dir)?.into_iter().rev() {
        let text = fs::read_to_string(dir.join(format!("snapshot.{v}")))?;
        if let Some(body) = text.strip_prefix(SNAPSHOT_MAGIC).and_then(|t| t.strip_prefix('\n')) {
            if let Ok(s) = serde_json::from_str::<SnapshotFile>(body) {
                return Ok(Some(s));
            }
        }
    }
    Ok(None)
}

/// Writes `contents` to `dir/name` atomically.
pub fn write_atomically(dir: &Path, name: &str, contents: &[u8]) -> io::Result<()> {
    let tmp = dir.join(format!("{name}.tmp"));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, dir.join(name))?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

pub fn write_snapshot(dir: &Path, snap: &SnapshotFile) -> io::Result<()> {
    let mut text = format!("{SNAPSHOT_MAGIC}\n");
    text.push_str(&serde_json::to_string(snap).map_err(io::Error::other)?);
    write_atomically(dir, &format!("snapshot.{}", snap.version), text.as_bytes())?;
    for v in snapshot_versions(dir)? {
        if v < snap.version {
            let _ = fs::remove_file(dir.join(format!("snapshot.{v}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestQueue {
    pub name: String,
    pub kind: QueueKind,
    pub mode: QueueMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub application: String,
    pub queues: Vec<ManifestQueue>,
    pub slicings: Vec<(String, String)>,
}

pub fn read_manifest(dir: &Path) -> io::Result<Option<Manifest>> {
    let text = match fs::read_to_string(dir.join("MANIFEST")) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e),
    };
    let body = text
        .strip_prefix(MANIFEST_MAGIC)
        .and_then(|t| t.strip_prefix('\n'))
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad manifest header"))?;
    serde_json::from_str(body)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> io::Result<()> {
    let mut text = format!("{MANIFEST_MAGIC}\n");
    text.push_str(&serde_json::to_string_pretty(m).map_err(io::Error::other)?);
    text.push('\n');
    write_atomically(dir, "MANIFEST", text.as_bytes())
}

pub(crate) fn message_from_stored(s: StoredMessage) -> Result<Arc<Message>, String> {
    s.into_message().map(Arc::new)
}
