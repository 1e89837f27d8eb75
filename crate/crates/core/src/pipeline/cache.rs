//! Append-only cache file of resolved intents.
//!
//! Layout: the first line is a JSON [`CacheHeader`]; every following line is
//! one JSON [`CacheRecord`]. Later records for a key supersede earlier ones.
//! A final line without a trailing newline is a torn write and is dropped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::normalize_text;
use crate::disambiguation::ResolvedIntent;
use crate::reasoner::EvidenceBundle;

pub const CACHE_FORMAT: &str = "groundintent-cache";
pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt cache {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("cache {path} was written by pipeline {found}, expected {expected}")]
    VersionMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("cache is read-only")]
    ReadOnly,
    #[error("cache lock poisoned")]
    Poisoned,
    #[error("cache serialization: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheHeader {
    pub format: String,
    pub format_version: u32,
    pub pipeline_version: String,
    pub store_version: String,
}

impl CacheHeader {
    pub fn new(pipeline_version: impl Into<String>, store_version: impl Into<String>) -> Self {
        Self {
            format: CACHE_FORMAT.to_string(),
            format_version: CACHE_FORMAT_VERSION,
            pipeline_version: pipeline_version.into(),
            store_version: store_version.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub resolved: ResolvedIntent,
    pub evidence_digest: String,
    pub pipeline_version: String,
    pub created_at: DateTime<Utc>,
    pub evidence: EvidenceBundle,
}

impl CacheRecord {
    /// Equal in everything but `created_at`.
    pub fn same_content(&self, other: &CacheRecord) -> bool {
        self.key == other.key
            && self.resolved == other.resolved
            && self.evidence_digest == other.evidence_digest
            && self.pipeline_version == other.pipeline_version
            && self.evidence == other.evidence
    }
}

/// Timestamp-free view of a record used for canonical exports.
#[derive(Serialize)]
struct CanonicalRecord<'a> {
    key: &'a str,
    resolved: &'a ResolvedIntent,
    evidence_digest: &'a str,
    pipeline_version: &'a str,
    evidence: &'a EvidenceBundle,
}

/// Destination for batch results. Writers of distinct keys may run concurrently.
pub trait RecordSink: Sync {
    /// Stores `record`; returns `false` when an identical record already existed.
    fn put(&self, record: CacheRecord) -> Result<bool, CacheError>;
}

#[derive(Debug)]
pub struct CacheStore {
    path: Option<PathBuf>,
    header: CacheHeader,
    records: RwLock<BTreeMap<String, CacheRecord>>,
    writer: Option<Mutex<File>>,
}

impl CacheStore {
    pub fn in_memory(header: CacheHeader) -> Self {
        Self {
            path: None,
            header,
            records: RwLock::new(BTreeMap::new()),
            writer: None,
        }
    }

    /// Opens `path` for appending, creating it with `header` if absent.
    /// An existing file must carry the same pipeline version.
    pub fn create_or_open(path: impl AsRef<Path>, header: CacheHeader) -> Result<Self, CacheError> {
        let path = path.as_ref();
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        let records = if exists {
            let (found, records, valid_len) = read_file(path, &file)?;
            if found.pipeline_version != header.pipeline_version {
                return Err(CacheError::VersionMismatch {
                    path: path.display().to_string(),
                    found: found.pipeline_version,
                    expected: header.pipeline_version,
                });
            }
            file.set_len(valid_len)?;
            records
        } else {
            let mut line = serde_json::to_vec(&header)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.sync_data()?;
            BTreeMap::new()
        };
        file.seek(SeekFrom::End(0))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            header,
            records: RwLock::new(records),
            writer: Some(Mutex::new(file)),
        })
    }

    pub fn open_read_only(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let (header, records, _) = read_file(path, &file)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            header,
            records: RwLock::new(records),
            writer: None,
        })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.read().map(|r| r.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lookup by already-normalized key. Records from another pipeline
    /// version are treated as misses.
    pub fn get_key(&self, key: &str) -> Result<Option<CacheRecord>, CacheError> {
        let records = self.records.read().map_err(|_| CacheError::Poisoned)?;
        Ok(records
            .get(key)
            .filter(|r| r.pipeline_version == self.header.pipeline_version)
            .cloned())
    }

    /// All records in key order.
    pub fn records(&self) -> Result<Vec<CacheRecord>, CacheError> {
        let records = self.records.read().map_err(|_| CacheError::Poisoned)?;
        Ok(records.values().cloned().collect())
    }

    /// Line-delimited JSON of every record, in key order.
    pub fn export_jsonl<W: Write>(&self, mut w: W) -> Result<(), CacheError> {
        for r in self.records()? {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Header plus records in key order without timestamps; byte-stable for
    /// identical content.
    pub fn canonical_export(&self) -> Result<Vec<u8>, CacheError> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        let records = self.records.read().map_err(|_| CacheError::Poisoned)?;
        for r in records.values() {
            let view = CanonicalRecord {
                key: &r.key,
                resolved: &r.resolved,
                evidence_digest: &r.evidence_digest,
                pipeline_version: &r.pipeline_version,
                evidence: &r.evidence,
            };
            serde_json::to_writer(&mut out, &view)?;
            out.push(b'\n');
        }
        Ok(out)
    }
}

impl RecordSink for CacheStore {
    fn put(&self, record: CacheRecord) -> Result<bool, CacheError> {
        if record.pipeline_version != self.header.pipeline_version {
            return Err(CacheError::VersionMismatch {
                path: self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                found: record.pipeline_version,
                expected: self.header.pipeline_version.clone(),
            });
        }
        if let Some(existing) = self.records.read().map_err(|_| CacheError::Poisoned)?.get(&record.key) {
            if existing.same_content(&record) {
                return Ok(false);
            }
        }
        match (&self.writer, &self.path) {
            (Some(writer), _) => {
                let mut line = serde_json::to_vec(&record)?;
                line.push(b'\n');
                let mut file = writer.lock().map_err(|_| CacheError::Poisoned)?;
                file.write_all(&line)?;
                file.flush()?;
            }
            (None, Some(_)) => return Err(CacheError::ReadOnly),
            (None, None) => {}
        }
        self.records
            .write()
            .map_err(|_| CacheError::Poisoned)?
            .insert(record.key.clone(), record);
        Ok(true)
    }
}

type Loaded = (CacheHeader, BTreeMap<String, CacheRecord>, u64);

fn read_file(path: &Path, file: &File) -> Result<Loaded, CacheError> {
    let corrupt = |reason: String| CacheError::Corrupt {
        path: path.display().to_string(),
        reason,
    };
    let mut reader = BufReader::new(file.try_clone()?);
    reader.seek(SeekFrom::Start(0))?;
    let mut line = String::new();
    let mut offset: u64 = 0;

    let n = reader.read_line(&mut line)?;
    if n == 0 || !line.ends_with('\n') {
        return Err(corrupt("missing header".into()));
    }
    let header: CacheHeader = serde_json::from_str(&line).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format != CACHE_FORMAT || header.format_version != CACHE_FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format {:?} v{}",
            header.format, header.format_version
        )));
    }
    offset += n as u64;

    let mut records = BTreeMap::new();
    let mut line_no = 1;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !line.ends_with('\n') {
            log::warn!("{}: dropping torn record at line {line_no}", path.display());
            break;
        }
        let record: CacheRecord =
            serde_json::from_str(&line).map_err(|e| corrupt(format!("line {line_no}: {e}")))?;
        if record.pipeline_version != header.pipeline_version {
            return Err(corrupt(format!("line {line_no}: record from pipeline {}", record.pipeline_version)));
        }
        if record.key != normalize_text(&record.key) {
            return Err(corrupt(format!("line {line_no}: key {:?} is not normalized", record.key)));
        }
        offset += n as u64;
        records.insert(record.key.clone(), record);
    }
    Ok((header, records, offset))
}

/// Looks up a raw query by its normalized form.
pub fn cache_get(cache: &CacheStore, raw: &str) -> Result<Option<CacheRecord>, CacheError> {
    cache.get_key(&normalize_text(raw))
}
