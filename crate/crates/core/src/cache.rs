//! Persistent response cache.
//!
//! The file is an append-only log of records `[u32 len][key 32B][payload]`
//! where `len` is the big-endian byte length of `payload` and the payload is
//! the canonical JSON `{"created_at": <unix seconds>, "response": ...}`.
//! On load, later records for a key replace earlier ones. A truncated final
//! record (e.g. after a crash) is dropped and cut off the file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::canonical::{self, Digest32};
use crate::query::Response;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub created_at: u64,
    pub response: Response,
}

#[derive(Debug)]
pub struct ResponseCache {
    index: RwLock<HashMap<Digest32, CacheEntry>>,
    log: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache { index: RwLock::new(HashMap::new()), log: None, path: None }
    }

    /// Opens (or creates) a cache file and loads its index.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (index, valid_len) = parse_log(&bytes)?;
        if valid_len < bytes.len() {
            log::warn!("dropping {} trailing bytes of a truncated cache record", bytes.len() - valid_len);
            file.set_len(valid_len as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok(ResponseCache {
            index: RwLock::new(index),
            log: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &Digest32) -> Option<Response> {
        self.index.read().expect("cache lock").get(key).map(|e| e.response.clone())
    }

    pub fn entry(&self, key: &Digest32) -> Option<CacheEntry> {
        self.index.read().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores or replaces a response. Persistent caches append a record and
    /// flush before updating the index.
    pub fn put(&self, key: Digest32, response: Response) -> io::Result<()> {
        let entry = CacheEntry { created_at: unix_now(), response };
        if let Some(log) = &self.log {
            let payload = canonical::to_canonical_bytes(&entry);
            let len = u32::try_from(payload.len())
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "cache record too large"))?;
            let mut w = log.lock().expect("cache log lock");
            w.write_all(&len.to_be_bytes())?;
            w.write_all(&key)?;
            w.write_all(&payload)?;
            w.flush()?;
        }
        self.index.write().expect("cache lock").insert(key, entry);
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn parse_log(bytes: &[u8]) -> io::Result<(HashMap<Digest32, CacheEntry>, usize)> {
    let mut index = HashMap::new();
    let mut pos = 0;
    while bytes.len() - pos >= 4 + 32 {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let end = pos + 4 + 32 + len;
        if end > bytes.len() {
            break;
        }
        let key: Digest32 = bytes[pos + 4..pos + 36].try_into().expect("32 bytes");
        let entry: CacheEntry = serde_json::from_slice(&bytes[pos + 36..end]).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("corrupt cache record at byte {pos}: {e}"))
        })?;
        index.insert(key, entry);
        pos = end;
    }
    Ok((index, pos))
}
