use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Embedding;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    vector: Embedding,
}

/// Embedding cache keyed by `(backend id, dim, SHA-256 of text)`, held in
/// memory and optionally mirrored to an append-only JSONL file.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<String, Embedding>>,
    file: Option<(PathBuf, Mutex<BufWriter<File>>)>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a cache file and loads its records. A torn final
    /// line from an interrupted run is skipped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        entries.insert(rec.key, rec.vector);
                    }
                    Err(e) => log::warn!("{}: skipping unreadable cache line: {e}", path.display()),
                }
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some((path.to_path_buf(), Mutex::new(BufWriter::new(file)))),
        })
    }

    pub fn key(backend_id: &str, dim: usize, text: &str) -> String {
        let digest = Sha256::digest(text.as_bytes());
        format!("{backend_id}|{dim}|{}", hex::encode(digest))
    }

    pub fn get(&self, key: &str) -> Option<Embedding> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: String, vector: Embedding) -> Result<()> {
        if let Some((path, writer)) = &self.file {
            let line = serde_json::to_string(&CacheRecord {
                key: key.clone(),
                vector: vector.clone(),
            })
            .expect("cache record serializes");
            let mut w = writer.lock().unwrap();
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        self.entries.write().unwrap().insert(key, vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
