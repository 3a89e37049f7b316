//! Exact cosine-similarity index over table representations, with a
//! checksummed binary file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "STARIDX\0"
//! version    u32
//! dim        u32
//! count      u64
//! created    u64      unix seconds
//! fp_len     u16, fingerprint UTF-8 bytes
//! checksum   u32      CRC-32 of the record region
//! records    count × (u32 id_len, id UTF-8, dim × f32)
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{check_dims, Embedding};
use crate::error::{Error, Result};
use crate::fusion::TableRepresentation;

pub const INDEX_MAGIC: &[u8; 8] = b"STARIDX\0";
pub const INDEX_VERSION: u32 = 1;

/// Entry count above which [`Index::search`] shards the scan across threads.
const PARALLEL_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub table_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.table_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    dim: usize,
    fingerprint: String,
    created_at: u64,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    seen: HashSet<String>,
}

impl Index {
    pub fn new(dim: usize, fingerprint: impl Into<String>) -> Self {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            dim,
            fingerprint: fingerprint.into(),
            created_at,
            ids: Vec::new(),
            vectors: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn created_at(&self) -> u64 {
        self.created_at
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.vectors.iter().map(Vec::as_slice))
    }

    pub fn add(&mut self, rep: &TableRepresentation) -> Result<()> {
        if rep.fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                got: rep.fingerprint.clone(),
            });
        }
        self.add_vector(&rep.table_id, &rep.embedding)
    }

    /// Adds a vector without a fingerprint check.
    pub fn add_vector(&mut self, table_id: &str, embedding: &Embedding) -> Result<()> {
        check_dims(self.dim, embedding.dim())?;
        if self.seen.contains(table_id) {
            return Err(Error::DuplicateId(table_id.to_string()));
        }
        self.seen.insert(table_id.to_string());
        self.ids.push(table_id.to_string());
        self.vectors
            .push(embedding.as_slice().iter().map(|&v| v as f32).collect());
        Ok(())
    }

    fn score(&self, i: usize, query: &[f64]) -> f64 {
        let s: f64 = self.vectors[i]
            .iter()
            .zip(query)
            .map(|(&v, &q)| v as f64 * q)
            .sum();
        s.clamp(-1.0, 1.0)
    }

    fn check_query(&self, query: &Embedding, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        check_dims(self.dim, query.dim())
    }

    fn top_k(&self, range: std::ops::Range<usize>, query: &[f64], k: usize) -> Vec<(f64, usize)> {
        let mut scored: Vec<(f64, usize)> = range.map(|i| (self.score(i, query), i)).collect();
        scored.sort_by(|a, b| self.rank_order(a, b));
        scored.truncate(k);
        scored
    }

    // Descending score, then ascending table id.
    fn rank_order(&self, a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
        b.0.total_cmp(&a.0)
            .then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
    }

    fn to_result(&self, top: Vec<(f64, usize)>) -> SearchResult {
        SearchResult {
            query: None,
            hits: top
                .into_iter()
                .map(|(score, i)| Hit {
                    table_id: self.ids[i].clone(),
                    score,
                })
                .collect(),
        }
    }

    /// Single-threaded exact scan.
    pub fn search_sequential(&self, query: &Embedding, k: usize) -> Result<SearchResult> {
        self.check_query(query, k)?;
        Ok(self.to_result(self.top_k(0..self.len(), query.as_slice(), k)))
    }

    /// Scan sharded into `shard` sized pieces, merged deterministically.
    pub fn search_sharded(
        &self,
        query: &Embedding,
        k: usize,
        shard: usize,
    ) -> Result<SearchResult> {
        self.check_query(query, k)?;
        let shard = shard.max(1);
        let starts: Vec<usize> = (0..self.len()).step_by(shard).collect();
        let mut merged: Vec<(f64, usize)> = starts
            .par_iter()
            .flat_map_iter(|&s| self.top_k(s..(s + shard).min(self.len()), query.as_slice(), k))
            .collect();
        merged.sort_by(|a, b| self.rank_order(a, b));
        merged.truncate(k);
        Ok(self.to_result(merged))
    }

    /// Top-`k` entries by cosine similarity; equal scores are ordered by
    /// table id.
    pub fn search(&self, query: &Embedding, k: usize) -> Result<SearchResult> {
        if self.len() > PARALLEL_THRESHOLD {
            let shard = self.len().div_ceil(rayon::current_num_threads().max(1));
            self.search_sharded(query, k, shard)
        } else {
            self.search_sequential(query, k)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records = Vec::with_capacity(self.len() * (self.dim * 4 + 16));
        for (id, v) in self.entries() {
            records.extend_from_slice(&(id.len() as u32).to_le_bytes());
            records.extend_from_slice(id.as_bytes());
            for x in v {
                records.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(records.len() + 64);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.created_at.to_le_bytes());
        out.extend_from_slice(&(self.fingerprint.len() as u16).to_le_bytes());
        out.extend_from_slice(self.fingerprint.as_bytes());
        out.extend_from_slice(&crc32fast::hash(&records).to_le_bytes());
        out.extend_from_slice(&records);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != INDEX_MAGIC {
            return Err(Error::CorruptIndex("bad magic".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Version {
                found: version,
                supported: INDEX_VERSION,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let created_at = r.u64()?;
        let fp_len = r.u16()? as usize;
        let fingerprint = String::from_utf8(r.take(fp_len)?.to_vec())
            .map_err(|_| Error::CorruptIndex("fingerprint is not UTF-8".into()))?;
        let checksum = r.u32()?;
        let records = &bytes[r.pos..];
        if crc32fast::hash(records) != checksum {
            return Err(Error::CorruptIndex("checksum mismatch".into()));
        }
        let mut index = Index {
            dim,
            fingerprint,
            created_at,
            ids: Vec::with_capacity(count),
            vectors: Vec::with_capacity(count),
            seen: HashSet::with_capacity(count),
        };
        for _ in 0..count {
            let id_len = r.u32()? as usize;
            let id = String::from_utf8(r.take(id_len)?.to_vec())
                .map_err(|_| Error::CorruptIndex("table id is not UTF-8".into()))?;
            let raw = r.take(dim * 4)?;
            let v: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if !index.seen.insert(id.clone()) {
                return Err(Error::CorruptIndex(format!("duplicate id `{id}`")));
            }
            index.ids.push(id);
            index.vectors.push(v);
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptIndex("trailing bytes after records".into()));
        }
        Ok(index)
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptIndex(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalize(v.to_vec()).unwrap()
    }

    fn two_axis() -> Index {
        let mut idx = Index::new(2, "fp");
        idx.add_vector("A", &unit(&[1.0, 0.0])).unwrap();
        idx.add_vector("B", &unit(&[0.0, 1.0])).unwrap();
        idx
    }

    #[test]
    fn basic_search() {
        let idx = two_axis();
        let r = idx.search(&unit(&[1.0, 0.0]), 1).unwrap();
        assert_eq!(r.ids(), vec!["A"]);
        assert!((r.hits[0].score - 1.0).abs() < 1e-6);
        let r = idx.search(&unit(&[1.0, 0.0]), 5).unwrap();
        assert_eq!(r.ids(), vec!["A", "B"]);
        assert_eq!(r.hits[1].score, 0.0);
    }

    #[test]
    fn ties_by_id() {
        let mut idx = Index::new(2, "fp");
        idx.add_vector("b", &unit(&[1.0, 1.0])).unwrap();
        idx.add_vector("a", &unit(&[1.0, 1.0])).unwrap();
        assert_eq!(
            idx.search(&unit(&[1.0, 0.0]), 2).unwrap().ids(),
            vec!["a", "b"]
        );
    }

    #[test]
    fn add_errors() {
        let mut idx = two_axis();
        assert!(matches!(
            idx.add_vector("A", &unit(&[1.0, 0.0])),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(
            idx.add_vector("C", &unit(&[1.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            Index::new(2, "fp").search(&unit(&[1.0, 0.0]), 1),
            Err(Error::EmptyIndex)
        ));
    }

    #[test]
    fn byte_round_trip_and_corruption() {
        let idx = two_axis();
        let bytes = idx.to_bytes();
        assert_eq!(Index::from_bytes(&bytes).unwrap(), idx);

        assert!(matches!(
            Index::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::CorruptIndex(_))
        ));
        assert!(matches!(
            Index::from_bytes(&bytes[..10]),
            Err(Error::CorruptIndex(_))
        ));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(
            Index::from_bytes(&flipped),
            Err(Error::CorruptIndex(_))
        ));

        let mut future = bytes.clone();
        future[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Index::from_bytes(&future),
            Err(Error::Version {
                found: 2,
                supported: 1
            })
        ));
    }
}
