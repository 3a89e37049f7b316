use sha2::{Digest, Sha256};

use super::EncoderBackend;
use crate::embedding::Embedding;
use crate::error::{Error, Result};

pub const MIN_REFERENCE_DIM: usize = 8;

/// Offline encoder: signed feature hashing of lowercased character
/// 3-grams. A pure function of `(text, dim, seed)`.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    dim: usize,
    seed: u64,
}

impl ReferenceEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < MIN_REFERENCE_DIM {
            return Err(Error::Config(format!(
                "reference encoder dim must be >= {MIN_REFERENCE_DIM}, got {dim}"
            )));
        }
        Ok(Self { dim, seed })
    }

    /// Unnormalized hashed counts.
    pub fn raw_features(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut out = vec![0.0; self.dim];
        let mut gram = String::with_capacity(12);
        if chars.len() < 3 {
            gram.extend(chars.iter());
            self.accumulate(&gram, &mut out);
        } else {
            for window in chars.windows(3) {
                gram.clear();
                gram.extend(window.iter());
                self.accumulate(&gram, &mut out);
            }
        }
        if out.iter().all(|v| *v == 0.0) {
            // Signed collisions cancelled every gram; fall back to the whole text.
            self.accumulate(&chars.iter().collect::<String>(), &mut out);
        }
        Ok(out)
    }

    /// Hashed features scaled to unit length.
    pub fn embed(&self, text: &str) -> Result<Embedding> {
        Embedding::normalize(self.raw_features(text)?)
    }

    /// Bucket and sign a gram hashes to.
    pub fn slot(&self, gram: &str) -> (usize, f64) {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(gram.as_bytes());
        let digest = hasher.finalize();
        let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        ((h % self.dim as u64) as usize, sign)
    }

    fn accumulate(&self, gram: &str, out: &mut [f64]) {
        let (bucket, sign) = self.slot(gram);
        out[bucket] += sign;
    }
}

impl EncoderBackend for ReferenceEncoder {
    fn id(&self) -> String {
        format!("reference-char3-d{}-seed{}", self.dim, self.seed)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| self.raw_features(t)).collect()
    }
}
