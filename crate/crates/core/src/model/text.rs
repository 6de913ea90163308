//! Frozen text tower: hashed bag-of-tokens features followed by a linear map.

use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::linalg::Matrix;

/// Number of hash buckets in the bag-of-tokens featurizer.
pub const TEXT_BUCKETS: usize = 64;

const HASH_SEED: u64 = 0x6f76_745f_7465_7874;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Lowercased alphanumeric tokens of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Seeded FNV-1a bucket index of a token.
pub fn token_bucket(token: &str, buckets: usize) -> usize {
    let mut h = HASH_SEED;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    (h % buckets as u64) as usize
}

/// Token counts per bucket.
pub fn featurize(text: &str, buckets: usize) -> Result<Vec<f64>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(OvtError::Empty("caption has no tokens"));
    }
    let mut x = vec![0.0; buckets];
    for t in &tokens {
        x[token_bucket(t, buckets)] += 1.0;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    /// `embed_dim × buckets`, never updated.
    pub weight: Matrix,
}

impl TextEncoder {
    pub fn buckets(&self) -> usize {
        self.weight.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn encode(&self, caption: &str) -> Result<Vec<f64>> {
        if caption.trim().is_empty() {
            return Err(OvtError::Empty("caption"));
        }
        let x = featurize(caption, self.buckets())?;
        self.weight.matvec(&x)
    }
}
