use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNKNOWN_ID: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 77;
pub const DEFAULT_VOCAB_SIZE: usize = 4096;

/// Hashed vocabulary: tokens map to `2 + fnv1a(seed, token) mod (size - 2)`.
///
/// Collisions are possible and silent; the seed is persisted in checkpoints
/// so a trained table is always read back with the same token mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub seed: u64,
    pub max_len: usize,
}

/// Fixed-length token ids; pad positions carry [`PAD_ID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn non_pad(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids
            .iter()
            .zip(&self.pad_mask)
            .filter(|(_, pad)| !**pad)
            .map(|(id, _)| *id)
    }

    pub fn len_non_pad(&self) -> usize {
        self.pad_mask.iter().filter(|p| !**p).count()
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            size: DEFAULT_VOCAB_SIZE,
            seed: 0x5eed,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

fn fnv1a(seed: u64, token: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Lowercased maximal alphanumeric runs.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocabulary {
    pub fn new(size: usize, seed: u64, max_len: usize) -> Result<Self> {
        if size <= 2 {
            return Err(Error::Config(format!(
                "vocabulary size must exceed the 2 reserved ids, got {size}"
            )));
        }
        if max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(Self {
            size,
            seed,
            max_len,
        })
    }

    pub fn token_id(&self, word: &str) -> u32 {
        (2 + fnv1a(self.seed, word) % (self.size as u64 - 2)) as u32
    }

    /// Unpadded, untruncated ids for `text`.
    pub fn ids(&self, text: &str) -> Vec<u32> {
        split_words(text).map(|w| self.token_id(&w)).collect()
    }

    /// Truncate to `max_len`, then pad with [`PAD_ID`].
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = self.ids(text);
        ids.truncate(self.max_len);
        let used = ids.len();
        ids.resize(self.max_len, PAD_ID);
        let pad_mask = (0..self.max_len).map(|i| i >= used).collect();
        TokenSequence { ids, pad_mask }
    }

    pub fn validate(&self, seq: &TokenSequence) -> Result<()> {
        for (pos, (&id, &pad)) in seq.ids.iter().zip(&seq.pad_mask).enumerate() {
            if id as usize >= self.size {
                return Err(Error::Shape(format!(
                    "token id {id} at position {pos} outside vocabulary of size {}",
                    self.size
                )));
            }
            if pad && id != PAD_ID {
                return Err(Error::Shape(format!("pad position {pos} carries id {id}")));
            }
        }
        Ok(())
    }
}
