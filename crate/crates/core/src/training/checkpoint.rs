//! Binary checkpoint: `UMCLCKPT | u32 version | u64 header_len | JSON header
//! | little-endian f64 body | SHA-256 of everything before it`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, TrainConfig};
use crate::encoders::{Encoders, ParameterStore};
use crate::error::{Error, Result};
use crate::prompt::{DiscreteTemplateRegistry, PromptAssembler, Vocabulary};

const MAGIC: &[u8; 8] = b"UMCLCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to replay evaluation bit-for-bit or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub class_names: Vec<String>,
    pub templates: Vec<Vec<String>>,
    pub step: u64,
    pub encoders: Encoders,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    vocab: Vocabulary,
    class_names: Vec<String>,
    templates: Vec<Vec<String>>,
    step: u64,
    tensors: Vec<TensorEntry>,
    /// Tensor data, then Adam first moments, then second moments.
    body_values: usize,
}

impl Checkpoint {
    pub fn registry(&self) -> Result<DiscreteTemplateRegistry> {
        DiscreteTemplateRegistry::new(self.class_names.clone(), self.templates.clone())
    }

    pub fn assembler(&self) -> Result<PromptAssembler> {
        PromptAssembler::new(self.vocab, self.registry()?, self.config.context_len)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Refuses a checkpoint whose architecture differs from `config`.
    pub fn check_compatible(&self, config: &TrainConfig) -> Result<()> {
        let a = &self.config;
        let pairs = [
            ("num_classes", a.num_classes, config.num_classes),
            ("context_len", a.context_len, config.context_len),
            ("embed_dim", a.embed_dim, config.embed_dim),
            ("image_dim", a.image_dim, config.image_dim),
            ("token_dim", a.token_dim, config.token_dim),
            ("hidden_dim", a.hidden_dim, config.hidden_dim),
            ("vocab_size", a.vocab_size, config.vocab_size),
            ("max_len", a.max_len, config.max_len),
        ];
        for (key, have, want) in pairs {
            if have != want {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has {key}={have}, config expects {want}"
                )));
            }
        }
        if a.vocab_seed != config.vocab_seed {
            return Err(Error::Checkpoint("vocabulary hash seed differs".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.encoders.store;
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab,
            class_names: self.class_names.clone(),
            templates: self.templates.clone(),
            step: self.step,
            tensors: store
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            body_values: 3 * store.num_values(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * 3 * store.num_values() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let values = store
            .iter()
            .flat_map(|p| p.value.iter())
            .chain(self.adam.m.iter().flatten())
            .chain(self.adam.v.iter().flatten());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("file is truncated".into());
        if bytes.len() < 20 + 32 {
            return Err(truncated());
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(header_len).ok_or_else(truncated)?;
        if bytes.len() < header_end + 32 {
            return Err(truncated());
        }
        let header: std::result::Result<Header, _> = serde_json::from_slice(&bytes[20..header_end]);
        let body_end = match &header {
            Ok(h) => header_end + 8 * h.body_values,
            Err(_) => bytes.len() - 32,
        };
        if bytes.len() < body_end + 32 {
            return Err(truncated());
        }
        let expected = hex::encode(&bytes[body_end..body_end + 32]);
        let found = hex::encode(Sha256::digest(&bytes[..body_end]));
        if expected != found || bytes.len() != body_end + 32 {
            return Err(Error::Checksum { expected, found });
        }
        let header = header?;

        let mut values = bytes[header_end..body_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let mut store = ParameterStore::new();
        for t in &header.tensors {
            let n = t.shape.iter().product();
            store.register(t.name.clone(), t.shape.clone(), take(n))?;
        }
        let sizes: Vec<usize> = store.iter().map(|p| p.numel()).collect();
        let m = sizes.iter().map(|&n| take(n)).collect();
        let v = sizes.iter().map(|&n| take(n)).collect();
        let encoders = Encoders::from_store(header.config.encoder_config(), store)?;
        Ok(Self {
            config: header.config,
            vocab: header.vocab,
            class_names: header.class_names,
            templates: header.templates,
            step: header.step,
            encoders,
            adam: AdamState { m, v },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the architecture against `config`.
    pub fn load_for(path: impl AsRef<Path>, config: &TrainConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.check_compatible(config)?;
        Ok(ckpt)
    }
}
