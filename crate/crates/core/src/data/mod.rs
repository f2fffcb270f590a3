//! Samples, multi-hot labels and datasets for the two training sources.

mod batch;
mod io;
mod synth;

pub use batch::{Batch, BatchSampler, SamplingPolicy};
pub use io::{load_dataset, load_eval_set, write_dataset, write_eval_set};
pub use synth::{generate_synthetic, GroundTruth, SynthConfig, SyntheticCorpus};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{TokenSequence, Vocabulary};

/// Fixed-width multi-hot disease vector with at least one bit set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiHotLabel {
    bits: Vec<bool>,
}

impl MultiHotLabel {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidLabel("label has zero width".into()));
        }
        if !bits.iter().any(|b| *b) {
            return Err(Error::InvalidLabel(
                "all-zero label; encode \"no finding\" as its own class bit".into(),
            ));
        }
        Ok(Self { bits })
    }

    pub fn from_classes(width: usize, classes: &[usize]) -> Result<Self> {
        let mut bits = vec![false; width];
        for &c in classes {
            if c >= width {
                return Err(Error::InvalidLabel(format!(
                    "class {c} out of range for width {width}"
                )));
            }
            bits[c] = true;
        }
        Self::new(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|b| if *b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Precomputed image feature vector (stands in for the pixel input).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    pub values: Vec<f64>,
}

impl ImageFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image feature entry {i}")));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A raw report string together with its tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub raw: String,
    pub tokens: TokenSequence,
}

impl Caption {
    pub fn new(raw: impl Into<String>, vocab: &Vocabulary) -> Self {
        let raw = raw.into();
        let tokens = vocab.tokenize(&raw);
        Self { raw, tokens }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    ImageText,
    ImageLabel,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::ImageText => "image_text",
            Source::ImageLabel => "image_label",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageFeature,
    pub text: Option<Caption>,
    pub label: Option<MultiHotLabel>,
    pub source: Source,
}

impl Sample {
    pub fn image_text(image: ImageFeature, text: Caption) -> Self {
        Self {
            image,
            text: Some(text),
            label: None,
            source: Source::ImageText,
        }
    }

    pub fn image_label(image: ImageFeature, label: MultiHotLabel) -> Self {
        Self {
            image,
            text: None,
            label: Some(label),
            source: Source::ImageLabel,
        }
    }
}

/// Shape information every ingested sample is validated against.
#[derive(Debug, Clone, Copy)]
pub struct DataSpec {
    pub num_classes: usize,
    pub image_dim: usize,
    pub vocab: Vocabulary,
}

/// An immutable, single-source collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub source: Source,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(source: Source, samples: Vec<Sample>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| s.source != source) {
            return Err(Error::Shape(format!(
                "sample {i} has source {:?} in a {:?} dataset",
                samples[i].source, source
            )));
        }
        Ok(Self { source, samples })
    }

    pub fn empty(source: Source) -> Self {
        Self {
            source,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// The two pre-training sources.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub image_text: Dataset,
    pub image_label: Dataset,
}

impl DatasetPair {
    pub fn new(image_text: Dataset, image_label: Dataset) -> Result<Self> {
        if image_text.source != Source::ImageText || image_label.source != Source::ImageLabel {
            return Err(Error::Shape("dataset pair sources swapped".into()));
        }
        Ok(Self {
            image_text,
            image_label,
        })
    }

    pub fn get(&self, source: Source) -> &Dataset {
        match source {
            Source::ImageText => &self.image_text,
            Source::ImageLabel => &self.image_label,
        }
    }
}

/// Single-label evaluation record (CheXpert-5x200 style).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub image: ImageFeature,
    pub class_id: usize,
    pub text: Option<Caption>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSet {
    pub samples: Vec<EvalSample>,
}

impl EvalSet {
    pub fn has_texts(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.text.is_some())
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_id).collect()
    }
}
