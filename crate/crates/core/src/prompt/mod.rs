//! Text inputs: hashed tokenizer, discrete templates and continuous prompt
//! assembly.
//!
//! A label prompt is laid out as `[V_1 .. V_M][class tokens][template tokens]`
//! where `V_m` are rows of the shared learnable bank. Assembly only records
//! *where* each position comes from ([`Slot`]); the encoder looks the vectors
//! up in the parameter store, which is what routes gradients back to the bank.

mod templates;
mod vocab;

pub use templates::{default_class_names, DiscreteTemplateRegistry};
pub use vocab::{split_words, TokenSequence, Vocabulary, DEFAULT_MAX_LEN, PAD_ID, UNKNOWN_ID};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::MultiHotLabel;
use crate::error::{Error, Result};

pub const BANK_INIT_STD: f64 = 0.02;

/// Source of one position in an embedding sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    /// Row `m` of the continuous prompt bank.
    Bank(usize),
    /// Row of the token embedding table.
    Token(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingSequence {
    pub slots: Vec<Slot>,
    /// Content was cut to fit the maximum length.
    pub truncated: bool,
}

impl EmbeddingSequence {
    /// Non-pad tokens of a caption; no bank positions.
    pub fn from_tokens(seq: &TokenSequence) -> Self {
        Self {
            slots: seq.non_pad().map(Slot::Token).collect(),
            truncated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn bank_positions(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Slot::Bank(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Row-major `len x width` matrix of the looked-up vectors.
    pub fn materialize(&self, bank: &[f64], table: &[f64], width: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.slots.len() * width);
        for slot in &self.slots {
            let (src, row) = match *slot {
                Slot::Bank(m) => (bank, m),
                Slot::Token(id) => (table, id as usize),
            };
            out.extend_from_slice(&src[row * width..(row + 1) * width]);
        }
        out
    }
}

/// Gaussian(0, 0.02) initial bank of `len x width`.
pub fn init_bank<R: Rng + ?Sized>(len: usize, width: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, BANK_INIT_STD).unwrap();
    (0..len * width).map(|_| normal.sample(rng)).collect()
}

/// Builds prompt sequences for classes and multi-hot labels.
#[derive(Debug, Clone)]
pub struct PromptAssembler {
    pub vocab: Vocabulary,
    pub registry: DiscreteTemplateRegistry,
    context_len: usize,
}

impl PromptAssembler {
    pub fn new(
        vocab: Vocabulary,
        registry: DiscreteTemplateRegistry,
        context_len: usize,
    ) -> Result<Self> {
        if context_len >= vocab.max_len {
            return Err(Error::Config(format!(
                "context length {context_len} leaves no room for class tokens within {}",
                vocab.max_len
            )));
        }
        Ok(Self {
            vocab,
            registry,
            context_len,
        })
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn num_classes(&self) -> usize {
        self.registry.num_classes()
    }

    pub fn template_count(&self, class_id: usize) -> usize {
        self.registry.templates(class_id).len()
    }

    fn check_class(&self, class_id: usize, template_index: usize) -> Result<()> {
        if class_id >= self.num_classes() {
            return Err(Error::Shape(format!(
                "class {class_id} out of range for {} classes",
                self.num_classes()
            )));
        }
        if template_index >= self.template_count(class_id) {
            return Err(Error::Shape(format!(
                "template {template_index} out of range for class {class_id} ({} templates)",
                self.template_count(class_id)
            )));
        }
        Ok(())
    }

    fn finish(&self, mut slots: Vec<Slot>) -> EmbeddingSequence {
        let max = self.vocab.max_len;
        let truncated = slots.len() > max;
        if truncated {
            log::warn!(
                "prompt of {} positions truncated to {max}; template content dropped",
                slots.len()
            );
            slots.truncate(max);
        }
        EmbeddingSequence { slots, truncated }
    }

    /// `[bank][class name tokens][template tokens]`, truncated to `max_len`.
    pub fn assemble(&self, class_id: usize, template_index: usize) -> Result<EmbeddingSequence> {
        self.check_class(class_id, template_index)?;
        let mut slots: Vec<Slot> = (0..self.context_len).map(Slot::Bank).collect();
        slots.extend(
            self.vocab
                .ids(self.registry.class_name(class_id))
                .into_iter()
                .map(Slot::Token),
        );
        slots.extend(
            self.vocab
                .ids(&self.registry.templates(class_id)[template_index])
                .into_iter()
                .map(Slot::Token),
        );
        Ok(self.finish(slots))
    }

    /// Prompt for a multi-hot label: the bank, then every positive class name,
    /// then one template per positive class. `template_for(class)` picks the
    /// template index. With a single bit set this equals [`Self::assemble`].
    pub fn assemble_label(
        &self,
        label: &MultiHotLabel,
        mut template_for: impl FnMut(usize) -> usize,
    ) -> Result<EmbeddingSequence> {
        if label.width() != self.num_classes() {
            return Err(Error::Shape(format!(
                "label width {} vs {} classes",
                label.width(),
                self.num_classes()
            )));
        }
        let classes = label.classes();
        let picks: Vec<usize> = classes.iter().map(|&c| template_for(c)).collect();
        for (&c, &t) in classes.iter().zip(&picks) {
            self.check_class(c, t)?;
        }
        let mut slots: Vec<Slot> = (0..self.context_len).map(Slot::Bank).collect();
        for &c in &classes {
            slots.extend(
                self.vocab
                    .ids(self.registry.class_name(c))
                    .into_iter()
                    .map(Slot::Token),
            );
        }
        for (&c, &t) in classes.iter().zip(&picks) {
            slots.extend(
                self.vocab
                    .ids(&self.registry.templates(c)[t])
                    .into_iter()
                    .map(Slot::Token),
            );
        }
        Ok(self.finish(slots))
    }

    /// One sequence per template of `class_id`, in template order.
    pub fn class_prompt_set(&self, class_id: usize) -> Result<Vec<EmbeddingSequence>> {
        if class_id >= self.num_classes() {
            return Err(Error::Shape(format!("class {class_id} out of range")));
        }
        (0..self.template_count(class_id))
            .map(|t| self.assemble(class_id, t))
            .collect()
    }
}
