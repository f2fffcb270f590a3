//! Optimization loop: batch, forward, loss, backward, Adam.

mod adam;
mod checkpoint;
mod schedule;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use schedule::{lr_at, warmup_steps};

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    BatchSampler, DataSpec, DatasetPair, ImageFeature, MultiHotLabel, SamplingPolicy, Source,
};
use crate::encoders::{EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::objective::{label_targets, loss_and_backward, pair_targets, LossConfig, LossKind};
use crate::prompt::{DiscreteTemplateRegistry, EmbeddingSequence, PromptAssembler, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Number of continuous prompt vectors `M`.
    pub context_len: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub image_dim: usize,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub vocab_seed: u64,
    pub seed: u64,
    pub loss: LossKind,
    pub symmetric_loss: bool,
    pub temperature: f64,
    pub policy: SamplingPolicy,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let vocab = Vocabulary::default();
        Self {
            steps: 5_000,
            lr: 1e-5,
            warmup_fraction: 0.10,
            batch_size: 32,
            context_len: enc.context_len,
            num_classes: 14,
            embed_dim: enc.embed_dim,
            image_dim: enc.image_dim,
            token_dim: enc.token_dim,
            hidden_dim: enc.hidden_dim,
            vocab_size: vocab.size,
            max_len: vocab.max_len,
            vocab_seed: vocab.seed,
            seed: 0,
            loss: LossKind::Umcl,
            symmetric_loss: false,
            temperature: crate::objective::DEFAULT_TEMPERATURE,
            policy: SamplingPolicy::Proportional,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        let sizes = [
            ("steps", self.steps as usize),
            ("num_classes", self.num_classes),
            ("embed_dim", self.embed_dim),
            ("image_dim", self.image_dim),
            ("token_dim", self.token_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_len", self.max_len),
            ("log_every", self.log_every as usize),
        ];
        if let Some((k, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.context_len >= self.max_len {
            return Err(Error::Config(format!(
                "context_len {} must be below max_len {}",
                self.context_len, self.max_len
            )));
        }
        Vocabulary::new(self.vocab_size, self.vocab_seed, self.max_len)?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            token_dim: self.token_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            image_dim: self.image_dim,
            context_len: self.context_len,
        }
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary {
            size: self.vocab_size,
            seed: self.vocab_seed,
            max_len: self.max_len,
        }
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            num_classes: self.num_classes,
            image_dim: self.image_dim,
            vocab: self.vocab(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            symmetric: self.symmetric_loss,
            temperature: self.temperature,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub source: Source,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,lr,loss,source\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.lr, r.loss, r.source.as_str());
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// A non-finite loss or gradient stopped the run; the checkpoint holds
    /// the parameters after the last successful update.
    Aborted {
        step: u64,
        reason: String,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricsRow>,
    /// Per-step batch losses.
    pub losses: Vec<f64>,
    pub status: RunStatus,
}

/// Derived RNG streams, so sampling and initialization stay independent.
fn stream(seed: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(lane);
    rng
}

fn check_datasets(config: &TrainConfig, datasets: &DatasetPair) -> Result<()> {
    for s in datasets
        .image_text
        .samples
        .iter()
        .chain(&datasets.image_label.samples)
    {
        if s.image.dim() != config.image_dim {
            return Err(Error::Shape(format!(
                "image feature of width {} with image_dim {}",
                s.image.dim(),
                config.image_dim
            )));
        }
        if let Some(l) = &s.label {
            if l.width() != config.num_classes {
                return Err(Error::Shape(format!(
                    "label of width {} with num_classes {}",
                    l.width(),
                    config.num_classes
                )));
            }
        }
    }
    Ok(())
}

/// Runs the full optimization loop. Deterministic in `(config, datasets,
/// registry)`.
pub fn train(
    config: &TrainConfig,
    datasets: &DatasetPair,
    registry: &DiscreteTemplateRegistry,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_datasets(config, datasets)?;
    if registry.num_classes() != config.num_classes {
        return Err(Error::Config(format!(
            "template registry has {} classes, config {}",
            registry.num_classes(),
            config.num_classes
        )));
    }
    let vocab = config.vocab();
    let assembler = PromptAssembler::new(vocab, registry.clone(), config.context_len)?;
    let mut enc = Encoders::new(config.encoder_config(), &mut stream(config.seed, 0))?;
    let mut adam = AdamState::new(&enc.store);
    let mut sampler = BatchSampler::new(
        datasets,
        config.batch_size,
        config.policy,
        config.seed ^ 0x5a3b,
    )?;
    let mut template_rng = stream(config.seed, 2);
    let loss_cfg = config.loss_config();

    // captions re-tokenized with this run's vocabulary
    let captions = datasets
        .image_text
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let raw = &s
                .text
                .as_ref()
                .ok_or_else(|| Error::Shape(format!("image-text sample {i} has no text")))?
                .raw;
            let seq = EmbeddingSequence::from_tokens(&vocab.tokenize(raw));
            if seq.is_empty() {
                return Err(Error::Shape(format!(
                    "image-text sample {i} has an empty caption"
                )));
            }
            Ok(seq)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = config.batch_size;
    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(config.steps as usize);
    let mut status = RunStatus::Completed;
    let mut completed = 0;
    for step in 1..=config.steps {
        let batch = sampler.next_batch(datasets);
        let images: Vec<&ImageFeature> = batch.samples.iter().map(|s| &s.image).collect();
        let (texts, y) = match batch.source {
            Source::ImageText => (
                batch
                    .indices
                    .iter()
                    .map(|&i| captions[i].clone())
                    .collect::<Vec<_>>(),
                pair_targets(n),
            ),
            Source::ImageLabel => {
                let labels: Vec<&MultiHotLabel> = batch
                    .samples
                    .iter()
                    .map(|s| {
                        s.label
                            .as_ref()
                            .expect("image-label sample carries a label")
                    })
                    .collect();
                let texts = labels
                    .iter()
                    .map(|l| {
                        assembler.assemble_label(l, |c| {
                            template_rng.random_range(0..assembler.template_count(c))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (texts, label_targets(&labels, &labels)?)
            }
        };

        enc.store.zero_grad();
        let loss = match loss_and_backward(&mut enc, step, &images, &texts, &y, &loss_cfg) {
            Ok(l) => l,
            Err(Error::NonFinite(reason)) => {
                status = RunStatus::Aborted { step, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        let lr = lr_at(step, config.steps, config.warmup_fraction, config.lr);
        match adam_step(&mut enc.store, &mut adam, step, lr) {
            Ok(()) => {}
            Err(Error::NonFinite(reason)) => {
                status = RunStatus::Aborted { step, reason };
                break;
            }
            Err(e) => return Err(e),
        }
        completed = step;
        losses.push(loss);
        if step % config.log_every == 0 || step == config.steps {
            log::debug!(
                "step {step} lr {lr:.3e} loss {loss:.6} ({})",
                batch.source.as_str()
            );
            log.push(MetricsRow {
                step,
                lr,
                loss,
                source: batch.source,
            });
        }
    }
    if let RunStatus::Aborted { step, reason } = &status {
        log::error!("training aborted at step {step}: {reason}");
    }

    let checkpoint = Checkpoint {
        config: config.clone(),
        vocab,
        class_names: registry.class_names().to_vec(),
        templates: (0..registry.num_classes())
            .map(|c| registry.templates(c).to_vec())
            .collect(),
        step: completed,
        encoders: enc,
        adam,
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        losses,
        status,
    })
}
