//! Central-difference verification of the analytic gradients.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    batch_forward, label_targets, loss_and_backward, pair_targets, LossConfig, TargetMatrix,
};
use crate::data::{ImageFeature, MultiHotLabel};
use crate::encoders::{EncoderConfig, Encoders, ParamId, ParameterStore, PROMPT_BANK, TOKEN_TABLE};
use crate::error::{Error, Result};
use crate::prompt::{
    default_class_names, DiscreteTemplateRegistry, EmbeddingSequence, PromptAssembler, Slot,
    Vocabulary,
};

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

/// Anything that owns a [`ParameterStore`].
pub trait HasParams {
    fn params(&self) -> &ParameterStore;
    fn params_mut(&mut self) -> &mut ParameterStore;
}

impl HasParams for ParameterStore {
    fn params(&self) -> &ParameterStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParameterStore {
        self
    }
}

impl HasParams for Encoders {
    fn params(&self) -> &ParameterStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub step: f64,
    pub threshold: f64,
    pub samples_per_tensor: usize,
    pub batch_size: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            threshold: GRADCHECK_THRESHOLD,
            samples_per_tensor: 20,
            batch_size: 4,
            num_classes: 4,
            encoder: EncoderConfig {
                vocab_size: 64,
                token_dim: 6,
                hidden_dim: 10,
                embed_dim: 8,
                image_dim: 5,
                context_len: 3,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub suite: String,
    pub tensor: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub step: f64,
    pub rows: Vec<GradRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> Vec<&GradRow> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    /// Plain-text table: suite, tensor, max relative error, pass/fail.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:<22} {:>7} {:>12}  status",
            "suite", "tensor", "checked", "max_rel_err"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<22} {:<22} {:>7} {:>12.3e}  {}",
                r.suite,
                r.tensor,
                r.checked,
                r.max_rel_err,
                if r.pass { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            out,
            "threshold {:.0e}, step {:.0e}: {}",
            self.threshold,
            self.step,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Relative error with a 1e-8 floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradients currently held in the store's slots against
/// central differences of `loss`.
///
/// For each tensor accepted by `select`, up to `opts.samples_per_tensor`
/// coordinates are drawn from `eligible(model, id)`. Tensors with nothing
/// eligible produce no row.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients<M, L, S, E>(
    suite: &str,
    model: &mut M,
    mut loss: L,
    select: S,
    eligible: E,
    step: f64,
    threshold: f64,
    samples_per_tensor: usize,
    rng: &mut impl Rng,
) -> Result<Vec<GradRow>>
where
    M: HasParams,
    L: FnMut(&M) -> Result<f64>,
    S: Fn(&str) -> bool,
    E: Fn(&M, ParamId) -> Vec<usize>,
{
    let ids: Vec<ParamId> = model.params().ids().collect();
    let mut rows = Vec::new();
    for id in ids {
        let name = model.params().get(id).name.clone();
        if !select(&name) {
            continue;
        }
        let pool = eligible(model, id);
        if pool.is_empty() {
            continue;
        }
        let picks: Vec<usize> = sample(rng, pool.len(), samples_per_tensor.min(pool.len()))
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let mut worst = 0.0f64;
        for k in &picks {
            let k = *k;
            let analytic = model.params().get(id).grad[k];
            let original = model.params().get(id).value[k];
            model.params_mut().get_mut(id).value[k] = original + step;
            let plus = loss(model);
            model.params_mut().get_mut(id).value[k] = original - step;
            let minus = loss(model);
            model.params_mut().get_mut(id).value[k] = original;
            let numeric = (plus? - minus?) / (2.0 * step);
            let err = relative_error(analytic, numeric);
            worst = if err.is_nan() {
                f64::INFINITY
            } else {
                worst.max(err)
            };
        }
        rows.push(GradRow {
            suite: suite.to_string(),
            tensor: name,
            checked: picks.len(),
            max_rel_err: worst,
            pass: worst < threshold,
        });
    }
    Ok(rows)
}

/// A small two-source fixture for the gradient suites.
struct Fixture {
    enc: Encoders,
    images: Vec<ImageFeature>,
    label_texts: Vec<EmbeddingSequence>,
    label_y: TargetMatrix,
    caption_texts: Vec<EmbeddingSequence>,
}

const CAPTION_WORDS: &[&str] = &[
    "mild", "edema", "left", "base", "no", "effusion", "stable", "heart", "size", "opacity",
    "right", "lobe",
];

impl Fixture {
    fn build(seed: u64, opts: &GradcheckOptions) -> Result<Self> {
        let cfg = opts.encoder;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = Encoders::new(cfg, &mut rng)?;
        // a shared output offset keeps every cosine positive, so no clamp is active
        let normal = Normal::new(0.0, 1.0).unwrap();
        let dir: Vec<f64> = (0..cfg.embed_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let (dir, _) = crate::linalg::l2_normalize(&dir);
        for name in ["image.b2", "text.b2"] {
            let id = enc.store.id(name).expect("encoder tensor");
            enc.store.get_mut(id).value = dir.iter().map(|v| 3.0 * v).collect();
        }

        let vocab = Vocabulary::new(cfg.vocab_size, seed, 77)?;
        let names = default_class_names(opts.num_classes);
        let registry = DiscreteTemplateRegistry::builtin(&names);
        let assembler = PromptAssembler::new(vocab, registry, cfg.context_len)?;

        let n = opts.batch_size;
        let images = (0..n)
            .map(|_| {
                ImageFeature::new(
                    (0..cfg.image_dim)
                        .map(|_| normal.sample(&mut rng))
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..n)
            .map(|_| loop {
                let bits: Vec<bool> = (0..opts.num_classes)
                    .map(|_| rng.random_bool(0.4))
                    .collect();
                if let Ok(l) = MultiHotLabel::new(bits) {
                    break l;
                }
            })
            .collect::<Vec<_>>();
        let label_texts = labels
            .iter()
            .map(|l| {
                let t = rng.random_range(0..3);
                assembler.assemble_label(l, |c| t % assembler.template_count(c))
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&MultiHotLabel> = labels.iter().collect();
        let label_y = label_targets(&refs, &refs)?;
        let caption_texts = (0..n)
            .map(|_| {
                let len = rng.random_range(3..8);
                let words: Vec<&str> = (0..len)
                    .map(|_| CAPTION_WORDS[rng.random_range(0..CAPTION_WORDS.len())])
                    .collect();
                EmbeddingSequence::from_tokens(&vocab.tokenize(&words.join(" ")))
            })
            .collect();
        Ok(Self {
            enc,
            images,
            label_texts,
            label_y,
            caption_texts,
        })
    }
}

/// Coordinates worth checking: token-table rows that the batch touches, and
/// every coordinate of every other tensor.
fn touched(texts: &[EmbeddingSequence]) -> impl Fn(&Encoders, ParamId) -> Vec<usize> + '_ {
    move |enc: &Encoders, id: ParamId| {
        let p = enc.store.get(id);
        if p.name == TOKEN_TABLE {
            let d = enc.config.token_dim;
            let rows: BTreeSet<usize> = texts
                .iter()
                .flat_map(|s| s.slots.iter())
                .filter_map(|s| match s {
                    Slot::Token(t) => Some(*t as usize),
                    Slot::Bank(_) => None,
                })
                .collect();
            rows.into_iter().flat_map(|r| r * d..(r + 1) * d).collect()
        } else {
            (0..p.numel()).collect()
        }
    }
}

/// Runs the encoder, objective-chain (both sources) and prompt-bank suites.
pub fn gradcheck(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut fx = Fixture::build(seed, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut rows = Vec::new();
    let n = opts.batch_size;
    let all = |_: &str| true;

    // encoders under a random linear read-out of the unit embeddings
    {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let e = opts.encoder.embed_dim;
        let mut draw = || -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..e).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        let (ri, rt) = (draw(), draw());
        let images = fx.images.clone();
        let texts = fx.label_texts.clone();
        let img_refs: Vec<&ImageFeature> = images.iter().collect();
        fx.enc.store.zero_grad();
        let cache = fx.enc.forward(0, &img_refs, &texts)?;
        fx.enc.backward(&cache, &ri, &rt)?;
        let readout = |enc: &Encoders| -> Result<f64> {
            let c = enc.forward(0, &img_refs, &texts)?;
            let dot = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
                a.iter().zip(b).map(|(x, y)| crate::linalg::dot(x, y)).sum()
            };
            Ok(dot(&c.image_embeddings(), &ri) + dot(&c.text_embeddings(), &rt))
        };
        rows.extend(check_gradients(
            "encoders",
            &mut fx.enc,
            readout,
            all,
            touched(&texts),
            opts.step,
            opts.threshold,
            opts.samples_per_tensor,
            &mut rng,
        )?);
    }

    let cfg = LossConfig::default();
    let images = fx.images.clone();
    let img_refs: Vec<&ImageFeature> = images.iter().collect();
    let sources = [
        (
            "objective/image_label",
            fx.label_texts.clone(),
            fx.label_y.clone(),
        ),
        (
            "objective/image_text",
            fx.caption_texts.clone(),
            pair_targets(n),
        ),
    ];
    for (suite, texts, y) in &sources {
        ensure_unclamped(&fx.enc, &img_refs, texts, y)?;
        fx.enc.store.zero_grad();
        loss_and_backward(&mut fx.enc, 1, &img_refs, texts, y, &cfg)?;
        let loss =
            |enc: &Encoders| batch_forward(enc, 1, &img_refs, texts, y, &cfg).map(|b| b.loss);
        rows.extend(check_gradients(
            suite,
            &mut fx.enc,
            loss,
            all,
            touched(texts),
            opts.step,
            opts.threshold,
            opts.samples_per_tensor,
            &mut rng,
        )?);
    }

    // every bank entry, one at a time, through the label prompts
    {
        let (_, texts, y) = &sources[0];
        fx.enc.store.zero_grad();
        loss_and_backward(&mut fx.enc, 2, &img_refs, texts, y, &cfg)?;
        let loss =
            |enc: &Encoders| batch_forward(enc, 2, &img_refs, texts, y, &cfg).map(|b| b.loss);
        let bank_size = fx.enc.store.get(fx.enc.bank_id()).numel();
        rows.extend(check_gradients(
            "prompt_bank",
            &mut fx.enc,
            loss,
            |name| name == PROMPT_BANK,
            touched(texts),
            opts.step,
            opts.threshold,
            bank_size,
            &mut rng,
        )?);
    }

    Ok(GradcheckReport {
        threshold: opts.threshold,
        step: opts.step,
        rows,
    })
}

fn ensure_unclamped(
    enc: &Encoders,
    images: &[&ImageFeature],
    texts: &[EmbeddingSequence],
    y: &TargetMatrix,
) -> Result<()> {
    let b = batch_forward(enc, 0, images, texts, y, &LossConfig::default())?;
    let f = b.raw.frobenius();
    let margin = 1e-3;
    for (yv, sv) in y.data.iter().zip(&b.raw.data) {
        if *yv != 0.0 && sv / f < margin {
            return Err(Error::DegenerateBatch(format!(
                "gradcheck fixture has a positive-target entry at {:.3e}, too close to the clamp",
                sv / f
            )));
        }
    }
    Ok(())
}
