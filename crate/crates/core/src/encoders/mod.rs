//! Toy trainable encoders producing unit-norm embeddings.
//!
//! Both encoders are `x -> W2 tanh(W1 x + b1) + b2 -> x / |x|`. The text
//! encoder's `x` is the mean of its input sequence's vectors, read from the
//! token table or the prompt bank according to each position's [`Slot`].

mod params;

pub use params::{Param, ParamId, ParameterStore};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ImageFeature;
use crate::error::{Error, Result};
use crate::linalg;
use crate::par;
use crate::prompt::{init_bank, EmbeddingSequence, Slot};

pub const TOKEN_TABLE: &str = "text.token_embedding";
pub const PROMPT_BANK: &str = "prompt.bank";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Width `d` of token embeddings and prompt bank vectors.
    pub token_dim: usize,
    pub hidden_dim: usize,
    /// Joint embedding width.
    pub embed_dim: usize,
    pub image_dim: usize,
    /// Number of continuous prompt vectors.
    pub context_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::prompt::Vocabulary::default().size,
            token_dim: 64,
            hidden_dim: 128,
            embed_dim: 128,
            image_dim: 64,
            context_len: 32,
        }
    }
}

/// A model output vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct MlpCache {
    input: Vec<f64>,
    act: Vec<f64>,
    pre_norm: f64,
    out: Vec<f64>,
}

struct MlpGrads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    input: Vec<f64>,
}

/// Intermediates of one batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch_id: u64,
    version: u64,
    image: Vec<MlpCache>,
    text: Vec<(MlpCache, Vec<Slot>)>,
}

impl ForwardCache {
    pub fn num_images(&self) -> usize {
        self.image.len()
    }

    pub fn num_texts(&self) -> usize {
        self.text.len()
    }

    /// Row-major `N x E` image embeddings.
    pub fn image_embeddings(&self) -> Vec<Vec<f64>> {
        self.image.iter().map(|c| c.out.clone()).collect()
    }

    pub fn text_embeddings(&self) -> Vec<Vec<f64>> {
        self.text.iter().map(|(c, _)| c.out.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub store: ParameterStore,
    token_table: ParamId,
    bank: ParamId,
    text: MlpIds,
    image: MlpIds,
}

fn gaussian<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl Encoders {
    /// Registers and initializes every tensor. Weight matrices are
    /// N(0, 1/fan_in), biases zero, the token table N(0, 1) and the prompt
    /// bank N(0, 0.02).
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let EncoderConfig {
            vocab_size: v,
            token_dim: d,
            hidden_dim: h,
            embed_dim: e,
            image_dim: di,
            context_len: m,
        } = config;
        if [v, d, h, e, di].contains(&0) {
            return Err(Error::Config(format!(
                "encoder sizes must be positive: {config:?}"
            )));
        }
        let mut store = ParameterStore::new();
        let token_table = store.register(TOKEN_TABLE, vec![v, d], gaussian(v * d, 1.0, rng))?;
        let bank = store.register(PROMPT_BANK, vec![m, d], init_bank(m, d, rng))?;
        let mut mlp = |prefix: &str, fan_in: usize, store: &mut ParameterStore| -> Result<MlpIds> {
            Ok(MlpIds {
                w1: store.register(
                    format!("{prefix}.w1"),
                    vec![h, fan_in],
                    gaussian(h * fan_in, (1.0 / fan_in as f64).sqrt(), rng),
                )?,
                b1: store.register(format!("{prefix}.b1"), vec![h], vec![0.0; h])?,
                w2: store.register(
                    format!("{prefix}.w2"),
                    vec![e, h],
                    gaussian(e * h, (1.0 / h as f64).sqrt(), rng),
                )?,
                b2: store.register(format!("{prefix}.b2"), vec![e], vec![0.0; e])?,
            })
        };
        let text = mlp("text", d, &mut store)?;
        let image = mlp("image", di, &mut store)?;
        Ok(Self {
            config,
            store,
            token_table,
            bank,
            text,
            image,
        })
    }

    /// Rebuilds an encoder around an existing store (checkpoint restore).
    pub fn from_store(config: EncoderConfig, store: ParameterStore) -> Result<Self> {
        let id = |name: &str, shape: Vec<usize>| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if store.get(id).shape != shape {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    store.get(id).shape
                )));
            }
            Ok(id)
        };
        let c = config;
        let mlp = |prefix: &str, fan_in: usize| -> Result<MlpIds> {
            Ok(MlpIds {
                w1: id(&format!("{prefix}.w1"), vec![c.hidden_dim, fan_in])?,
                b1: id(&format!("{prefix}.b1"), vec![c.hidden_dim])?,
                w2: id(&format!("{prefix}.w2"), vec![c.embed_dim, c.hidden_dim])?,
                b2: id(&format!("{prefix}.b2"), vec![c.embed_dim])?,
            })
        };
        let token_table = id(TOKEN_TABLE, vec![c.vocab_size, c.token_dim])?;
        let bank = id(PROMPT_BANK, vec![c.context_len, c.token_dim])?;
        let text = mlp("text", c.token_dim)?;
        let image = mlp("image", c.image_dim)?;
        if store.len() != 10 {
            return Err(Error::Checkpoint(format!(
                "expected 10 tensors, found {}",
                store.len()
            )));
        }
        Ok(Self {
            config,
            store,
            token_table,
            bank,
            text,
            image,
        })
    }

    pub fn bank_id(&self) -> ParamId {
        self.bank
    }

    pub fn token_table_id(&self) -> ParamId {
        self.token_table
    }

    fn mlp_forward(&self, ids: MlpIds, input: Vec<f64>) -> Result<MlpCache> {
        let h = self.config.hidden_dim;
        let e = self.config.embed_dim;
        let s = &self.store;
        let act: Vec<f64> =
            linalg::affine(s.value(ids.w1), s.value(ids.b1), &input, h, input.len())
                .into_iter()
                .map(f64::tanh)
                .collect();
        let pre = linalg::affine(s.value(ids.w2), s.value(ids.b2), &act, e, h);
        let (out, pre_norm) = linalg::l2_normalize(&pre);
        if !pre_norm.is_finite() {
            return Err(Error::NonFinite(format!("encoder output norm {pre_norm}")));
        }
        if pre_norm == 0.0 {
            return Err(Error::DegenerateBatch(
                "encoder output is the zero vector".into(),
            ));
        }
        Ok(MlpCache {
            input,
            act,
            pre_norm,
            out,
        })
    }

    fn mlp_backward(&self, ids: MlpIds, cache: &MlpCache, grad_out: &[f64]) -> MlpGrads {
        let h = self.config.hidden_dim;
        let e = self.config.embed_dim;
        let fan_in = cache.input.len();
        let s = &self.store;
        // through v = u / |u|
        let along = linalg::dot(grad_out, &cache.out);
        let g_pre: Vec<f64> = grad_out
            .iter()
            .zip(&cache.out)
            .map(|(g, v)| (g - along * v) / cache.pre_norm)
            .collect();
        let mut w2 = vec![0.0; e * h];
        linalg::add_outer(&mut w2, &g_pre, &cache.act);
        let g_act = linalg::matvec_t(s.value(ids.w2), &g_pre, e, h);
        let g_hidden: Vec<f64> = g_act
            .iter()
            .zip(&cache.act)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let mut w1 = vec![0.0; h * fan_in];
        linalg::add_outer(&mut w1, &g_hidden, &cache.input);
        let input = linalg::matvec_t(s.value(ids.w1), &g_hidden, h, fan_in);
        MlpGrads {
            w1,
            b1: g_hidden,
            w2,
            b2: g_pre,
            input,
        }
    }

    fn accumulate(&mut self, ids: MlpIds, g: &MlpGrads) {
        linalg::axpy(self.store.grad_mut(ids.w1), 1.0, &g.w1);
        linalg::axpy(self.store.grad_mut(ids.b1), 1.0, &g.b1);
        linalg::axpy(self.store.grad_mut(ids.w2), 1.0, &g.w2);
        linalg::axpy(self.store.grad_mut(ids.b2), 1.0, &g.b2);
    }

    fn check_image(&self, feat: &ImageFeature) -> Result<()> {
        if feat.dim() != self.config.image_dim {
            return Err(Error::Shape(format!(
                "image feature has {} values, encoder expects {}",
                feat.dim(),
                self.config.image_dim
            )));
        }
        Ok(())
    }

    /// Mean of the sequence's vectors.
    fn pool(&self, seq: &EmbeddingSequence) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::Shape("empty text sequence".into()));
        }
        let d = self.config.token_dim;
        let table = self.store.value(self.token_table);
        let bank = self.store.value(self.bank);
        let mut pooled = vec![0.0; d];
        for slot in &seq.slots {
            let row = match *slot {
                Slot::Bank(m) if m < self.config.context_len => &bank[m * d..(m + 1) * d],
                Slot::Token(id) if (id as usize) < self.config.vocab_size => {
                    &table[id as usize * d..(id as usize + 1) * d]
                }
                other => {
                    return Err(Error::Shape(format!(
                        "sequence slot {other:?} outside the bank/vocabulary"
                    )))
                }
            };
            linalg::axpy(&mut pooled, 1.0, row);
        }
        let inv = 1.0 / seq.len() as f64;
        pooled.iter_mut().for_each(|v| *v *= inv);
        Ok(pooled)
    }

    pub fn encode_image(&self, feat: &ImageFeature) -> Result<Embedding> {
        self.check_image(feat)?;
        let cache = self.mlp_forward(self.image, feat.values.clone())?;
        Ok(Embedding {
            values: cache.out,
            normalized: true,
        })
    }

    pub fn encode_text(&self, seq: &EmbeddingSequence) -> Result<Embedding> {
        let cache = self.mlp_forward(self.text, self.pool(seq)?)?;
        Ok(Embedding {
            values: cache.out,
            normalized: true,
        })
    }

    /// Unit image embeddings, computed data-parallel.
    pub fn embed_images(&self, feats: &[&ImageFeature]) -> Result<Vec<Vec<f64>>> {
        par::try_map(feats, |f| self.encode_image(f).map(|e| e.values))
    }

    pub fn embed_texts(&self, seqs: &[EmbeddingSequence]) -> Result<Vec<Vec<f64>>> {
        par::try_map(seqs, |s| self.encode_text(s).map(|e| e.values))
    }

    /// Batch forward pass keeping the intermediates needed by [`Self::backward`].
    pub fn forward(
        &self,
        batch_id: u64,
        images: &[&ImageFeature],
        texts: &[EmbeddingSequence],
    ) -> Result<ForwardCache> {
        let image = par::try_map(images, |f| {
            self.check_image(f)?;
            self.mlp_forward(self.image, f.values.clone())
        })?;
        let text = par::try_map(texts, |s| {
            Ok::<_, Error>((self.mlp_forward(self.text, self.pool(s)?)?, s.slots.clone()))
        })?;
        Ok(ForwardCache {
            batch_id,
            version: self.store.version(),
            image,
            text,
        })
    }

    /// Accumulates parameter gradients given upstream gradients on the unit
    /// embeddings (one row per image / text of the cached batch).
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        grad_images: &[Vec<f64>],
        grad_texts: &[Vec<f64>],
    ) -> Result<()> {
        if cache.version != self.store.version() {
            return Err(Error::MissingForward(format!(
                "cache for batch {} was computed at parameter version {}, store is at {}",
                cache.batch_id,
                cache.version,
                self.store.version()
            )));
        }
        if grad_images.len() != cache.image.len() || grad_texts.len() != cache.text.len() {
            return Err(Error::MissingForward(format!(
                "batch {} cached {} images / {} texts, got gradients for {} / {}",
                cache.batch_id,
                cache.image.len(),
                cache.text.len(),
                grad_images.len(),
                grad_texts.len()
            )));
        }
        let e = self.config.embed_dim;
        if grad_images.iter().chain(grad_texts).any(|g| g.len() != e) {
            return Err(Error::Shape(format!(
                "upstream gradient rows must have width {e}"
            )));
        }

        let jobs: Vec<(&MlpCache, &Vec<f64>)> = cache.image.iter().zip(grad_images).collect();
        let image_grads = par::map(&jobs, |(c, g)| self.mlp_backward(self.image, c, g));
        let jobs: Vec<(&MlpCache, &Vec<f64>)> =
            cache.text.iter().map(|(c, _)| c).zip(grad_texts).collect();
        let text_grads = par::map(&jobs, |(c, g)| self.mlp_backward(self.text, c, g));

        // sequential fold keeps accumulation order fixed
        for g in &image_grads {
            self.accumulate(self.image, g);
        }
        let d = self.config.token_dim;
        for (g, (_, slots)) in text_grads.iter().zip(&cache.text) {
            self.accumulate(self.text, g);
            let scale = 1.0 / slots.len() as f64;
            for slot in slots {
                let (id, row) = match *slot {
                    Slot::Bank(m) => (self.bank, m),
                    Slot::Token(t) => (self.token_table, t as usize),
                };
                linalg::axpy(
                    &mut self.store.grad_mut(id)[row * d..(row + 1) * d],
                    scale,
                    &g.input,
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Encoders {
        let cfg = EncoderConfig {
            vocab_size: 50,
            token_dim: 6,
            hidden_dim: 7,
            embed_dim: 5,
            image_dim: 4,
            context_len: 3,
        };
        Encoders::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn seq(slots: &[Slot]) -> EmbeddingSequence {
        EmbeddingSequence {
            slots: slots.to_vec(),
            truncated: false,
        }
    }

    #[test]
    fn outputs_are_unit_norm() {
        let enc = small();
        let img = ImageFeature::new(vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let e = enc.encode_image(&img).unwrap();
        assert!((linalg::norm(&e.values) - 1.0).abs() < 1e-6);
        let t = enc
            .encode_text(&seq(&[Slot::Bank(0), Slot::Token(7), Slot::Token(9)]))
            .unwrap();
        assert!((linalg::norm(&t.values) - 1.0).abs() < 1e-6);
        assert!(t.normalized);
    }

    #[test]
    fn pure_and_order_invariant() {
        let enc = small();
        let a = seq(&[Slot::Bank(1), Slot::Token(4), Slot::Token(11)]);
        let b = seq(&[Slot::Bank(1), Slot::Token(11), Slot::Token(4)]);
        let ea = enc.encode_text(&a).unwrap().values;
        assert_eq!(ea, enc.encode_text(&a).unwrap().values);
        let eb = enc.encode_text(&b).unwrap().values;
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_errors() {
        let enc = small();
        assert!(enc
            .encode_image(&ImageFeature::new(vec![0.0; 3]).unwrap())
            .is_err());
        assert!(enc.encode_text(&seq(&[])).is_err());
        assert!(enc.encode_text(&seq(&[Slot::Token(50)])).is_err());
        assert!(enc.encode_text(&seq(&[Slot::Bank(3)])).is_err());
    }

    #[test]
    fn near_linear_first_layer_preserves_direction() {
        let mut enc = small();
        let w1 = enc.image.w1;
        enc.store
            .get_mut(w1)
            .value
            .iter_mut()
            .for_each(|w| *w *= 1e-4);
        let x = vec![0.3, -1.0, 2.0, 0.1];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let h = enc.config.hidden_dim;
        let a1 = enc.mlp_forward(enc.image, x).unwrap().act;
        let a2 = enc.mlp_forward(enc.image, x2).unwrap().act;
        let (n1, _) = linalg::l2_normalize(&a1);
        let (n2, _) = linalg::l2_normalize(&a2);
        assert_eq!(a1.len(), h);
        for (p, q) in n1.iter().zip(&n2) {
            assert!((p - q).abs() < 1e-6);
        }
        for (p, q) in a1.iter().zip(&a2) {
            assert!((2.0 * p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_upstream_leaves_grads_unchanged() {
        let mut enc = small();
        let img = ImageFeature::new(vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let s = seq(&[Slot::Bank(0), Slot::Token(2)]);
        let cache = enc.forward(0, &[&img], std::slice::from_ref(&s)).unwrap();
        enc.backward(&cache, &[vec![0.0; 5]], &[vec![0.0; 5]])
            .unwrap();
        assert!(enc.store.iter().all(|p| p.grad.iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn accumulation_is_additive() {
        let img = ImageFeature::new(vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let s = seq(&[Slot::Bank(0), Slot::Token(2), Slot::Bank(2)]);
        let g1 = vec![0.1, -0.2, 0.3, 0.0, 0.5];
        let g2 = vec![-0.4, 0.1, 0.0, 0.2, 0.3];
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();

        let mut twice = small();
        let cache = twice.forward(0, &[&img], std::slice::from_ref(&s)).unwrap();
        twice
            .backward(&cache, std::slice::from_ref(&g1), std::slice::from_ref(&g1))
            .unwrap();
        twice
            .backward(&cache, std::slice::from_ref(&g2), std::slice::from_ref(&g2))
            .unwrap();

        let mut once = small();
        let cache = once.forward(0, &[&img], std::slice::from_ref(&s)).unwrap();
        once.backward(
            &cache,
            std::slice::from_ref(&sum),
            std::slice::from_ref(&sum),
        )
        .unwrap();

        for (a, b) in twice.store.iter().zip(once.store.iter()) {
            for (x, y) in a.grad.iter().zip(&b.grad) {
                assert!((x - y).abs() < 1e-12, "{}", a.name);
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut enc = small();
        let img = ImageFeature::new(vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let cache = enc.forward(9, &[&img], &[]).unwrap();
        enc.store.bump_version();
        let err = enc.backward(&cache, &[vec![0.0; 5]], &[]).unwrap_err();
        assert!(matches!(err, Error::MissingForward(_)));
        let cache = enc.forward(10, &[&img], &[]).unwrap();
        assert!(enc.backward(&cache, &[], &[]).is_err());
    }

    #[test]
    fn bank_gradient_only_through_bank_positions() {
        let mut enc = small();
        let img = ImageFeature::new(vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let s = seq(&[Slot::Bank(1), Slot::Token(2)]);
        let cache = enc.forward(0, &[&img], std::slice::from_ref(&s)).unwrap();
        enc.backward(&cache, &[vec![0.0; 5]], &[vec![1.0, 0.0, 0.0, 0.0, 0.0]])
            .unwrap();
        let bank = &enc.store.get(enc.bank).grad;
        let d = enc.config.token_dim;
        assert!(bank[..d].iter().all(|g| *g == 0.0));
        assert!(bank[d..2 * d].iter().any(|g| *g != 0.0));
        assert!(bank[2 * d..].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn from_store_round_trip() {
        let enc = small();
        let rebuilt = Encoders::from_store(enc.config, enc.store.clone()).unwrap();
        assert_eq!(rebuilt, enc);
        let mut cfg = enc.config;
        cfg.embed_dim += 1;
        assert!(Encoders::from_store(cfg, enc.store.clone()).is_err());
    }
}
