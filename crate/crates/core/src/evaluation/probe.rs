use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::ParameterStore;
use crate::error::{Error, Result};
use crate::linalg;
use crate::training::{adam_step, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Affine softmax classifier over frozen embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `num_classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        linalg::affine(&self.weights, &self.bias, x, self.num_classes, self.dim)
    }

    /// Argmax of the logits, lowest class on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let correct = xs
            .iter()
            .zip(ys)
            .filter(|(x, y)| self.predict(x) == **y)
            .count();
        correct as f64 / xs.len() as f64
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Full-batch softmax cross-entropy training with Adam.
pub fn train_probe(
    xs: &[Vec<f64>],
    ys: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Shape("probe needs matching, non-empty data".into()));
    }
    if let Some(y) = ys.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Shape(format!("class {y} out of range")));
    }
    if ys.iter().all(|&y| y == ys[0]) {
        return Err(Error::Config(
            "linear probe training split contains a single class".into(),
        ));
    }
    let dim = xs[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 0.01).unwrap();
    let mut store = ParameterStore::new();
    let w = store.register(
        "probe.w",
        vec![num_classes, dim],
        (0..num_classes * dim)
            .map(|_| normal.sample(&mut rng))
            .collect(),
    )?;
    let b = store.register("probe.b", vec![num_classes], vec![0.0; num_classes])?;
    let mut adam = AdamState::new(&store);
    let n = xs.len() as f64;

    for epoch in 1..=cfg.epochs {
        store.zero_grad();
        let mut gw = vec![0.0; num_classes * dim];
        let mut gb = vec![0.0; num_classes];
        for (x, &y) in xs.iter().zip(ys) {
            let logits = linalg::affine(store.value(w), store.value(b), x, num_classes, dim);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let g: Vec<f64> = exps
                .iter()
                .enumerate()
                .map(|(c, e)| (e / z - f64::from(u8::from(c == y))) / n)
                .collect();
            linalg::add_outer(&mut gw, &g, x);
            linalg::axpy(&mut gb, 1.0, &g);
        }
        store.grad_mut(w).copy_from_slice(&gw);
        store.grad_mut(b).copy_from_slice(&gb);
        adam_step(&mut store, &mut adam, epoch, cfg.lr)?;
    }
    Ok(LinearProbe {
        num_classes,
        dim,
        weights: store.value(w).to_vec(),
        bias: store.value(b).to_vec(),
    })
}
