//! Soft targets, globally normalized similarity and the softmax-free loss.
//!
//! For a batch of unit image embeddings `v_i` and text embeddings `t_j`:
//!
//! ```text
//! s_ij   = v_i . t_j
//! s'_ij  = s_ij / ||S||_F
//! loss   = -(1/N) sum_ij y_ij log(clamp(s'_ij, 1e-8, 1))
//! ```
//!
//! with `y` either the label cosine matrix (image-label batches) or the
//! identity (image-text batches). Terms with `y_ij == 0` are skipped, and
//! clamped terms contribute no gradient.

mod gradcheck;

pub use gradcheck::{
    check_gradients, gradcheck, GradRow, GradcheckOptions, GradcheckReport, GRADCHECK_THRESHOLD,
};

use serde::{Deserialize, Serialize};

use crate::data::ImageFeature;
use crate::data::MultiHotLabel;
use crate::encoders::{Encoders, ForwardCache};
use crate::error::{Error, Result};
use crate::linalg;
use crate::prompt::EmbeddingSequence;

pub const CLAMP_EPS: f64 = 1e-8;
pub const UNIT_NORM_TOL: f64 = 1e-4;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn frobenius(&self) -> f64 {
        linalg::norm(&self.data)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    fn same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Similarity targets for one batch; entries in `[0, 1]`.
pub type TargetMatrix = Matrix;

/// Cosine between two multi-hot vectors.
pub fn label_cosine(a: &MultiHotLabel, b: &MultiHotLabel) -> Result<f64> {
    if a.width() != b.width() {
        return Err(Error::Shape(format!(
            "label widths {} and {}",
            a.width(),
            b.width()
        )));
    }
    let shared = a
        .bits()
        .iter()
        .zip(b.bits())
        .filter(|(x, y)| **x && **y)
        .count() as f64;
    Ok(shared / (a.count() as f64 * b.count() as f64).sqrt())
}

/// `y[i][j]` = cosine of image label `i` and prompt label `j`.
pub fn label_targets(
    labels: &[&MultiHotLabel],
    prompt_labels: &[&MultiHotLabel],
) -> Result<TargetMatrix> {
    let mut y = Matrix::zeros(labels.len(), prompt_labels.len());
    for (i, a) in labels.iter().enumerate() {
        for (j, b) in prompt_labels.iter().enumerate() {
            y.set(i, j, label_cosine(a, b)?);
        }
    }
    Ok(y)
}

/// Paired samples are positives, everything else zero.
pub fn pair_targets(n: usize) -> TargetMatrix {
    Matrix::identity(n)
}

/// `raw[i][j] = v_i . t_j`; every input must be unit norm within 1e-4.
pub fn raw_similarity(images: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<Matrix> {
    for (kind, set) in [("image", images), ("text", texts)] {
        for (i, e) in set.iter().enumerate() {
            let n = linalg::norm(e);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Shape(format!(
                    "{kind} embedding {i} has norm {n}, expected unit norm"
                )));
            }
        }
    }
    let mut s = Matrix::zeros(images.len(), texts.len());
    for (i, v) in images.iter().enumerate() {
        for (j, t) in texts.iter().enumerate() {
            if v.len() != t.len() {
                return Err(Error::Shape(format!(
                    "embedding widths {} and {}",
                    v.len(),
                    t.len()
                )));
            }
            s.set(i, j, linalg::dot(v, t));
        }
    }
    Ok(s)
}

/// Divides every entry by the Frobenius norm of the whole matrix.
pub fn normalize_similarity(raw: &Matrix) -> Result<Matrix> {
    let f = raw.frobenius();
    if f == 0.0 {
        return Err(Error::DegenerateBatch(
            "similarity matrix is all zero (collapsed embeddings)".into(),
        ));
    }
    if !f.is_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    Ok(Matrix {
        rows: raw.rows,
        cols: raw.cols,
        data: raw.data.iter().map(|v| v / f).collect(),
    })
}

fn check_loss_inputs(y: &Matrix, s: &Matrix) -> Result<()> {
    y.same_shape(s, "targets vs similarity")?;
    if y.rows == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if y.data.iter().chain(&s.data).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in loss inputs".into()));
    }
    Ok(())
}

/// `-(1/N) sum y_ij log(clamp(s_ij, eps, 1))` over terms with `y_ij != 0`.
/// `N` is the number of rows.
pub fn umcl_loss(y: &TargetMatrix, s_norm: &Matrix) -> Result<f64> {
    check_loss_inputs(y, s_norm)?;
    let mut total = 0.0;
    for (yv, sv) in y.data.iter().zip(&s_norm.data) {
        if *yv != 0.0 {
            total -= yv * sv.clamp(CLAMP_EPS, 1.0).ln();
        }
    }
    Ok(total / y.rows as f64)
}

/// Gradient of [`umcl_loss`] with respect to the normalized matrix. Entries
/// outside the clamp's active range get zero.
pub fn umcl_grad_normalized(y: &TargetMatrix, s_norm: &Matrix) -> Result<Matrix> {
    check_loss_inputs(y, s_norm)?;
    let n = y.rows as f64;
    let data = y
        .data
        .iter()
        .zip(&s_norm.data)
        .map(|(yv, sv)| {
            if *yv != 0.0 && *sv >= CLAMP_EPS && *sv <= 1.0 {
                -yv / (n * sv)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Matrix {
        rows: y.rows,
        cols: y.cols,
        data,
    })
}

/// Pulls a gradient on `S / ||S||_F` back to `S`:
/// `dS = (G - <G, S'> S') / ||S||_F`.
pub fn normalize_backward(raw: &Matrix, grad_norm: &Matrix) -> Matrix {
    let f = raw.frobenius();
    let s_norm: Vec<f64> = raw.data.iter().map(|v| v / f).collect();
    let inner = linalg::dot(&grad_norm.data, &s_norm);
    Matrix {
        rows: raw.rows,
        cols: raw.cols,
        data: grad_norm
            .data
            .iter()
            .zip(&s_norm)
            .map(|(g, s)| (g - inner * s) / f)
            .collect(),
    }
}

/// UMCL loss and its gradient with respect to the raw similarity matrix.
pub fn umcl_loss_and_grad(y: &TargetMatrix, raw: &Matrix) -> Result<(f64, Matrix)> {
    let s_norm = normalize_similarity(raw)?;
    let loss = umcl_loss(y, &s_norm)?;
    let g = umcl_grad_normalized(y, &s_norm)?;
    Ok((loss, normalize_backward(raw, &g)))
}

/// Identity-target softmax cross-entropy over rows of `raw / temperature`,
/// averaged over rows. Returns the loss and its gradient on `raw`.
pub fn hard_infonce_loss_and_grad(raw: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    if raw.rows != raw.cols || raw.rows == 0 {
        return Err(Error::Shape(
            "InfoNCE needs a non-empty square matrix".into(),
        ));
    }
    if raw.data.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in similarity".into()));
    }
    let n = raw.rows;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, n);
    for i in 0..n {
        let logits: Vec<f64> = raw.row(i).iter().map(|s| s / temperature).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss -= logits[i] - max - z.ln();
        for (j, e) in exps.iter().enumerate() {
            let p = e / z;
            let target = if i == j { 1.0 } else { 0.0 };
            grad.set(i, j, (p - target) / (temperature * n as f64));
        }
    }
    Ok((loss / n as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Umcl,
    HardInfoNce,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "umcl" => Ok(Self::Umcl),
            "hard_infonce" => Ok(Self::HardInfoNce),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Umcl => "umcl",
            Self::HardInfoNce => "hard_infonce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Also add the text-to-image (transposed) term.
    pub symmetric: bool,
    /// Only used by the hard-target baseline.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Umcl,
            symmetric: false,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Loss and gradient on the raw similarity matrix under `cfg`. The baseline
/// ignores `y` and uses identity targets.
pub fn similarity_loss_and_grad(
    cfg: &LossConfig,
    y: &TargetMatrix,
    raw: &Matrix,
) -> Result<(f64, Matrix)> {
    let one = |y: &Matrix, raw: &Matrix| match cfg.kind {
        LossKind::Umcl => umcl_loss_and_grad(y, raw),
        LossKind::HardInfoNce => hard_infonce_loss_and_grad(raw, cfg.temperature),
    };
    let (mut loss, mut grad) = one(y, raw)?;
    if cfg.symmetric {
        let (lt, gt) = one(&y.transpose(), &raw.transpose())?;
        loss += lt;
        let gt = gt.transpose();
        grad.data
            .iter_mut()
            .zip(&gt.data)
            .for_each(|(g, h)| *g += h);
    }
    Ok((loss, grad))
}

/// Gradients on the unit embeddings: `dV = dS T`, `dT = dS^T V`.
pub fn embedding_grads(
    grad_raw: &Matrix,
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let e = images.first().or(texts.first()).map_or(0, Vec::len);
    let gv = (0..grad_raw.rows)
        .map(|i| {
            let mut g = vec![0.0; e];
            for (j, t) in texts.iter().enumerate() {
                linalg::axpy(&mut g, grad_raw.get(i, j), t);
            }
            g
        })
        .collect();
    let gt = (0..grad_raw.cols)
        .map(|j| {
            let mut g = vec![0.0; e];
            for (i, v) in images.iter().enumerate() {
                linalg::axpy(&mut g, grad_raw.get(i, j), v);
            }
            g
        })
        .collect();
    (gv, gt)
}

/// Result of one batch objective evaluation.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub raw: Matrix,
    pub cache: ForwardCache,
}

/// Forward pass and loss for one batch (no gradient).
pub fn batch_forward(
    enc: &Encoders,
    batch_id: u64,
    images: &[&ImageFeature],
    texts: &[EmbeddingSequence],
    y: &TargetMatrix,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let cache = enc.forward(batch_id, images, texts)?;
    let raw = raw_similarity(&cache.image_embeddings(), &cache.text_embeddings())?;
    let (loss, _) = similarity_loss_and_grad(cfg, y, &raw)?;
    Ok(BatchLoss { loss, raw, cache })
}

/// Full chain: forward, loss, gradient through normalization, similarity and
/// both encoders (including the prompt bank). Gradients are accumulated into
/// the store's slots; the caller zeroes them beforehand.
pub fn loss_and_backward(
    enc: &mut Encoders,
    batch_id: u64,
    images: &[&ImageFeature],
    texts: &[EmbeddingSequence],
    y: &TargetMatrix,
    cfg: &LossConfig,
) -> Result<f64> {
    let cache = enc.forward(batch_id, images, texts)?;
    let v = cache.image_embeddings();
    let t = cache.text_embeddings();
    let raw = raw_similarity(&v, &t)?;
    let (loss, grad_raw) = similarity_loss_and_grad(cfg, y, &raw)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss} at batch {batch_id}")));
    }
    let (gv, gt) = embedding_grads(&grad_raw, &v, &t);
    enc.backward(&cache, &gv, &gt)?;
    Ok(loss)
}
