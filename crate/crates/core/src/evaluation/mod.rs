//! Evaluation protocols against a frozen checkpoint: zero-shot
//! classification (single prompt and ensemble), linear probe, cross-modal
//! Precision@K, and embedding export with a PCA projection.

mod pca;
mod probe;
mod retrieval;

pub use pca::{pca_2d, symmetric_eigen, Pca2};
pub use probe::{train_probe, LinearProbe, ProbeConfig};
pub use retrieval::{precision_at_k, rank_candidates, DEFAULT_KS};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EvalSet, ImageFeature};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::linalg;
use crate::prompt::{EmbeddingSequence, PromptAssembler};
use crate::training::Checkpoint;

/// One unit text embedding per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClasswiseTextAnchors {
    pub per_class: Vec<Vec<f64>>,
}

/// Below this norm the averaged ensemble direction is considered undefined.
pub const ENSEMBLE_MIN_NORM: f64 = 1e-8;

/// Mean of unit embeddings, renormalized. A single embedding, or a set of
/// identical ones, is returned unchanged.
pub fn ensemble_mean(embeddings: &[Vec<f64>], class_id: usize) -> Result<Vec<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Shape(format!("class {class_id} has no prompts")))?;
    if embeddings.iter().all(|e| e == first) {
        return Ok(first.clone());
    }
    let mut mean = vec![0.0; first.len()];
    for e in embeddings {
        linalg::axpy(&mut mean, 1.0 / embeddings.len() as f64, e);
    }
    let n = linalg::norm(&mean);
    if n < ENSEMBLE_MIN_NORM {
        return Err(Error::DegenerateEnsemble(class_id));
    }
    Ok(mean.iter().map(|v| v / n).collect())
}

/// Anchor for `class_id` from the prompt built with `template_index`.
pub fn single_prompt_anchor(
    enc: &Encoders,
    assembler: &PromptAssembler,
    class_id: usize,
    template_index: usize,
) -> Result<Vec<f64>> {
    Ok(enc
        .encode_text(&assembler.assemble(class_id, template_index)?)?
        .values)
}

/// Encodes every template prompt of the class and averages the embeddings.
pub fn build_ensemble_anchor(
    enc: &Encoders,
    assembler: &PromptAssembler,
    class_id: usize,
) -> Result<Vec<f64>> {
    let prompts = assembler.class_prompt_set(class_id)?;
    let embs = enc.embed_texts(&prompts)?;
    ensemble_mean(&embs, class_id)
}

pub fn single_prompt_anchors(
    enc: &Encoders,
    assembler: &PromptAssembler,
) -> Result<ClasswiseTextAnchors> {
    let per_class = (0..assembler.num_classes())
        .map(|c| single_prompt_anchor(enc, assembler, c, 0))
        .collect::<Result<_>>()?;
    Ok(ClasswiseTextAnchors { per_class })
}

pub fn ensemble_anchors(
    enc: &Encoders,
    assembler: &PromptAssembler,
) -> Result<ClasswiseTextAnchors> {
    let per_class = (0..assembler.num_classes())
        .map(|c| build_ensemble_anchor(enc, assembler, c))
        .collect::<Result<_>>()?;
    Ok(ClasswiseTextAnchors { per_class })
}

/// Argmax over classes of the cosine with each anchor; ties go to the
/// lowest class id.
pub fn classify_embedding(
    image_embedding: &[f64],
    anchors: &ClasswiseTextAnchors,
) -> Result<usize> {
    if anchors.per_class.is_empty() {
        return Err(Error::Shape("empty anchor set".into()));
    }
    let scores: Vec<f64> = anchors
        .per_class
        .iter()
        .map(|a| linalg::dot(image_embedding, a))
        .collect();
    Ok(probe::argmax(&scores))
}

pub fn zero_shot_classify(
    image: &ImageFeature,
    anchors: &ClasswiseTextAnchors,
    enc: &Encoders,
) -> Result<usize> {
    classify_embedding(&enc.encode_image(image)?.values, anchors)
}

pub fn zero_shot_accuracy(
    image_embeddings: &[Vec<f64>],
    classes: &[usize],
    anchors: &ClasswiseTextAnchors,
) -> Result<f64> {
    if image_embeddings.is_empty() {
        return Err(Error::Shape("no evaluation samples".into()));
    }
    let mut correct = 0;
    for (e, &c) in image_embeddings.iter().zip(classes) {
        correct += usize::from(classify_embedding(e, anchors)? == c);
    }
    Ok(correct as f64 / image_embeddings.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTasks {
    pub zero_shot: bool,
    /// Also report the prompt-ensemble zero-shot accuracy.
    pub ensemble: bool,
    pub probe: bool,
    pub retrieval: bool,
    pub ks: Vec<usize>,
    pub probe_config: ProbeConfig,
}

impl Default for EvalTasks {
    fn default() -> Self {
        Self {
            zero_shot: true,
            ensemble: true,
            probe: false,
            retrieval: false,
            ks: DEFAULT_KS.to_vec(),
            probe_config: ProbeConfig::default(),
        }
    }
}

/// Metrics document; absent tasks are omitted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_shot_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_shot_acc_ens: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_at_k: Option<BTreeMap<usize, f64>>,
}

impl EvalMetrics {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut line = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                let _ = writeln!(out, "{name:<20} {v:.4}");
            }
        };
        line("zero_shot_acc", self.zero_shot_acc);
        line("zero_shot_acc_ens", self.zero_shot_acc_ens);
        line("probe_acc", self.probe_acc);
        if let Some(p) = &self.p_at_k {
            for (k, v) in p {
                let _ = writeln!(out, "{:<20} {v:.4}", format!("P@{k}"));
            }
        }
        out
    }
}

/// Alternating per-class split: within each class, even positions train
/// and odd positions test.
pub fn probe_split(classes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, c) in classes.iter().enumerate() {
        let k = seen.entry(*c).or_insert(0);
        if k.is_multiple_of(2) {
            train.push(i);
        } else {
            test.push(i);
        }
        *k += 1;
    }
    (train, test)
}

fn caption_sequences(ckpt: &Checkpoint, set: &EvalSet) -> Result<Vec<EmbeddingSequence>> {
    set.samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let raw = &s
                .text
                .as_ref()
                .ok_or_else(|| Error::Task(format!("evaluation sample {i} has no text")))?
                .raw;
            Ok(EmbeddingSequence::from_tokens(&ckpt.vocab.tokenize(raw)))
        })
        .collect()
}

/// Runs the requested protocols. Task/data mismatches are reported before
/// any embedding is computed.
pub fn evaluate(ckpt: &Checkpoint, set: &EvalSet, tasks: &EvalTasks) -> Result<EvalMetrics> {
    if set.samples.is_empty() {
        return Err(Error::Task("evaluation set is empty".into()));
    }
    if tasks.retrieval && !set.has_texts() {
        return Err(Error::Task(
            "retrieval needs a text for every evaluation sample".into(),
        ));
    }
    if tasks.retrieval {
        if let Some(&k) = tasks.ks.iter().find(|&&k| k == 0 || k > set.samples.len()) {
            return Err(Error::Task(format!(
                "k = {k} invalid for {} retrieval candidates",
                set.samples.len()
            )));
        }
    }
    if let Some(s) = set
        .samples
        .iter()
        .find(|s| s.class_id >= ckpt.num_classes())
    {
        return Err(Error::Task(format!(
            "evaluation class {} unknown to a {}-class checkpoint",
            s.class_id,
            ckpt.num_classes()
        )));
    }
    let enc = &ckpt.encoders;
    let assembler = ckpt.assembler()?;
    let images: Vec<&ImageFeature> = set.samples.iter().map(|s| &s.image).collect();
    let image_embs = enc.embed_images(&images)?;
    let classes = set.class_ids();
    let mut metrics = EvalMetrics::default();

    if tasks.zero_shot {
        let anchors = single_prompt_anchors(enc, &assembler)?;
        metrics.zero_shot_acc = Some(zero_shot_accuracy(&image_embs, &classes, &anchors)?);
        if tasks.ensemble {
            let anchors = ensemble_anchors(enc, &assembler)?;
            metrics.zero_shot_acc_ens = Some(zero_shot_accuracy(&image_embs, &classes, &anchors)?);
        }
    }
    if tasks.probe {
        let (train, test) = probe_split(&classes);
        let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
            (
                idx.iter().map(|&i| image_embs[i].clone()).collect(),
                idx.iter().map(|&i| classes[i]).collect(),
            )
        };
        let (tx, ty) = pick(&train);
        let (vx, vy) = pick(&test);
        let probe = train_probe(&tx, &ty, ckpt.num_classes(), &tasks.probe_config)?;
        metrics.probe_acc = Some(probe.accuracy(&vx, &vy));
    }
    if tasks.retrieval {
        let texts = enc.embed_texts(&caption_sequences(ckpt, set)?)?;
        let p = precision_at_k(&image_embs, &classes, &texts, &classes, &tasks.ks)?;
        metrics.p_at_k = Some(p);
    }
    Ok(metrics)
}

/// Image embeddings of `set`, their class ids and a 2-D PCA projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub embeddings: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
    pub pca: Pca2,
}

impl EmbeddingExport {
    /// `class_id,pc1,pc2,e0,...` with a header row.
    pub fn to_csv(&self) -> String {
        let width = self.embeddings.first().map_or(0, Vec::len);
        let mut out = String::from("class_id,pc1,pc2");
        for i in 0..width {
            let _ = write!(out, ",e{i}");
        }
        out.push('\n');
        for ((e, c), p) in self
            .embeddings
            .iter()
            .zip(&self.classes)
            .zip(&self.pca.projection)
        {
            let _ = write!(out, "{c},{},{}", p[0], p[1]);
            for v in e {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn export_embeddings(
    set: &EvalSet,
    ckpt: &Checkpoint,
    out: Option<&Path>,
) -> Result<EmbeddingExport> {
    if set.samples.len() < 2 {
        return Err(Error::Shape("export needs at least 2 samples".into()));
    }
    let images: Vec<&ImageFeature> = set.samples.iter().map(|s| &s.image).collect();
    let embeddings = ckpt.encoders.embed_images(&images)?;
    let pca = pca_2d(&embeddings)?;
    let export = EmbeddingExport {
        embeddings,
        classes: set.class_ids(),
        pca,
    };
    if let Some(path) = out {
        std::fs::write(path, export.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(export)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similar_anchor_wins() {
        let anchors = ClasswiseTextAnchors {
            per_class: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        };
        assert_eq!(classify_embedding(&[0.0, 0.0, 1.0], &anchors).unwrap(), 2);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let anchors = ClasswiseTextAnchors {
            per_class: vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]],
        };
        assert_eq!(classify_embedding(&[1.0, 0.0], &anchors).unwrap(), 1);
        let empty = ClasswiseTextAnchors { per_class: vec![] };
        assert!(classify_embedding(&[1.0], &empty).is_err());
    }

    #[test]
    fn symmetric_anchors_average_to_bisector() {
        let a = std::f64::consts::FRAC_PI_6;
        let embs = vec![vec![a.cos(), a.sin()], vec![a.cos(), -a.sin()]];
        let m = ensemble_mean(&embs, 0).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15);
        assert!(m[1].abs() < 1e-15);
    }

    #[test]
    fn single_and_identical_are_unchanged() {
        let v = vec![0.6, 0.8];
        assert_eq!(ensemble_mean(std::slice::from_ref(&v), 0).unwrap(), v);
        assert_eq!(
            ensemble_mean(&[v.clone(), v.clone(), v.clone()], 0).unwrap(),
            v
        );
    }

    #[test]
    fn antiparallel_anchors_are_degenerate() {
        let embs = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!(matches!(
            ensemble_mean(&embs, 4),
            Err(Error::DegenerateEnsemble(4))
        ));
    }

    #[test]
    fn probe_split_is_balanced() {
        let classes = [0, 0, 0, 0, 1, 1, 1, 1];
        let (train, test) = probe_split(&classes);
        assert_eq!(train, vec![0, 2, 4, 6]);
        assert_eq!(test, vec![1, 3, 5, 7]);
    }

    #[test]
    fn metrics_json_omits_absent_tasks() {
        let m = EvalMetrics {
            zero_shot_acc: Some(0.5),
            ..EvalMetrics::default()
        };
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"zero_shot_acc":0.5}"#
        );
    }
}
