use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Caption, DataSpec, Dataset, EvalSample, EvalSet, ImageFeature, MultiHotLabel, Sample, Source,
};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRecord {
    image: Vec<f64>,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    image: Vec<f64>,
    label: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRecord {
    image: Vec<f64>,
    class: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    text: Option<String>,
}

fn for_each_record<F>(path: &Path, mut f: F) -> Result<()>
where
    F: FnMut(usize, &str) -> std::result::Result<(), String>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, &line).map_err(|reason| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        })?;
    }
    Ok(())
}

fn image(values: Vec<f64>, spec: &DataSpec) -> std::result::Result<ImageFeature, String> {
    if values.len() != spec.image_dim {
        return Err(format!(
            "image has {} values, expected {}",
            values.len(),
            spec.image_dim
        ));
    }
    ImageFeature::new(values).map_err(|e| e.to_string())
}

fn caption(text: String, spec: &DataSpec) -> std::result::Result<Caption, String> {
    let caption = Caption::new(text, &spec.vocab);
    spec.vocab
        .validate(&caption.tokens)
        .map_err(|e| e.to_string())?;
    Ok(caption)
}

fn label(bits: Vec<u8>, spec: &DataSpec) -> std::result::Result<MultiHotLabel, String> {
    if bits.len() != spec.num_classes {
        return Err(format!(
            "label has length {}, expected {}",
            bits.len(),
            spec.num_classes
        ));
    }
    let bits = bits
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(format!("label entry {other} is not 0 or 1")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    MultiHotLabel::new(bits).map_err(|e| e.to_string())
}

/// Reads a JSONL dataset, validating every record against `spec`.
pub fn load_dataset(path: impl AsRef<Path>, schema: Source, spec: &DataSpec) -> Result<Dataset> {
    let path = path.as_ref();
    let mut samples = Vec::new();
    for_each_record(path, |_, line| {
        let sample = match schema {
            Source::ImageText => {
                let r: TextRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
                Sample::image_text(image(r.image, spec)?, caption(r.text, spec)?)
            }
            Source::ImageLabel => {
                let r: LabelRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
                Sample::image_label(image(r.image, spec)?, label(r.label, spec)?)
            }
        };
        samples.push(sample);
        Ok(())
    })?;
    Dataset::new(schema, samples)
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, s) in dataset.samples.iter().enumerate() {
        let line = match dataset.source {
            Source::ImageText => serde_json::to_string(&TextRecord {
                image: s.image.values.clone(),
                text: s
                    .text
                    .as_ref()
                    .ok_or_else(|| Error::Shape(format!("sample {i} has no text")))?
                    .raw
                    .clone(),
            })?,
            Source::ImageLabel => serde_json::to_string(&LabelRecord {
                image: s.image.values.clone(),
                label: s
                    .label
                    .as_ref()
                    .ok_or_else(|| Error::Shape(format!("sample {i} has no label")))?
                    .bits()
                    .iter()
                    .map(|b| u8::from(*b))
                    .collect(),
            })?,
        };
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads single-label evaluation data: `{"image": [...], "class": c, "text": "..."}`
/// with `text` optional.
pub fn load_eval_set(path: impl AsRef<Path>, spec: &DataSpec) -> Result<EvalSet> {
    let path = path.as_ref();
    let mut samples = Vec::new();
    for_each_record(path, |_, line| {
        let r: EvalRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if r.class >= spec.num_classes {
            return Err(format!(
                "class {} out of range for {} classes",
                r.class, spec.num_classes
            ));
        }
        samples.push(EvalSample {
            image: image(r.image, spec)?,
            class_id: r.class,
            text: r.text.map(|t| caption(t, spec)).transpose()?,
        });
        Ok(())
    })?;
    Ok(EvalSet { samples })
}

pub fn write_eval_set(path: impl AsRef<Path>, set: &EvalSet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &set.samples {
        let line = serde_json::to_string(&EvalRecord {
            image: s.image.values.clone(),
            class: s.class_id,
            text: s.text.as_ref().map(|c| c.raw.clone()),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
