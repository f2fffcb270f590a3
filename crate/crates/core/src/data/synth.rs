use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Caption, Dataset, EvalSample, EvalSet, ImageFeature, MultiHotLabel, Sample, Source};
use crate::error::{Error, Result};
use crate::prompt::{default_class_names, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// Image-label samples generated per class.
    pub samples_per_class: usize,
    /// Image-text samples generated per class.
    pub text_samples_per_class: usize,
    /// Held-out single-label samples per class.
    pub eval_samples_per_class: usize,
    pub image_dim: usize,
    /// Norm of each class centroid.
    pub sigma_between: f64,
    /// Expected norm of the within-class noise vector.
    pub sigma_within: f64,
    /// Probability a training sample carries a second class.
    pub p_overlap: f64,
    pub class_names: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 200,
            text_samples_per_class: 200,
            eval_samples_per_class: 100,
            image_dim: 64,
            sigma_between: 1.0,
            sigma_within: 0.35,
            p_overlap: 0.0,
            class_names: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn class_names(&self) -> Vec<String> {
        if self.class_names.is_empty() {
            default_class_names(self.num_classes)
        } else {
            self.class_names.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.samples_per_class == 0 && self.text_samples_per_class == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.image_dim == 0 {
            return Err(Error::Config("image_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_overlap) {
            return Err(Error::Config(format!(
                "p_overlap {} outside [0, 1]",
                self.p_overlap
            )));
        }
        if !(self.sigma_between > self.sigma_within && self.sigma_within >= 0.0) {
            return Err(Error::Config(
                "require sigma_between > sigma_within >= 0".into(),
            ));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Class assignment of one generated training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub source: Source,
    pub index: usize,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub image_text: Dataset,
    pub image_label: Dataset,
    pub eval: EvalSet,
    pub ground_truth: Vec<GroundTruth>,
    pub class_names: Vec<String>,
}

const REPORT_PATTERNS: &[&str] = &[
    "findings consistent with {class}",
    "there is evidence of {class} in the {loc}",
    "{sev} {class} is seen in the {loc}",
    "the study demonstrates {class}",
    "{class} noted, otherwise unremarkable",
];
const LOCATIONS: &[&str] = &[
    "left lower lobe",
    "right lower lobe",
    "right upper lobe",
    "lung bases",
    "retrocardiac region",
];
const SEVERITIES: &[&str] = &["mild", "moderate", "severe", "small", "large"];
const FILLERS: &[&str] = &[
    "no acute osseous abnormality",
    "comparison made with prior study",
    "lines and tubes unchanged",
    "patient rotated",
];

fn report(rng: &mut ChaCha8Rng, names: &[String], classes: &[usize]) -> String {
    let mention = classes
        .iter()
        .map(|&c| names[c].as_str())
        .collect::<Vec<_>>()
        .join(" and ");
    let mut text = REPORT_PATTERNS
        .choose(rng)
        .unwrap()
        .replace("{class}", &mention)
        .replace("{loc}", LOCATIONS.choose(rng).unwrap())
        .replace("{sev}", SEVERITIES.choose(rng).unwrap());
    if rng.random_bool(0.5) {
        text.push_str(". ");
        text.push_str(FILLERS.choose(rng).unwrap());
    }
    text
}

struct Generator {
    rng: ChaCha8Rng,
    centroids: Vec<Vec<f64>>,
    noise: Normal<f64>,
    k: usize,
    p_overlap: f64,
}

impl Generator {
    fn classes(&mut self, primary: usize, allow_overlap: bool) -> Vec<usize> {
        if allow_overlap && self.k >= 2 && self.rng.random_bool(self.p_overlap) {
            let other = (primary + 1 + self.rng.random_range(0..self.k - 1)) % self.k;
            vec![primary, other]
        } else {
            vec![primary]
        }
    }

    fn image(&mut self, classes: &[usize]) -> ImageFeature {
        let scale = 1.0 / (classes.len() as f64).sqrt();
        let dim = self.centroids[0].len();
        let values = (0..dim)
            .map(|d| {
                let centre: f64 = classes.iter().map(|&c| self.centroids[c][d]).sum();
                centre * scale + self.noise.sample(&mut self.rng)
            })
            .collect();
        ImageFeature { values }
    }
}

/// Generates both training sources and a held-out single-label evaluation
/// set. Pure function of `(config, seed)`.
pub fn generate_synthetic(
    config: &SynthConfig,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let centroids = (0..config.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..config.image_dim)
                .map(|_| std_normal.sample(&mut rng))
                .collect();
            let n = crate::linalg::norm(&v);
            v.iter().map(|x| x * config.sigma_between / n).collect()
        })
        .collect();
    let noise = Normal::new(0.0, config.sigma_within / (config.image_dim as f64).sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut g = Generator {
        rng,
        centroids,
        noise,
        k: config.num_classes,
        p_overlap: config.p_overlap,
    };
    let names = config.class_names();
    let mut ground_truth = Vec::new();

    let mut label_samples = Vec::new();
    for c in 0..config.num_classes {
        for _ in 0..config.samples_per_class {
            let classes = g.classes(c, true);
            let image = g.image(&classes);
            let label = MultiHotLabel::from_classes(config.num_classes, &classes)?;
            ground_truth.push(GroundTruth {
                source: Source::ImageLabel,
                index: label_samples.len(),
                classes,
            });
            label_samples.push(Sample::image_label(image, label));
        }
    }

    let mut text_samples = Vec::new();
    for c in 0..config.num_classes {
        for _ in 0..config.text_samples_per_class {
            let classes = g.classes(c, true);
            let image = g.image(&classes);
            let caption = Caption::new(report(&mut g.rng, &names, &classes), vocab);
            ground_truth.push(GroundTruth {
                source: Source::ImageText,
                index: text_samples.len(),
                classes,
            });
            text_samples.push(Sample::image_text(image, caption));
        }
    }

    let mut eval = Vec::new();
    for c in 0..config.num_classes {
        for _ in 0..config.eval_samples_per_class {
            let image = g.image(&[c]);
            let caption = Caption::new(report(&mut g.rng, &names, &[c]), vocab);
            eval.push(EvalSample {
                image,
                class_id: c,
                text: Some(caption),
            });
        }
    }

    Ok(SyntheticCorpus {
        image_text: Dataset::new(Source::ImageText, text_samples)?,
        image_label: Dataset::new(Source::ImageLabel, label_samples)?,
        eval: EvalSet { samples: eval },
        ground_truth,
        class_names: names,
    })
}
