use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetPair, Sample, Source};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    /// Pick a source with probability proportional to its size.
    Proportional,
    OnlyImageText,
    OnlyImageLabel,
}

impl std::str::FromStr for SamplingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proportional" => Ok(Self::Proportional),
            "only_image_text" => Ok(Self::OnlyImageText),
            "only_image_label" => Ok(Self::OnlyImageLabel),
            other => Err(Error::Config(format!("unknown sampling policy `{other}`"))),
        }
    }
}

impl SamplingPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Proportional => "proportional",
            Self::OnlyImageText => "only_image_text",
            Self::OnlyImageLabel => "only_image_label",
        }
    }
}

/// A source-homogeneous batch.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub source: Source,
    pub samples: Vec<&'a Sample>,
    /// Dataset indices of `samples`.
    pub indices: Vec<usize>,
    /// The source's epoch was exhausted and reshuffled to fill this batch.
    pub new_epoch: bool,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

/// Draws batches without replacement within an epoch, one cursor per source.
/// Holds private RNG state; use one sampler per training thread.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    policy: SamplingPolicy,
    batch_size: usize,
    text: EpochCursor,
    label: EpochCursor,
}

impl BatchSampler {
    pub fn new(
        datasets: &DatasetPair,
        batch_size: usize,
        policy: SamplingPolicy,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {batch_size}"
            )));
        }
        let needed: &[Source] = match policy {
            SamplingPolicy::OnlyImageText => &[Source::ImageText],
            SamplingPolicy::OnlyImageLabel => &[Source::ImageLabel],
            SamplingPolicy::Proportional => &[],
        };
        for &s in needed {
            if datasets.get(s).is_empty() {
                return Err(Error::Config(format!(
                    "policy {} needs a non-empty {} dataset",
                    policy.as_str(),
                    s.as_str()
                )));
            }
        }
        if datasets.image_text.is_empty() && datasets.image_label.is_empty() {
            return Err(Error::Config("both datasets are empty".into()));
        }
        for s in [Source::ImageText, Source::ImageLabel] {
            let n = datasets.get(s).len();
            if n > 0 && n < batch_size {
                return Err(Error::Config(format!(
                    "{} dataset has {n} samples, fewer than batch size {batch_size}",
                    s.as_str()
                )));
            }
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            policy,
            batch_size,
            text: EpochCursor::default(),
            label: EpochCursor::default(),
        })
    }

    fn choose_source(&mut self, datasets: &DatasetPair) -> Source {
        match self.policy {
            SamplingPolicy::OnlyImageText => Source::ImageText,
            SamplingPolicy::OnlyImageLabel => Source::ImageLabel,
            SamplingPolicy::Proportional => {
                let nt = datasets.image_text.len();
                let nl = datasets.image_label.len();
                if nt == 0 {
                    Source::ImageLabel
                } else if nl == 0 {
                    Source::ImageText
                } else if self.rng.random_range(0..nt + nl) < nl {
                    Source::ImageLabel
                } else {
                    Source::ImageText
                }
            }
        }
    }

    pub fn next_batch<'a>(&mut self, datasets: &'a DatasetPair) -> Batch<'a> {
        let source = self.choose_source(datasets);
        let dataset = datasets.get(source);
        let cursor = match source {
            Source::ImageText => &mut self.text,
            Source::ImageLabel => &mut self.label,
        };
        let mut new_epoch = false;
        if cursor.order.len() != dataset.len() || cursor.pos + self.batch_size > cursor.order.len()
        {
            // first use, or not enough left: start a fresh epoch
            new_epoch = !cursor.order.is_empty();
            if new_epoch {
                cursor.epoch += 1;
            }
            cursor.order = (0..dataset.len()).collect();
            cursor.order.shuffle(&mut self.rng);
            cursor.pos = 0;
        }
        let indices = cursor.order[cursor.pos..cursor.pos + self.batch_size].to_vec();
        cursor.pos += self.batch_size;
        Batch {
            source,
            samples: indices.iter().map(|&i| &dataset.samples[i]).collect(),
            indices,
            new_epoch,
        }
    }

    pub fn epoch(&self, source: Source) -> usize {
        match source {
            Source::ImageText => self.text.epoch,
            Source::ImageLabel => self.label.epoch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Caption, Dataset, ImageFeature, MultiHotLabel};
    use crate::prompt::Vocabulary;

    fn pair(nt: usize, nl: usize) -> DatasetPair {
        let v = Vocabulary::default();
        let img = || ImageFeature::new(vec![0.0]).unwrap();
        let text = (0..nt)
            .map(|i| Sample::image_text(img(), Caption::new(format!("r{i}"), &v)))
            .collect();
        let label = (0..nl)
            .map(|_| Sample::image_label(img(), MultiHotLabel::from_classes(2, &[0]).unwrap()))
            .collect();
        DatasetPair::new(
            Dataset::new(Source::ImageText, text).unwrap(),
            Dataset::new(Source::ImageLabel, label).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn proportional_source_frequency() {
        // 10,000 draws at p = 0.9: sd = sqrt(n p (1-p)) = 30
        let d = pair(100, 900);
        let mut s = BatchSampler::new(&d, 2, SamplingPolicy::Proportional, 11).unwrap();
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| s.next_batch(&d).source == Source::ImageLabel)
            .count() as f64;
        let sd = (n as f64 * 0.9 * 0.1).sqrt();
        assert!((hits - 9000.0).abs() < 3.0 * sd, "hits {hits}");
    }

    #[test]
    fn only_image_text_policy() {
        let d = pair(10, 90);
        let mut s = BatchSampler::new(&d, 4, SamplingPolicy::OnlyImageText, 0).unwrap();
        assert!((0..100).all(|_| s.next_batch(&d).source == Source::ImageText));
    }

    #[test]
    fn single_source_corpus() {
        let d = pair(0, 20);
        let mut s = BatchSampler::new(&d, 4, SamplingPolicy::Proportional, 0).unwrap();
        assert!((0..50).all(|_| s.next_batch(&d).source == Source::ImageLabel));
        assert!(BatchSampler::new(&d, 4, SamplingPolicy::OnlyImageText, 0).is_err());
    }

    #[test]
    fn epoch_touches_each_sample_once() {
        let d = pair(12, 0);
        let mut s = BatchSampler::new(&d, 4, SamplingPolicy::Proportional, 5).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(&d).indices).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        let b = s.next_batch(&d);
        assert!(b.new_epoch);
        assert_eq!(s.epoch(Source::ImageText), 1);
    }

    #[test]
    fn reshuffle_when_remainder_too_small() {
        let d = pair(10, 0);
        let mut s = BatchSampler::new(&d, 4, SamplingPolicy::Proportional, 5).unwrap();
        assert!(!s.next_batch(&d).new_epoch);
        assert!(!s.next_batch(&d).new_epoch);
        // 2 left < 4
        assert!(s.next_batch(&d).new_epoch);
    }

    #[test]
    fn rejects_batch_size_one() {
        let d = pair(10, 10);
        assert!(BatchSampler::new(&d, 1, SamplingPolicy::Proportional, 0).is_err());
        assert!(BatchSampler::new(&d, 11, SamplingPolicy::Proportional, 0).is_err());
    }
}
