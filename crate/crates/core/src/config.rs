//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! consumed by the reader; anything left over is rejected as unknown, so a
//! typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{
    generate_synthetic, load_dataset, load_eval_set, DatasetPair, EvalSet, Source, SynthConfig,
};
use crate::error::{Error, Result};
use crate::prompt::{default_class_names, DiscreteTemplateRegistry};
use crate::training::TrainConfig;

/// Parsed key/value pairs with the line each came from.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                path: path.clone(),
                line: i + 1,
                reason,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(parse_err("empty key".into()));
            }
            if entries
                .insert(k.to_string(), (v.to_string(), i + 1))
                .is_some()
            {
                return Err(parse_err(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self { path, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Pairs given inline, e.g. the deltas of an ablation cell.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut kv = Self::default();
        for (k, v) in pairs {
            if kv
                .entries
                .insert(k.to_string(), (v.to_string(), 0))
                .is_some()
            {
                return Err(Error::Config(format!("duplicate key `{k}`")));
            }
        }
        Ok(kv)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Removes and returns the raw value of `key`.
    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    /// Removes `key` and parses its value.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let Some((v, line)) = self.entries.remove(key) else {
            return Ok(None);
        };
        v.parse::<T>().map(Some).map_err(|e| Error::Parse {
            path: self.path.clone(),
            line,
            reason: format!("bad value `{v}` for `{key}`: {e}"),
        })
    }

    /// Overwrites `slot` if `key` is present.
    pub fn set<T>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Keys starting with `prefix`, removed and returned with the prefix
    /// stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> KeyValues {
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = KeyValues {
            path: self.path.clone(),
            entries: BTreeMap::new(),
        };
        for k in keys {
            let v = self.entries.remove(&k).expect("key listed above");
            out.entries.insert(k[prefix.len()..].to_string(), v);
        }
        out
    }

    /// Fails on the earliest (by line) key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (_, line))| *line) {
            Some((k, _)) => Err(Error::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "steps",
    "lr",
    "warmup_fraction",
    "batch_size",
    "context_len",
    "num_classes",
    "embed_dim",
    "image_dim",
    "token_dim",
    "hidden_dim",
    "vocab_size",
    "max_len",
    "vocab_seed",
    "seed",
    "loss",
    "symmetric_loss",
    "temperature",
    "policy",
    "log_every",
];

/// Applies any training keys present in `kv` on top of `config`.
pub fn apply_train_keys(config: &mut TrainConfig, kv: &mut KeyValues) -> Result<()> {
    kv.set("steps", &mut config.steps)?;
    kv.set("lr", &mut config.lr)?;
    kv.set("warmup_fraction", &mut config.warmup_fraction)?;
    kv.set("batch_size", &mut config.batch_size)?;
    kv.set("context_len", &mut config.context_len)?;
    kv.set("num_classes", &mut config.num_classes)?;
    kv.set("embed_dim", &mut config.embed_dim)?;
    kv.set("image_dim", &mut config.image_dim)?;
    kv.set("token_dim", &mut config.token_dim)?;
    kv.set("hidden_dim", &mut config.hidden_dim)?;
    kv.set("vocab_size", &mut config.vocab_size)?;
    kv.set("max_len", &mut config.max_len)?;
    kv.set("vocab_seed", &mut config.vocab_seed)?;
    kv.set("seed", &mut config.seed)?;
    kv.set("loss", &mut config.loss)?;
    kv.set("symmetric_loss", &mut config.symmetric_loss)?;
    kv.set("temperature", &mut config.temperature)?;
    kv.set("policy", &mut config.policy)?;
    kv.set("log_every", &mut config.log_every)?;
    Ok(())
}

/// Every training key, in [`TRAIN_KEYS`] order.
pub fn train_to_kv(c: &TrainConfig) -> String {
    let values: [String; 19] = [
        c.steps.to_string(),
        c.lr.to_string(),
        c.warmup_fraction.to_string(),
        c.batch_size.to_string(),
        c.context_len.to_string(),
        c.num_classes.to_string(),
        c.embed_dim.to_string(),
        c.image_dim.to_string(),
        c.token_dim.to_string(),
        c.hidden_dim.to_string(),
        c.vocab_size.to_string(),
        c.max_len.to_string(),
        c.vocab_seed.to_string(),
        c.seed.to_string(),
        c.loss.as_str().to_string(),
        c.symmetric_loss.to_string(),
        c.temperature.to_string(),
        c.policy.as_str().to_string(),
        c.log_every.to_string(),
    ];
    let mut out = String::new();
    for (k, v) in TRAIN_KEYS.iter().zip(values) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut kv = KeyValues::parse(text, "<inline>")?;
    let mut config = TrainConfig::default();
    apply_train_keys(&mut config, &mut kv)?;
    kv.finish()?;
    config.validate()?;
    Ok(config)
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// Synthetic generator settings plus the generator seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub config: SynthConfig,
    pub seed: u64,
}

pub const SYNTH_KEYS: &[&str] = &[
    "num_classes",
    "samples_per_class",
    "text_samples_per_class",
    "eval_samples_per_class",
    "image_dim",
    "sigma_between",
    "sigma_within",
    "p_overlap",
    "class_names",
    "seed",
];

impl SynthSpec {
    pub fn from_kv(kv: &mut KeyValues, base: SynthConfig) -> Result<Self> {
        let mut c = base;
        kv.set("num_classes", &mut c.num_classes)?;
        kv.set("samples_per_class", &mut c.samples_per_class)?;
        kv.set("text_samples_per_class", &mut c.text_samples_per_class)?;
        kv.set("eval_samples_per_class", &mut c.eval_samples_per_class)?;
        kv.set("image_dim", &mut c.image_dim)?;
        kv.set("sigma_between", &mut c.sigma_between)?;
        kv.set("sigma_within", &mut c.sigma_within)?;
        kv.set("p_overlap", &mut c.p_overlap)?;
        if let Some(names) = kv.take_raw("class_names") {
            c.class_names = split_list(&names);
        }
        let seed = kv.take("seed")?.unwrap_or(0);
        Ok(Self { config: c, seed })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let spec = Self::from_kv(&mut kv, SynthConfig::default())?;
        kv.finish()?;
        Ok(spec)
    }

    pub fn to_kv(&self, prefix: &str) -> String {
        let c = &self.config;
        let values = [
            c.num_classes.to_string(),
            c.samples_per_class.to_string(),
            c.text_samples_per_class.to_string(),
            c.eval_samples_per_class.to_string(),
            c.image_dim.to_string(),
            c.sigma_between.to_string(),
            c.sigma_within.to_string(),
            c.p_overlap.to_string(),
            c.class_names.join(","),
            self.seed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in SYNTH_KEYS.iter().zip(values) {
            if k == &"class_names" && v.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{prefix}{k} = {v}");
        }
        out
    }
}

/// Where a run's training and evaluation data come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSourceConfig {
    Files {
        image_text: Option<PathBuf>,
        image_label: Option<PathBuf>,
        eval: Option<PathBuf>,
    },
    Synthetic(SynthSpec),
}

/// Everything `train` needs: the optimisation config, the data, and the
/// prompt templates.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSourceConfig,
    pub templates: Option<PathBuf>,
    pub class_names: Vec<String>,
}

/// Data and templates materialised from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct RunData {
    pub datasets: DatasetPair,
    pub eval: Option<EvalSet>,
    pub registry: DiscreteTemplateRegistry,
}

impl RunConfig {
    /// Synthetic data sized to match `train`.
    pub fn synthetic(train: TrainConfig, synth: SynthConfig, synth_seed: u64) -> Self {
        let synth = SynthConfig {
            num_classes: train.num_classes,
            image_dim: train.image_dim,
            ..synth
        };
        Self {
            train,
            data: DataSourceConfig::Synthetic(SynthSpec {
                config: synth,
                seed: synth_seed,
            }),
            templates: None,
            class_names: Vec::new(),
        }
    }

    /// Relative data paths are resolved against `base_dir`.
    pub fn from_kv(kv: &mut KeyValues, base_dir: &Path) -> Result<Self> {
        let mut train = TrainConfig::default();
        apply_train_keys(&mut train, kv)?;
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let image_text = kv.take_raw("data.image_text").map(resolve);
        let image_label = kv.take_raw("data.image_label").map(resolve);
        let eval = kv.take_raw("data.eval").map(resolve);
        let templates = kv.take_raw("templates").map(resolve);
        let class_names = kv
            .take_raw("class_names")
            .map(|v| split_list(&v))
            .unwrap_or_default();

        let mut synth_kv = kv.take_prefixed("synth.");
        let data = if synth_kv.is_empty() {
            if image_text.is_none() && image_label.is_none() {
                return Err(Error::Config(
                    "no training data: set data.image_text / data.image_label or synth.* keys"
                        .into(),
                ));
            }
            DataSourceConfig::Files {
                image_text,
                image_label,
                eval,
            }
        } else {
            if image_text.is_some() || image_label.is_some() || eval.is_some() {
                return Err(Error::Config(
                    "data.* files and synth.* keys are exclusive".into(),
                ));
            }
            let base = SynthConfig {
                num_classes: train.num_classes,
                image_dim: train.image_dim,
                ..SynthConfig::default()
            };
            let spec = SynthSpec::from_kv(&mut synth_kv, base)?;
            if let Err(Error::UnknownKey(k)) = synth_kv.finish() {
                return Err(Error::UnknownKey(format!("synth.{k}")));
            }
            DataSourceConfig::Synthetic(spec)
        };
        let config = Self {
            train,
            data,
            templates,
            class_names,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut kv = KeyValues::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let config = Self::from_kv(&mut kv, base)?;
        kv.finish()?;
        Ok(config)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text, "<inline>")?;
        let config = Self::from_kv(&mut kv, base_dir)?;
        kv.finish()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataSourceConfig::Synthetic(s) = &self.data {
            if s.config.num_classes != self.train.num_classes
                || s.config.image_dim != self.train.image_dim
            {
                return Err(Error::Config(format!(
                    "synthetic data ({} classes, dim {}) does not match the model ({} classes, dim {})",
                    s.config.num_classes,
                    s.config.image_dim,
                    self.train.num_classes,
                    self.train.image_dim
                )));
            }
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.train.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.train.num_classes
            )));
        }
        Ok(())
    }

    /// Class names: explicit, else the synthetic ones, else the defaults.
    pub fn class_names(&self) -> Vec<String> {
        if !self.class_names.is_empty() {
            return self.class_names.clone();
        }
        match &self.data {
            DataSourceConfig::Synthetic(s) => s.config.class_names(),
            DataSourceConfig::Files { .. } => default_class_names(self.train.num_classes),
        }
    }

    /// Snapshot from which the run can be replayed. Paths are written
    /// absolute when possible.
    pub fn to_kv(&self) -> String {
        let mut out = train_to_kv(&self.train);
        let path_line = |out: &mut String, k: &str, p: &Option<PathBuf>| {
            if let Some(p) = p {
                let p = std::fs::canonicalize(p).unwrap_or_else(|_| p.clone());
                let _ = writeln!(out, "{k} = {}", p.display());
            }
        };
        path_line(&mut out, "templates", &self.templates);
        if !self.class_names.is_empty() {
            let _ = writeln!(out, "class_names = {}", self.class_names.join(","));
        }
        match &self.data {
            DataSourceConfig::Files {
                image_text,
                image_label,
                eval,
            } => {
                path_line(&mut out, "data.image_text", image_text);
                path_line(&mut out, "data.image_label", image_label);
                path_line(&mut out, "data.eval", eval);
            }
            DataSourceConfig::Synthetic(s) => out.push_str(&s.to_kv("synth.")),
        }
        out
    }

    pub fn load_data(&self) -> Result<RunData> {
        let names = self.class_names();
        let registry = match &self.templates {
            Some(p) => DiscreteTemplateRegistry::load(p, &names)?,
            None => DiscreteTemplateRegistry::builtin(&names),
        };
        let vocab = self.train.vocab();
        let (datasets, eval) = match &self.data {
            DataSourceConfig::Synthetic(s) => {
                let corpus = generate_synthetic(&s.config, s.seed, &vocab)?;
                (
                    DatasetPair::new(corpus.image_text, corpus.image_label)?,
                    Some(corpus.eval),
                )
            }
            DataSourceConfig::Files {
                image_text,
                image_label,
                eval,
            } => {
                let spec = self.train.data_spec();
                let load = |p: &Option<PathBuf>, src: Source| match p {
                    Some(p) => load_dataset(p, src, &spec),
                    None => Ok(crate::data::Dataset::empty(src)),
                };
                let datasets = DatasetPair::new(
                    load(image_text, Source::ImageText)?,
                    load(image_label, Source::ImageLabel)?,
                )?;
                let eval = eval.as_ref().map(|p| load_eval_set(p, &spec)).transpose()?;
                (datasets, eval)
            }
        };
        Ok(RunData {
            datasets,
            eval,
            registry,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::LossKind;

    #[test]
    fn comments_blanks_and_spacing() {
        let kv = KeyValues::parse("# header\n\n lr=0.5 \nsteps =  10\n", "x").unwrap();
        assert!(kv.contains("lr") && kv.contains("steps"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_train_config("lr = 1e-3\nlrr = 1e-4\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "lrr"), "{err}");
        assert!(err.to_string().contains("lrr"));
    }

    #[test]
    fn bad_value_reports_line() {
        let err = parse_train_config("steps = 10\nbatch_size = many\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines() {
        assert!(KeyValues::parse("a = 1\na = 2\n", "x").is_err());
        assert!(KeyValues::parse("just words\n", "x").is_err());
        assert!(KeyValues::parse(" = 3\n", "x").is_err());
    }

    #[test]
    fn train_snapshot_round_trips() {
        let c = TrainConfig {
            lr: 3.3e-4,
            loss: LossKind::HardInfoNce,
            policy: crate::data::SamplingPolicy::OnlyImageText,
            symmetric_loss: true,
            warmup_fraction: 0.1 + 0.2,
            ..TrainConfig::default()
        };
        assert_eq!(parse_train_config(&train_to_kv(&c)).unwrap(), c);
    }

    #[test]
    fn run_config_synth_round_trips() {
        let text =
            "steps = 20\nnum_classes = 3\nimage_dim = 8\nsynth.p_overlap = 0.3\nsynth.seed = 9\n";
        let rc = RunConfig::parse(text, Path::new(".")).unwrap();
        let DataSourceConfig::Synthetic(s) = &rc.data else {
            panic!("expected synthetic data")
        };
        assert_eq!(
            (s.config.num_classes, s.config.image_dim, s.seed),
            (3, 8, 9)
        );
        assert_eq!(RunConfig::parse(&rc.to_kv(), Path::new(".")).unwrap(), rc);
    }

    #[test]
    fn unknown_synth_key_keeps_prefix() {
        let err = RunConfig::parse("synth.p_overlapp = 0.3\n", Path::new(".")).unwrap_err();
        assert!(
            matches!(&err, Error::UnknownKey(k) if k == "synth.p_overlapp"),
            "{err}"
        );
    }

    #[test]
    fn files_and_synth_are_exclusive() {
        let text = "data.image_text = a.jsonl\nsynth.seed = 1\n";
        assert!(matches!(
            RunConfig::parse(text, Path::new(".")),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::parse("steps = 3\n", Path::new(".")).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let rc = RunConfig::parse("data.image_label = l.jsonl\n", Path::new("/tmp/run")).unwrap();
        match rc.data {
            DataSourceConfig::Files { image_label, .. } => {
                assert_eq!(image_label.unwrap(), PathBuf::from("/tmp/run/l.jsonl"))
            }
            _ => panic!("expected files"),
        }
    }
}
