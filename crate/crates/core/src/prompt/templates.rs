use std::path::Path;

use crate::error::{Error, Result};

const DEFAULT_TEMPLATES: &str = include_str!("../../data/templates.tsv");

const CHEXPERT_CLASSES: [&str; 14] = [
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "edema",
    "pleural effusion",
    "no finding",
    "enlarged cardiomediastinum",
    "lung opacity",
    "lung lesion",
    "pneumonia",
    "pneumothorax",
    "pleural other",
    "fracture",
    "support devices",
];

const GENERIC_TEMPLATES: [&str; 3] = [
    "mild {class} is present",
    "{class} at the right base",
    "findings of {class}",
];

/// The first `k` names of the built-in class list; classes beyond it are
/// named `finding N`.
pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|c| {
            CHEXPERT_CLASSES
                .get(c)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("finding {c}"))
        })
        .collect()
}

/// Per-class discrete descriptions, already substituted with class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteTemplateRegistry {
    class_names: Vec<String>,
    templates: Vec<Vec<String>>,
}

impl DiscreteTemplateRegistry {
    pub fn new(class_names: Vec<String>, templates: Vec<Vec<String>>) -> Result<Self> {
        if class_names.len() != templates.len() {
            return Err(Error::Config(format!(
                "{} class names but templates for {} classes",
                class_names.len(),
                templates.len()
            )));
        }
        if let Some(c) = templates.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("class {c} has no templates")));
        }
        Ok(Self {
            class_names,
            templates,
        })
    }

    /// Parses `class_id<TAB>sentence` lines, substituting `{class}`.
    pub fn parse(text: &str, class_names: &[String]) -> Result<Self> {
        let k = class_names.len();
        let mut templates = vec![Vec::new(); k];
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| Error::Parse {
                path: "<templates>".into(),
                line: i + 1,
                reason,
            };
            let (id, sentence) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected class_id<TAB>template".into()))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad class id `{id}`")))?;
            if id >= k {
                // registries may carry more classes than a run uses
                continue;
            }
            templates[id].push(sentence.trim().replace("{class}", &class_names[id]));
        }
        Self::new(class_names.to_vec(), templates)
    }

    pub fn load(path: impl AsRef<Path>, class_names: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, class_names).map_err(|e| match e {
            Error::Parse { line, reason, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                reason,
            },
            other => other,
        })
    }

    /// Shipped templates; classes without shipped lines get generic ones.
    pub fn builtin(class_names: &[String]) -> Self {
        let k = class_names.len();
        let mut templates = vec![Vec::new(); k];
        for line in DEFAULT_TEMPLATES.lines() {
            if let Some((id, sentence)) = line.split_once('\t') {
                let id: usize = id.parse().expect("shipped template ids are integers");
                if id < k {
                    templates[id].push(sentence.replace("{class}", &class_names[id]));
                }
            }
        }
        for (c, t) in templates.iter_mut().enumerate() {
            if t.is_empty() {
                t.extend(
                    GENERIC_TEMPLATES
                        .iter()
                        .map(|g| g.replace("{class}", &class_names[c])),
                );
            }
        }
        Self {
            class_names: class_names.to_vec(),
            templates,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_name(&self, class_id: usize) -> &str {
        &self.class_names[class_id]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn templates(&self, class_id: usize) -> &[String] {
        &self.templates[class_id]
    }
}
