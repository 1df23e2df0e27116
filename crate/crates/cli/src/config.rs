//! Task configuration, read from a TOML file.
//!
//! ```toml
//! seed = 0
//! label_space = ["ham", "spam"]
//!
//! [dataset]
//! path = "comments.csv"
//!
//! [backend]
//! kind = "mock"
//! model_id = "mock-lm"
//!
//! [[templates]]
//! template = "Is this comment spam? [[text]]"
//! answer_choices = ["Yes", "No"]
//!
//! [[voters]]
//! template = 0
//! calibrate = true
//! label_map = { Yes = "spam", No = "ham" }
//!
//! [label_model]
//! kind = "naive_bayes"
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use promptws::batching::BatchConfig;
use promptws::labelmodel::LabelModel;
use promptws::template::{Template, TemplateRecord};
use promptws::voter::{LabelMap, Matcher, Vote, VoterError};

#[derive(Debug, Error)]
pub struct ConfigError {
    pub path: PathBuf,
    /// 1-based line the error points at, when known.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{line}: {}", self.path.display(), self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default)]
    pub seed: u64,
    pub label_space: Spanned<Vec<String>>,
    pub dataset: DatasetConfig,
    pub backend: Spanned<BackendConfig>,
    #[serde(default)]
    pub batching: Option<Spanned<BatchingConfig>>,
    pub templates: Vec<Spanned<TemplateRecord>>,
    pub voters: Vec<Spanned<VoterConfig>>,
    pub label_model: Spanned<LabelModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    /// Defaults to the file extension.
    #[serde(default)]
    pub format: Option<DatasetFormat>,
    #[serde(default)]
    pub image_column: Option<String>,
    /// Keep this fraction of rows, chosen with the run seed.
    #[serde(default)]
    pub sample_fraction: Option<Spanned<f64>>,
}

impl DatasetConfig {
    pub fn format(&self) -> DatasetFormat {
        match (self.format, self.path.extension().and_then(|e| e.to_str())) {
            (Some(f), _) => f,
            (None, Some(ext)) if ext.eq_ignore_ascii_case("json") => DatasetFormat::Json,
            _ => DatasetFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
    Remote,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub model_id: Option<String>,
    /// Completion URL (http) or `host:port` (remote).
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Canned answers for the mock backend.
    #[serde(default)]
    pub completions: Option<Vec<String>>,
    /// Environment variable holding a bearer token (http).
    #[serde(default)]
    pub auth_token_env: Option<String>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchingConfig {
    #[serde(default = "default_budget")]
    pub token_budget: usize,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_budget() -> usize {
    BatchConfig::default().token_budget
}

fn default_max_batch() -> usize {
    BatchConfig::default().max_batch
}

fn default_workers() -> usize {
    BatchConfig::default().workers
}

impl From<BatchingConfig> for BatchConfig {
    fn from(b: BatchingConfig) -> Self {
        BatchConfig { token_budget: b.token_budget, max_batch: b.max_batch, workers: b.workers }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherKind {
    #[default]
    Exact,
    Uncased,
    Prefix,
}

impl From<MatcherKind> for Matcher {
    fn from(m: MatcherKind) -> Self {
        match m {
            MatcherKind::Exact => Matcher::Exact,
            MatcherKind::Uncased => Matcher::Uncased,
            MatcherKind::Prefix => Matcher::Prefix,
        }
    }
}

/// A class name, or a list of names for a partial-label vote.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LabelTarget {
    One(String),
    Many(Vec<String>),
}

impl LabelTarget {
    fn names(&self) -> &[String] {
        match self {
            LabelTarget::One(n) => std::slice::from_ref(n),
            LabelTarget::Many(ns) => ns,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoterConfig {
    /// Column name in votes.csv; defaults to the voter's position.
    #[serde(default)]
    pub name: Option<String>,
    /// Index into `templates`.
    pub template: Spanned<usize>,
    pub label_map: IndexMap<String, Spanned<LabelTarget>>,
    #[serde(default)]
    pub matcher: MatcherKind,
    #[serde(default)]
    pub calibrate: bool,
    /// Content-free inputs for calibration.
    #[serde(default)]
    pub content_free: Option<Vec<String>>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl TaskConfig {
    pub fn load(path: &Path) -> Result<(TaskConfig, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            message: e.to_string(),
        })?;
        let config = TaskConfig::parse(&text, path)?;
        Ok((config, text))
    }

    /// Parses and validates. `path` is used in error messages only.
    pub fn parse(text: &str, path: &Path) -> Result<TaskConfig, ConfigError> {
        let config: TaskConfig = toml::from_str(text).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        config.validate().map_err(|(offset, message)| ConfigError {
            path: path.to_path_buf(),
            line: Some(line_of(text, offset)),
            message,
        })?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), (usize, String)> {
        let labels = &self.label_space;
        let at = |s: std::ops::Range<usize>| s.start;
        if labels.get_ref().is_empty() {
            return Err((at(labels.span()), "label_space is empty".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = labels.get_ref().iter().find(|l| !seen.insert(*l)) {
            return Err((at(labels.span()), format!("label_space lists {dup:?} twice")));
        }

        let backend = self.backend.get_ref();
        let needs = |field: &str| (at(self.backend.span()), format!("{:?} backend needs `{field}`", backend.kind));
        match backend.kind {
            BackendKind::Mock | BackendKind::Http if backend.model_id.is_none() => return Err(needs("model_id")),
            BackendKind::Http | BackendKind::Remote if backend.endpoint.is_none() => return Err(needs("endpoint")),
            _ => {}
        }
        if backend.completions.is_some() && backend.kind != BackendKind::Mock {
            return Err((at(self.backend.span()), "`completions` only applies to the mock backend".into()));
        }

        if let Some(b) = &self.batching {
            BatchConfig::from(*b.get_ref()).validate().map_err(|e| (at(b.span()), e.to_string()))?;
        }
        if let Some(f) = &self.dataset.sample_fraction {
            if !(*f.get_ref() > 0.0 && *f.get_ref() <= 1.0) {
                return Err((at(f.span()), "sample_fraction must be in (0, 1]".into()));
            }
        }

        if self.templates.is_empty() {
            return Err((0, "no [[templates]] given".into()));
        }
        for t in &self.templates {
            Template::try_from(t.get_ref()).map_err(|e| (at(t.span()), format!("bad template: {e}")))?;
        }
        if self.voters.is_empty() {
            return Err((0, "no [[voters]] given".into()));
        }
        let mut names = HashSet::new();
        for (j, v) in self.voters.iter().enumerate() {
            let voter = v.get_ref();
            let t = *voter.template.get_ref();
            let Some(record) = self.templates.get(t) else {
                return Err((
                    at(voter.template.span()),
                    format!("voter {j}: template index {t} is out of range (have {})", self.templates.len()),
                ));
            };
            if voter.calibrate && (record.get_ref().answer_choices.is_none() || record.get_ref().slots.is_some()) {
                return Err((at(v.span()), format!("voter {j}: calibration needs a template with answer_choices")));
            }
            if voter.label_map.is_empty() {
                return Err((at(v.span()), format!("voter {j}: label_map is empty")));
            }
            for target in voter.label_map.values() {
                for name in target.get_ref().names() {
                    if !labels.get_ref().contains(name) {
                        return Err((at(target.span()), format!("voter {j}: {name:?} is not in label_space")));
                    }
                }
                if target.get_ref().names().is_empty() {
                    return Err((at(target.span()), format!("voter {j}: empty class list")));
                }
            }
            if !names.insert(self.lf_name(j)) {
                return Err((at(v.span()), format!("voter {j}: duplicate name {:?}", self.lf_name(j))));
            }
        }

        if let LabelModel::Triplet { class_balance } = self.label_model.get_ref() {
            if labels.get_ref().len() != 2 {
                return Err((at(self.label_model.span()), "the triplet model needs exactly 2 classes".into()));
            }
            if !(*class_balance > 0.0 && *class_balance < 1.0) {
                return Err((at(self.label_model.span()), "class_balance must be in (0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> u32 {
        self.label_space.get_ref().len() as u32
    }

    pub fn class_names(&self) -> &[String] {
        self.label_space.get_ref()
    }

    /// 1-based class id of a label name.
    pub fn class_id(&self, name: &str) -> Option<u32> {
        self.class_names().iter().position(|c| c == name).map(|i| i as u32 + 1)
    }

    pub fn lf_name(&self, j: usize) -> String {
        self.voters[j].get_ref().name.clone().unwrap_or_else(|| j.to_string())
    }

    pub fn lf_names(&self) -> Vec<String> {
        (0..self.voters.len()).map(|j| self.lf_name(j)).collect()
    }

    pub fn label_map(&self, j: usize) -> Result<LabelMap, VoterError> {
        let entries = self.voters[j]
            .get_ref()
            .label_map
            .iter()
            .map(|(answer, target)| {
                let ids = target.get_ref().names().iter().map(|n| self.class_id(n).expect("validated"));
                Ok((answer.clone(), Vote::set(ids)?))
            })
            .collect::<Result<Vec<_>, VoterError>>()?;
        LabelMap::new(entries, self.k())
    }

    pub fn batch_config(&self) -> BatchConfig {
        self.batching.as_ref().map(|b| BatchConfig::from(*b.get_ref())).unwrap_or_default()
    }

    pub fn label_model(&self) -> &LabelModel {
        self.label_model.get_ref()
    }

    pub fn backend(&self) -> &BackendConfig {
        self.backend.get_ref()
    }
}
