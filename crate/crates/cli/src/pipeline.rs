//! The labeling run: dataset → templates → queries → voters → label model.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

use promptws::backend::{Backend, HttpBackend, HttpConfig, MockBackend};
use promptws::batching::LocalEngine;
use promptws::cache::ResponseCache;
use promptws::canonical;
use promptws::client::{Client, ClientError, ClientStats, Engine};
use promptws::dataset::{self, ColumnKind, Dataset};
use promptws::labelmodel::ProbLabels;
use promptws::query::{Query, Response};
use promptws::serving::{RemoteConfig, RemoteEngine};
use promptws::template::{Template, TemplateError};
use promptws::voter::{build_vote_matrix, VoteMatrix, Voter, VoterError, DEFAULT_CONTENT_FREE};

use crate::config::{BackendKind, DatasetFormat, TaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Backend,
    Dataset,
    Template,
    Inference,
    Calibration,
    Voting,
    LabelModel,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Backend => "backend",
            Stage::Dataset => "dataset",
            Stage::Template => "template",
            Stage::Inference => "inference",
            Stage::Calibration => "calibration",
            Stage::Voting => "voting",
            Stage::LabelModel => "label model",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, Error)]
pub struct PipelineError {
    pub stage: Stage,
    pub row: Option<usize>,
    pub message: String,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.row {
            Some(row) => write!(f, "{} stage failed at row {row}: {}", self.stage, self.message),
            None => write!(f, "{} stage failed: {}", self.stage, self.message),
        }
    }
}

impl PipelineError {
    fn new(stage: Stage, message: impl fmt::Display) -> Self {
        PipelineError { stage, row: None, message: message.to_string() }
    }

    fn at(stage: Stage, row: usize, message: impl fmt::Display) -> Self {
        PipelineError { stage, row: Some(row), message: message.to_string() }
    }
}

pub struct LabelRun {
    pub probs: ProbLabels,
    pub votes: VoteMatrix,
    pub lf_names: Vec<String>,
    pub class_names: Vec<String>,
    pub model_id: String,
    pub stats: ClientStats,
}

/// Builds the engine named in the config.
pub fn build_engine(config: &TaskConfig) -> Result<Box<dyn Engine>, PipelineError> {
    let b = config.backend();
    let local = |backend: Arc<dyn Backend>| -> Result<Box<dyn Engine>, PipelineError> {
        let engine =
            LocalEngine::try_new(backend, config.batch_config()).map_err(|e| PipelineError::new(Stage::Backend, e))?;
        Ok(Box::new(engine))
    };
    match b.kind {
        BackendKind::Mock => {
            let mut mock = MockBackend::new(b.model_id.clone().expect("validated"));
            if let Some(c) = &b.completions {
                mock = mock.with_completions(c.clone());
            }
            local(Arc::new(mock))
        }
        BackendKind::Http => {
            let mut http =
                HttpConfig::new(b.endpoint.clone().expect("validated"), b.model_id.clone().expect("validated"));
            if let Some(var) = &b.auth_token_env {
                http.auth_token = Some(std::env::var(var).map_err(|_| {
                    PipelineError::new(Stage::Backend, format!("environment variable {var} is not set"))
                })?);
            }
            local(Arc::new(HttpBackend::new(http)))
        }
        BackendKind::Remote => {
            let remote = RemoteEngine::connect(RemoteConfig::new(b.endpoint.clone().expect("validated")))
                .map_err(|e| PipelineError::new(Stage::Backend, e))?;
            Ok(Box::new(remote))
        }
    }
}

/// Opens the response cache at `path`, or an in-memory one.
pub fn open_cache(path: Option<&Path>) -> Result<ResponseCache, PipelineError> {
    match path {
        Some(p) => {
            ResponseCache::open(p).map_err(|e| PipelineError::new(Stage::Backend, format!("{}: {e}", p.display())))
        }
        None => Ok(ResponseCache::in_memory()),
    }
}

pub fn load_dataset(config: &TaskConfig, base_dir: &Path) -> Result<Dataset, PipelineError> {
    let d = &config.dataset;
    let path: PathBuf = if d.path.is_absolute() { d.path.clone() } else { base_dir.join(&d.path) };
    let err = |e: dataset::DatasetError| PipelineError::new(Stage::Dataset, format!("{}: {e}", path.display()));
    let mut data = match d.format() {
        DatasetFormat::Csv => {
            let hints: Option<HashMap<String, ColumnKind>> =
                d.image_column.as_ref().map(|c| HashMap::from([(c.clone(), ColumnKind::ImageRef)]));
            dataset::load_csv(&path, hints.as_ref()).map_err(err)?
        }
        DatasetFormat::Json => {
            let data = dataset::load_json(&path).map_err(err)?;
            match &d.image_column {
                Some(c) => data.with_column_kind(c, ColumnKind::ImageRef).map_err(err)?,
                None => data,
            }
        }
    };
    if let Some(f) = &d.sample_fraction {
        data = data.split(*f.get_ref(), config.seed).map_err(err)?.0;
    }
    Ok(data)
}

/// Maps a client error on the concatenated query list back to a row.
fn inference_error(e: ClientError, offsets: &[usize], n_rows: usize) -> PipelineError {
    let index = match &e {
        ClientError::Unsupported(v) => v.first().map(|(i, _)| *i),
        ClientError::Image { index, .. } => Some(*index),
        ClientError::Backend { indices, .. } => indices.first().copied(),
        _ => None,
    };
    match index {
        Some(i) if n_rows > 0 => {
            let t = offsets.partition_point(|&o| o <= i) - 1;
            PipelineError::at(Stage::Inference, i - offsets[t], format!("template {t}: {e}"))
        }
        _ => PipelineError::new(Stage::Inference, e),
    }
}

/// Runs the whole labeling workflow against `client`.
pub fn run_label(config: &TaskConfig, base_dir: &Path, client: &Client) -> Result<LabelRun, PipelineError> {
    let data = load_dataset(config, base_dir)?;
    let templates: Vec<Template> = config
        .templates
        .iter()
        .map(|t| Template::try_from(t.get_ref()).map_err(|e| PipelineError::new(Stage::Template, e)))
        .collect::<Result<_, _>>()?;

    let mut queries: Vec<Query> = Vec::new();
    let mut offsets = Vec::with_capacity(templates.len());
    for (t, template) in templates.iter().enumerate() {
        offsets.push(queries.len());
        let qs = template.apply_to_dataset(&data).map_err(|e| match e {
            TemplateError::Row { row, source } => {
                PipelineError::at(Stage::Template, row, format!("template {t}: {source}"))
            }
            other => PipelineError::new(Stage::Template, format!("template {t}: {other}")),
        })?;
        queries.extend(qs);
    }
    log::info!("running {} queries for {} templates on {} rows", queries.len(), templates.len(), data.n_rows());
    let responses = client.run(&queries).map_err(|e| inference_error(e, &offsets, data.n_rows()))?;
    let per_template: Vec<&[Response]> = offsets.iter().map(|&o| &responses[o..o + data.n_rows()]).collect();

    let mut voters = Vec::with_capacity(config.voters.len());
    let mut voter_responses = Vec::with_capacity(config.voters.len());
    for (j, v) in config.voters.iter().enumerate() {
        let v = v.get_ref();
        let t = *v.template.get_ref();
        let map = config.label_map(j).map_err(|e| PipelineError::new(Stage::Voting, format!("voter {j}: {e}")))?;
        let mut voter = Voter::new(map, v.matcher.into());
        if v.calibrate {
            let Template::String(st) = &templates[t] else {
                return Err(PipelineError::new(Stage::Calibration, format!("voter {j}: not a text template")));
            };
            let inputs: Vec<&str> = match &v.content_free {
                Some(c) => c.iter().map(String::as_str).collect(),
                None => DEFAULT_CONTENT_FREE.to_vec(),
            };
            voter = voter
                .calibrate(client, st, &inputs)
                .map_err(|e: VoterError| PipelineError::new(Stage::Calibration, format!("voter {j}: {e}")))?;
        }
        voters.push(voter);
        voter_responses.push(per_template[t].to_vec());
    }
    let votes = build_vote_matrix(&voters, &voter_responses).map_err(|e| PipelineError::new(Stage::Voting, e))?;
    let probs =
        config.label_model().fit_predict(&votes, config.k()).map_err(|e| PipelineError::new(Stage::LabelModel, e))?;

    Ok(LabelRun {
        probs,
        votes,
        lf_names: config.lf_names(),
        class_names: config.class_names().to_vec(),
        model_id: client.model_id().to_string(),
        stats: client.stats(),
    })
}

/// Writes `probs.csv`, `votes.csv` and `manifest.json` under `out_dir`.
pub fn write_outputs(
    run: &LabelRun,
    config: &TaskConfig,
    config_text: &str,
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let err = |e: std::io::Error| PipelineError::new(Stage::Output, format!("{}: {e}", out_dir.display()));
    std::fs::create_dir_all(out_dir).map_err(err)?;
    std::fs::write(out_dir.join("probs.csv"), run.probs.to_csv(&run.class_names)).map_err(err)?;
    std::fs::write(out_dir.join("votes.csv"), run.votes.to_csv(&run.lf_names)).map_err(err)?;
    let manifest = json!({
        "config_digest": canonical::hex(&canonical::sha256(config_text.as_bytes())),
        "model_id": run.model_id,
        "seed": config.seed,
        "label_model": config.label_model().name(),
        "label_space": run.class_names,
        "n_rows": run.votes.n_rows(),
        "n_lfs": run.votes.n_lfs(),
        "vote_coverage": run.votes.coverage(),
        "queries_requested": run.stats.requested,
        "cache_hits": run.stats.cache_hits,
        "cache_hit_rate": run.stats.hit_rate(),
        "backend_queries": run.stats.backend_queries,
    });
    let mut text = canonical::to_canonical_string(&manifest);
    text.push('\n');
    std::fs::write(out_dir.join("manifest.json"), text).map_err(err)
}
