//! Pipeline configuration file.
//!
//! ```toml
//! seed = 7
//!
//! [paths]
//! images = "images"
//! layouts = "layouts"
//! datasets = "datasets"
//! outputs = "out"
//!
//! [backend]
//! kind = "mock"
//! behavior = "behavior.toml"
//!
//! [datasets.mini]
//! qa_files = ["qa.jsonl"]
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, MockBackend, RemoteBackend, RemoteConfig, ScriptedBehavior, TokenTable,
};
use crate::datagen::{QASample, DEFAULT_BOX_ID_CAP};
use crate::error::{Error, Result};
use crate::eval::{DateOrder, EvalSettings};
use crate::orchestrator::InferenceOptions;
use crate::render::StyleOverrides;
use crate::store::read_jsonl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Page images, named `<image_id>.png` or `<image_id>.jpg`.
    pub images: PathBuf,
    /// Layout files, named `<image_id>.jsonl`.
    pub layouts: PathBuf,
    /// Dataset store root.
    pub datasets: PathBuf,
    pub outputs: PathBuf,
    /// Review queue event log. Defaults to `<datasets>/review_queue.jsonl`.
    pub review_queue: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            images: "images".into(),
            layouts: "layouts".into(),
            datasets: "datasets".into(),
            outputs: "out".into(),
            review_queue: None,
        }
    }
}

impl Paths {
    pub fn review_queue(&self) -> PathBuf {
        self.review_queue
            .clone()
            .unwrap_or_else(|| self.datasets.join("review_queue.jsonl"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "remote" => Ok(BackendKind::Remote),
            other => Err(Error::Config(format!("unknown backend kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSettings {
    pub kind: BackendKind,
    /// Scripted behavior file for the mock backend.
    pub behavior: Option<PathBuf>,
    pub remote: RemoteConfig,
    pub tokens: TokenTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceSettings {
    pub addr: String,
    /// When set, requests must carry it in the `x-review-token` header.
    pub token: Option<String>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenSettings {
    pub box_id_cap: usize,
    pub annotator_max_tokens: u32,
}

impl Default for DatagenSettings {
    fn default() -> Self {
        Self {
            box_id_cap: DEFAULT_BOX_ID_CAP,
            annotator_max_tokens: 2048,
        }
    }
}

/// One registered dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSource {
    /// JSONL files of QA samples.
    pub qa_files: Vec<PathBuf>,
    /// Split given to samples that carry none.
    pub split: Option<String>,
    pub date_order: Option<DateOrder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Parallel jobs for per-sample and per-image work.
    pub workers: usize,
    pub paths: Paths,
    pub backend: BackendSettings,
    pub render: StyleOverrides,
    pub orchestrator: InferenceOptions,
    pub eval: EvalSettings,
    pub service: ServiceSettings,
    pub datagen: DatagenSettings,
    pub datasets: BTreeMap<String, DatasetSource>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            paths: Paths::default(),
            backend: BackendSettings::default(),
            render: StyleOverrides::default(),
            orchestrator: InferenceOptions::default(),
            eval: EvalSettings::default(),
            service: ServiceSettings::default(),
            datagen: DatagenSettings::default(),
            datasets: BTreeMap::new(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses and validates; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| e.in_file(path))
    }

    /// Defaults with every path resolved against `base`.
    pub fn default_at(base: &Path) -> Self {
        let mut cfg = Self::default();
        cfg.resolve_paths(base);
        cfg
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [
            &mut p.images,
            &mut p.layouts,
            &mut p.datasets,
            &mut p.outputs,
        ] {
            resolve(base, path);
        }
        if let Some(q) = &mut p.review_queue {
            resolve(base, q);
        }
        if let Some(b) = &mut self.backend.behavior {
            resolve(base, b);
        }
        for source in self.datasets.values_mut() {
            for f in &mut source.qa_files {
                resolve(base, f);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.workers == 0 {
            problems.push("workers must be at least 1".to_owned());
        }
        if self.orchestrator.k_max == 0 {
            problems.push("orchestrator.k_max must be at least 1".to_owned());
        }
        if self.orchestrator.max_output_tokens == 0 {
            problems.push("orchestrator.max_output_tokens must be at least 1".to_owned());
        }
        if !(self.eval.tau > 0.0 && self.eval.tau <= 1.0) {
            problems.push(format!("eval.tau must be in (0, 1], got {}", self.eval.tau));
        }
        if !(self.eval.relative_tolerance >= 0.0 && self.eval.relative_tolerance.is_finite()) {
            problems.push("eval.relative_tolerance must be a non-negative number".to_owned());
        }
        if let Err(e) = self.render.resolve(1000, 1000).validate() {
            problems.push(format!("render: {e}"));
        }
        if self.service.addr.parse::<SocketAddr>().is_err() {
            problems.push(format!(
                "service.addr {:?} is not host:port",
                self.service.addr
            ));
        }
        if self
            .service
            .token
            .as_deref()
            .is_some_and(|t| t.trim().is_empty())
        {
            problems.push("service.token is empty".to_owned());
        }
        if self.backend.kind == BackendKind::Remote && self.backend.remote.max_attempts == 0 {
            problems.push("backend.remote.max_attempts must be at least 1".to_owned());
        }
        let tt = self.backend.tokens;
        if tt.tile_size == 0 || tt.max_tiles == 0 {
            problems.push("backend.tokens tile_size and max_tiles must be positive".to_owned());
        }
        if self.datagen.box_id_cap == 0 {
            problems.push("datagen.box_id_cap must be at least 1".to_owned());
        }
        for (tag, source) in &self.datasets {
            if crate::store::records_path(Path::new(""), tag).is_err() {
                problems.push(format!(
                    "dataset tag {tag:?} may only use letters, digits, '-', '_' and '.'"
                ));
            }
            if source.qa_files.is_empty() {
                problems.push(format!("datasets.{tag}.qa_files is empty"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// The configured backend. Backend construction problems are
    /// configuration errors.
    pub fn build_backend(&self) -> Result<Box<dyn Backend>> {
        match self.backend.kind {
            BackendKind::Mock => {
                let path = self.backend.behavior.as_ref().ok_or_else(|| {
                    Error::Config("backend.behavior is required for the mock backend".into())
                })?;
                let behavior = ScriptedBehavior::load(path).map_err(|e| match e.root() {
                    Error::Config(_) => e,
                    other => Error::Config(other.to_string()).in_file(path),
                })?;
                Ok(Box::new(MockBackend::new(behavior, self.backend.tokens)))
            }
            BackendKind::Remote => Ok(Box::new(RemoteBackend::new(
                self.backend.remote.clone(),
                self.backend.tokens,
            )?)),
        }
    }

    /// Eval settings with the dataset's date order applied.
    pub fn eval_settings_for(&self, dataset_tag: &str) -> EvalSettings {
        let mut s = self.eval.clone();
        if let Some(order) = self.datasets.get(dataset_tag).and_then(|d| d.date_order) {
            s.date_order = order;
        }
        s
    }

    /// QA samples of a registered dataset, validated, with the dataset's
    /// default split filled in.
    pub fn load_samples(&self, dataset_tag: &str) -> Result<Vec<QASample>> {
        let source = self
            .datasets
            .get(dataset_tag)
            .ok_or_else(|| Error::Config(format!("dataset {dataset_tag:?} is not registered")))?;
        let mut out = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for file in &source.qa_files {
            let samples: Vec<QASample> = read_jsonl(file)?;
            for (i, mut s) in samples.into_iter().enumerate() {
                let bad = |message: String| {
                    Error::Record {
                        record: i + 1,
                        message,
                    }
                    .in_file(file)
                };
                s.validate().map_err(|e| bad(e.to_string()))?;
                if s.dataset_tag != dataset_tag {
                    return Err(bad(format!(
                        "dataset tag {:?}, expected {dataset_tag:?}",
                        s.dataset_tag
                    )));
                }
                if !seen.insert(s.sample_id.clone()) {
                    return Err(bad(format!("duplicate sample_id {:?}", s.sample_id)));
                }
                if s.split.is_none() {
                    s.split = source.split.clone();
                }
                out.push(s);
            }
        }
        Ok(out)
    }
}
