//! Append-only JSONL persistence: dataset records, manifests and the
//! review queue.

mod jsonl;
mod review;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{KeyBoxAnnotation, QASample};
use crate::error::{Error, Result};

pub use jsonl::{parse_jsonl, read_jsonl, read_jsonl_or_empty, write_jsonl, JsonlAppender};
pub use review::{
    QueueStats, ReviewItem, ReviewQueue, ReviewStatus, Verdict, VerdictRecord, VerdictStatus,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AutoPassed,
    HumanAccepted,
    HumanCorrected,
}

/// One finished training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub sample_id: String,
    pub image_id: String,
    pub image_path: String,
    pub layout_path: String,
    pub question: String,
    pub answers: Vec<String>,
    pub annotation: KeyBoxAnnotation,
    pub provenance: Provenance,
    pub dataset_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// Number of boxes in the layout the annotation refers to.
    pub layout_box_count: usize,
}

impl DatasetRecord {
    /// Problems that make this record invalid; empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.sample_id.trim().is_empty() {
            out.push("empty sample_id".to_owned());
        }
        if self.answers.is_empty() {
            out.push("no answers".to_owned());
        }
        if self.annotation.sample_id != self.sample_id {
            out.push(format!("annotation is for {:?}", self.annotation.sample_id));
        }
        out.extend(
            self.annotation
                .structural_checks(self.layout_box_count)
                .iter()
                .map(|c| c.name().to_owned()),
        );
        out
    }

    pub fn validate(&self) -> Result<()> {
        let checks = self.problems();
        if checks.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation { checks })
        }
    }

    /// The question this record answers.
    pub fn qa_sample(&self) -> QASample {
        QASample {
            sample_id: self.sample_id.clone(),
            image_id: self.image_id.clone(),
            question: self.question.clone(),
            answers: self.answers.clone(),
            dataset_tag: self.dataset_tag.clone(),
            split: self.split.clone(),
        }
    }
}

/// Counts derived from a dataset's records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_tag: String,
    pub image_count: usize,
    pub question_count: usize,
    pub splits: BTreeMap<String, usize>,
    /// Mean of |helpful ∪ confusing| per question, to two decimals.
    pub mean_key_boxes: f64,
}

/// Split name used for records without one.
pub const UNSPLIT: &str = "unsplit";

pub fn compute_manifest(dataset_tag: &str, records: &[DatasetRecord]) -> Manifest {
    let images: BTreeSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let mut splits = BTreeMap::new();
    for r in records {
        *splits
            .entry(r.split.clone().unwrap_or_else(|| UNSPLIT.to_owned()))
            .or_insert(0) += 1;
    }
    let key_boxes: usize = records.iter().map(|r| r.annotation.key_ids().len()).sum();
    let mean = if records.is_empty() {
        0.0
    } else {
        key_boxes as f64 / records.len() as f64
    };
    Manifest {
        dataset_tag: dataset_tag.to_owned(),
        image_count: images.len(),
        question_count: records.len(),
        splits,
        mean_key_boxes: (mean * 100.0).round() / 100.0,
    }
}

fn dataset_dir(root: &Path, dataset_tag: &str) -> Result<PathBuf> {
    let ok = !dataset_tag.is_empty()
        && dataset_tag
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !dataset_tag.starts_with('.');
    if !ok {
        return Err(Error::Parameter(format!(
            "invalid dataset tag {dataset_tag:?}"
        )));
    }
    Ok(root.join(dataset_tag))
}

pub fn records_path(root: &Path, dataset_tag: &str) -> Result<PathBuf> {
    Ok(dataset_dir(root, dataset_tag)?.join("records.jsonl"))
}

pub fn manifest_path(root: &Path, dataset_tag: &str) -> Result<PathBuf> {
    Ok(dataset_dir(root, dataset_tag)?.join("manifest.json"))
}

/// Reads and validates records, one per line. Any unreadable or invalid
/// line, or a repeated sample id, is a corrupt-record error.
pub fn parse_records(reader: impl BufRead, dataset_tag: &str) -> Result<Vec<DatasetRecord>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| Error::CorruptRecord {
            line: i + 1,
            message,
        };
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        let problems = record.problems();
        if !problems.is_empty() {
            return Err(corrupt(format!(
                "{}: {}",
                record.sample_id,
                problems.join(", ")
            )));
        }
        if record.dataset_tag != dataset_tag {
            return Err(corrupt(format!(
                "dataset tag {:?}, expected {dataset_tag:?}",
                record.dataset_tag
            )));
        }
        if !seen.insert(record.sample_id.clone()) {
            return Err(corrupt(format!(
                "duplicate sample_id {:?}",
                record.sample_id
            )));
        }
        out.push(record);
    }
    Ok(out)
}

/// All records of a dataset; an absent dataset has none.
pub fn load_records(root: &Path, dataset_tag: &str) -> Result<Vec<DatasetRecord>> {
    let path = records_path(root, dataset_tag)?;
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    parse_records(BufReader::new(file), dataset_tag).map_err(|e| e.in_file(&path))
}

/// Reads the stored manifest and checks it against a recount.
pub fn load_manifest(root: &Path, dataset_tag: &str) -> Result<Manifest> {
    let path = manifest_path(root, dataset_tag)?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let stored: Manifest = serde_json::from_str(&text).map_err(|e| {
        Error::Format {
            line: e.line(),
            message: e.to_string(),
        }
        .in_file(&path)
    })?;
    let recount = compute_manifest(dataset_tag, &load_records(root, dataset_tag)?);
    if stored != recount {
        return Err(Error::Validation {
            checks: vec![format!(
                "manifest {} disagrees with its records",
                path.display()
            )],
        });
    }
    Ok(stored)
}

/// Append handle for one dataset. Holds the set of stored sample ids so
/// each id is written at most once.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    tag: String,
    ids: BTreeSet<String>,
    appender: JsonlAppender,
}

impl Dataset {
    pub fn open(root: &Path, dataset_tag: &str) -> Result<Self> {
        let ids = load_records(root, dataset_tag)?
            .into_iter()
            .map(|r| r.sample_id)
            .collect();
        let appender = JsonlAppender::open(&records_path(root, dataset_tag)?)?;
        Ok(Self {
            root: root.to_owned(),
            tag: dataset_tag.to_owned(),
            ids,
            appender,
        })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.ids.contains(sample_id)
    }

    pub fn append_record(&mut self, record: &DatasetRecord) -> Result<()> {
        record.validate()?;
        if record.dataset_tag != self.tag {
            return Err(Error::Parameter(format!(
                "record {} is tagged {:?}, dataset is {:?}",
                record.sample_id, record.dataset_tag, self.tag
            )));
        }
        if self.ids.contains(&record.sample_id) {
            return Err(Error::Conflict(format!(
                "sample {} already in dataset {}",
                record.sample_id, self.tag
            )));
        }
        self.appender.append(record)?;
        self.ids.insert(record.sample_id.clone());
        Ok(())
    }

    pub fn load_records(&self) -> Result<Vec<DatasetRecord>> {
        load_records(&self.root, &self.tag)
    }

    /// Recounts the records and rewrites the manifest file.
    pub fn write_manifest(&self) -> Result<Manifest> {
        let manifest = compute_manifest(&self.tag, &self.load_records()?);
        let path = manifest_path(&self.root, &self.tag)?;
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}
