use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::jsonl::{read_jsonl_or_empty, JsonlAppender};
use super::{Dataset, DatasetRecord, Provenance};
use crate::datagen::{check_annotation, Check, KeyBoxAnnotation};
use crate::error::{Error, Result};
use crate::layout::LayoutSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Corrected,
    Rejected,
}

impl ReviewStatus {
    pub fn name(&self) -> &'static str {
        match self {
            ReviewStatus::Pending => "pending",
            ReviewStatus::Accepted => "accepted",
            ReviewStatus::Corrected => "corrected",
            ReviewStatus::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Accepted,
    Corrected,
    Rejected,
}

impl From<VerdictStatus> for ReviewStatus {
    fn from(v: VerdictStatus) -> Self {
        match v {
            VerdictStatus::Accepted => ReviewStatus::Accepted,
            VerdictStatus::Corrected => ReviewStatus::Corrected,
            VerdictStatus::Rejected => ReviewStatus::Rejected,
        }
    }
}

/// A reviewer's decision as submitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub reviewer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected: Option<KeyBoxAnnotation>,
}

/// A verdict as stored, with the time it was applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub verdict: Verdict,
    pub timestamp: String,
}

/// An annotation waiting for, or resolved by, a human.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub draft: DatasetRecord,
    /// The layout the draft refers to, as it was at enqueue time.
    pub layout: LayoutSet,
    pub failed_checks: Vec<Check>,
    pub status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<VerdictRecord>,
}

impl ReviewItem {
    /// A pending item keyed by the draft's sample id.
    pub fn pending(draft: DatasetRecord, layout: LayoutSet, failed_checks: Vec<Check>) -> Self {
        Self {
            item_id: format!("review-{}", draft.sample_id),
            draft,
            layout,
            failed_checks,
            status: ReviewStatus::Pending,
            verdict: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum QueueEvent {
    Enqueue {
        item: Box<ReviewItem>,
    },
    Verdict {
        item_id: String,
        verdict: VerdictRecord,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub enqueued: usize,
    pub pending: usize,
    pub accepted: usize,
    pub corrected: usize,
    pub rejected: usize,
}

/// Review queue backed by an append-only event log. Opening a queue
/// replays the log.
#[derive(Debug)]
pub struct ReviewQueue {
    path: PathBuf,
    order: Vec<String>,
    items: BTreeMap<String, ReviewItem>,
    appender: JsonlAppender,
}

impl ReviewQueue {
    pub fn open(path: &Path) -> Result<Self> {
        let events: Vec<QueueEvent> = read_jsonl_or_empty(path)?;
        let mut order = Vec::new();
        let mut items = BTreeMap::new();
        for (i, event) in events.into_iter().enumerate() {
            let corrupt = |message: String| {
                Error::CorruptRecord {
                    line: i + 1,
                    message,
                }
                .in_file(path)
            };
            match event {
                QueueEvent::Enqueue { item } => {
                    if items.contains_key(&item.item_id) {
                        return Err(corrupt(format!("item {} enqueued twice", item.item_id)));
                    }
                    order.push(item.item_id.clone());
                    items.insert(item.item_id.clone(), *item);
                }
                QueueEvent::Verdict { item_id, verdict } => {
                    let item = items
                        .get_mut(&item_id)
                        .ok_or_else(|| corrupt(format!("verdict for unknown item {item_id}")))?;
                    if item.status != ReviewStatus::Pending {
                        return Err(corrupt(format!("second verdict for item {item_id}")));
                    }
                    item.status = verdict.verdict.status.into();
                    item.verdict = Some(verdict);
                }
            }
        }
        let appender = JsonlAppender::open(path)?;
        Ok(Self {
            path: path.to_owned(),
            order,
            items,
            appender,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn enqueue(&mut self, item: ReviewItem) -> Result<()> {
        if item.status != ReviewStatus::Pending || item.verdict.is_some() {
            return Err(Error::Parameter(format!(
                "item {} must be enqueued pending",
                item.item_id
            )));
        }
        if self.items.contains_key(&item.item_id) {
            return Err(Error::Conflict(format!(
                "item {} already queued",
                item.item_id
            )));
        }
        self.appender.append(&QueueEvent::Enqueue {
            item: Box::new(item.clone()),
        })?;
        self.order.push(item.item_id.clone());
        self.items.insert(item.item_id.clone(), item);
        Ok(())
    }

    /// The oldest pending item.
    pub fn next_pending(&self) -> Option<&ReviewItem> {
        self.order
            .iter()
            .map(|id| &self.items[id])
            .find(|i| i.status == ReviewStatus::Pending)
    }

    pub fn get(&self, item_id: &str) -> Option<&ReviewItem> {
        self.items.get(item_id)
    }

    /// Items in enqueue order.
    pub fn items(&self) -> impl Iterator<Item = &ReviewItem> {
        self.order.iter().map(|id| &self.items[id])
    }

    pub fn stats(&self) -> QueueStats {
        let mut s = QueueStats {
            enqueued: self.items.len(),
            ..Default::default()
        };
        for item in self.items.values() {
            match item.status {
                ReviewStatus::Pending => s.pending += 1,
                ReviewStatus::Accepted => s.accepted += 1,
                ReviewStatus::Corrected => s.corrected += 1,
                ReviewStatus::Rejected => s.rejected += 1,
            }
        }
        s
    }

    pub fn submit_verdict(
        &mut self,
        item_id: &str,
        verdict: Verdict,
        dataset: &mut Dataset,
    ) -> Result<ReviewItem> {
        self.submit_verdict_at(item_id, verdict, dataset, Utc::now())
    }

    /// Applies a verdict. Accepted and corrected items become dataset
    /// records; rejected items stay in the log only. Repeating the verdict
    /// an item already carries returns the item unchanged.
    pub fn submit_verdict_at(
        &mut self,
        item_id: &str,
        verdict: Verdict,
        dataset: &mut Dataset,
        now: DateTime<Utc>,
    ) -> Result<ReviewItem> {
        let item = self
            .items
            .get(item_id)
            .ok_or_else(|| Error::NotFound(format!("review item {item_id}")))?;
        if verdict.reviewer.trim().is_empty() {
            return Err(Error::Validation {
                checks: vec!["reviewer tag is empty".into()],
            });
        }
        match &item.verdict {
            Some(done) if done.verdict == verdict => return Ok(item.clone()),
            Some(done) => {
                return Err(Error::Conflict(format!(
                    "{item_id} already {} by {}",
                    item.status.name(),
                    done.verdict.reviewer
                )))
            }
            None if item.status != ReviewStatus::Pending => {
                return Err(Error::State {
                    item_id: item_id.to_owned(),
                    status: item.status.name().to_owned(),
                })
            }
            None => {}
        }

        let record = match verdict.status {
            VerdictStatus::Rejected => {
                if verdict.corrected.is_some() {
                    return Err(Error::Validation {
                        checks: vec!["a rejection carries no annotation".into()],
                    });
                }
                None
            }
            VerdictStatus::Accepted => {
                if verdict.corrected.is_some() {
                    return Err(Error::Validation {
                        checks: vec!["use status corrected to change the annotation".into()],
                    });
                }
                let record = DatasetRecord {
                    provenance: Provenance::HumanAccepted,
                    ..item.draft.clone()
                };
                record.validate()?;
                Some(record)
            }
            VerdictStatus::Corrected => {
                let Some(corrected) = &verdict.corrected else {
                    return Err(Error::Validation {
                        checks: vec!["corrected verdict needs an annotation".into()],
                    });
                };
                let mut annotation = corrected.clone();
                annotation.sample_id = item.draft.sample_id.clone();
                let qa = check_annotation(&annotation, &item.layout, &item.draft.qa_sample());
                let failed: Vec<String> = qa
                    .failed_checks
                    .iter()
                    .filter(|c| **c != Check::NoOcrText)
                    .map(|c| c.name().to_owned())
                    .collect();
                if !failed.is_empty() {
                    return Err(Error::Validation { checks: failed });
                }
                Some(DatasetRecord {
                    annotation,
                    provenance: Provenance::HumanCorrected,
                    ..item.draft.clone()
                })
            }
        };

        if let Some(record) = &record {
            // A record without its verdict event is left by an interrupted
            // earlier submission; the retry completes it.
            if !dataset.contains(&record.sample_id) {
                dataset.append_record(record)?;
            }
        }
        let stored = VerdictRecord {
            verdict,
            timestamp: now.to_rfc3339_opts(SecondsFormat::Secs, true),
        };
        self.appender.append(&QueueEvent::Verdict {
            item_id: item_id.to_owned(),
            verdict: stored.clone(),
        })?;
        let item = self.items.get_mut(item_id).expect("item present");
        item.status = stored.verdict.status.into();
        item.verdict = Some(stored);
        Ok(item.clone())
    }
}
