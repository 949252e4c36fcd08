use serde::{Deserialize, Serialize};

use super::{KeyBoxAnnotation, QASample};
use crate::layout::LayoutSet;
use crate::text::normalize;

/// Named QA checks, in the order they run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Format,
    Disjointness,
    IdValidity,
    MinBoxes,
    Entailment,
    /// Entailment could not be decided because a helpful box has no text.
    NoOcrText,
}

impl Check {
    pub fn name(&self) -> &'static str {
        match self {
            Check::Format => "format",
            Check::Disjointness => "disjointness",
            Check::IdValidity => "id-validity",
            Check::MinBoxes => "min-boxes",
            Check::Entailment => "entailment",
            Check::NoOcrText => "no-ocr-text",
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QAStatus {
    Passed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAVerdict {
    pub status: QAStatus,
    pub failed_checks: Vec<Check>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entailment_detail: Option<String>,
}

impl QAVerdict {
    pub fn passed(&self) -> bool {
        self.status == QAStatus::Passed
    }
}

/// Runs every QA check on one annotation.
///
/// The entailment check passes when some normalized answer is a substring
/// of the normalized text of the helpful boxes, joined in id order. When it
/// does not pass and a helpful box has no text, the outcome is
/// [`Check::NoOcrText`] rather than [`Check::Entailment`].
pub fn check_annotation(
    annotation: &KeyBoxAnnotation,
    layout: &LayoutSet,
    sample: &QASample,
) -> QAVerdict {
    let mut failed = annotation.structural_checks(layout.len());

    let texts: Vec<Option<&str>> = annotation
        .helpful
        .iter()
        .map(|id| {
            layout
                .get(*id)
                .and_then(|b| b.text.as_deref())
                .filter(|t| !t.trim().is_empty())
        })
        .collect();
    let haystack = normalize(
        &texts
            .iter()
            .flatten()
            .copied()
            .collect::<Vec<_>>()
            .join(" "),
    );
    let hit = sample.answers.iter().find(|a| {
        let needle = normalize(a);
        !needle.is_empty() && haystack.contains(&needle)
    });
    let detail = match hit {
        Some(a) => Some(format!("answer {a:?} found in helpful box text")),
        None if texts.iter().any(Option::is_none) => {
            failed.push(Check::NoOcrText);
            Some("a helpful box has no text; entailment undecided".to_owned())
        }
        None => {
            failed.push(Check::Entailment);
            Some("no answer found in helpful box text".to_owned())
        }
    };

    QAVerdict {
        status: if failed.is_empty() {
            QAStatus::Passed
        } else {
            QAStatus::Failed
        },
        failed_checks: failed,
        entailment_detail: detail,
    }
}

/// Where an annotation goes after QA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "to")]
pub enum Disposition {
    Dataset,
    Review { reasons: Vec<Check> },
}

pub fn route(_annotation: &KeyBoxAnnotation, verdict: &QAVerdict) -> Disposition {
    if verdict.passed() {
        Disposition::Dataset
    } else {
        Disposition::Review {
            reasons: verdict.failed_checks.clone(),
        }
    }
}
