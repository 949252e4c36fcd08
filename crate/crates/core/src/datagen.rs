//! Training-data generation: annotator prompting, parsing, rule-based QA,
//! routing and enabling-task synthesis.

mod checks;
mod enabling;
mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, DecodeParams, ModelRequest, ModelResponse, RequestImage};
use crate::error::{Error, Result};
use crate::layout::LayoutSet;
use crate::render::{render_s1_overlay, RenderStyle};

pub use checks::{check_annotation, route, Check, Disposition, QAStatus, QAVerdict};
pub use enabling::{
    synthesize_box_id_task, synthesize_box_query_task, EnablingSample, EnablingTask,
    DEFAULT_BOX_ID_CAP,
};
pub use parse::{parse_annotation, ParseOutcome};

const ANNOTATION_TEMPLATE: &str = include_str!("datagen/annotation_prompt.txt");

/// One question over one image, with every acceptable answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub sample_id: String,
    pub image_id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub dataset_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl QASample {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.sample_id.trim().is_empty() {
            problems.push("empty sample_id".to_owned());
        }
        if self.image_id.trim().is_empty() {
            problems.push(format!("{}: empty image_id", self.sample_id));
        }
        if self.answers.is_empty() {
            problems.push(format!("{}: no answers", self.sample_id));
        }
        if self.dataset_tag.trim().is_empty() {
            problems.push(format!("{}: empty dataset_tag", self.sample_id));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation { checks: problems })
        }
    }
}

/// Key boxes for one question: helpful boxes, confusing boxes and a
/// rationale per box.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeyBoxAnnotation {
    pub sample_id: String,
    pub helpful: BTreeSet<u32>,
    pub confusing: BTreeSet<u32>,
    #[serde(default)]
    pub rationales: BTreeMap<u32, String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub annotator_raw: String,
    /// Bracketed ids that were not layout ids.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_ids: Vec<u64>,
    /// Repeated ids within one bracket, beyond their first mention.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub duplicate_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl KeyBoxAnnotation {
    /// Helpful and confusing boxes together.
    pub fn key_ids(&self) -> BTreeSet<u32> {
        self.helpful.union(&self.confusing).copied().collect()
    }

    /// Key boxes without a non-blank rationale.
    pub fn missing_rationales(&self) -> Vec<u32> {
        self.key_ids()
            .into_iter()
            .filter(|id| {
                self.rationales
                    .get(id)
                    .is_none_or(|r| r.trim().is_empty())
            })
            .collect()
    }

    /// Checks that need only the box count: format, disjointness, id
    /// validity and the minimum-box rule.
    pub fn structural_checks(&self, n_boxes: usize) -> Vec<Check> {
        let mut failed = Vec::new();
        if self.helpful.is_empty() || !self.missing_rationales().is_empty() {
            failed.push(Check::Format);
        }
        if !self.helpful.is_disjoint(&self.confusing) {
            failed.push(Check::Disjointness);
        }
        let in_range = |id: &u32| *id >= 1 && (*id as usize) <= n_boxes;
        if !self.dropped_ids.is_empty() || !self.key_ids().iter().all(in_range) {
            failed.push(Check::IdValidity);
        }
        let min_ok = if n_boxes > 3 {
            self.key_ids().len() >= 3
        } else {
            self.confusing.is_empty()
        };
        if !min_ok {
            failed.push(Check::MinBoxes);
        }
        failed
    }
}

/// The annotator prompt for every question on one image.
pub fn build_annotation_prompt(layout: &LayoutSet, samples: &[QASample]) -> Result<String> {
    let Some(first) = samples.first() else {
        return Err(Error::Parameter(
            "annotation prompt needs at least one sample".into(),
        ));
    };
    if let Some(other) = samples.iter().find(|s| s.image_id != first.image_id) {
        return Err(Error::Parameter(format!(
            "samples span images {:?} and {:?}",
            first.image_id, other.image_id
        )));
    }
    if first.image_id != layout.image_id {
        return Err(Error::Parameter(format!(
            "samples are for image {:?} but the layout is for {:?}",
            first.image_id, layout.image_id
        )));
    }
    let mut pairs = String::new();
    for (i, s) in samples.iter().enumerate() {
        if i > 0 {
            pairs.push('\n');
        }
        let answer = s.answers.first().map(String::as_str).unwrap_or_default();
        write!(pairs, "Q{}: {} | A: {}", i + 1, s.question, answer).expect("string write");
    }
    Ok(ANNOTATION_TEMPLATE.replace("{QA_Pairs}", &pairs))
}

/// Renders the overlay for `layout` and sends one annotation request
/// covering all of `samples`.
pub fn annotate_image<B: Backend + ?Sized>(
    backend: &B,
    image: &RgbImage,
    layout: &LayoutSet,
    samples: &[QASample],
    style: &RenderStyle,
    max_output_tokens: u32,
) -> Result<ModelResponse> {
    let prompt = build_annotation_prompt(layout, samples)?;
    let overlay = render_s1_overlay(image, layout, style)?;
    let request = ModelRequest::new(
        vec![RequestImage::Prompted(overlay)],
        prompt,
        DecodeParams { max_output_tokens },
    )?;
    backend.invoke(&request)
}

/// A QA-checked annotation and where it goes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedAnnotation {
    pub sample: QASample,
    pub annotation: KeyBoxAnnotation,
    pub verdict: QAVerdict,
    pub disposition: Disposition,
}

/// Parses one annotator response for an image and runs the QA checks on
/// every question. Unparseable questions, or the whole batch when nothing
/// parses, go to review with a `format` failure.
pub fn qa_batch(raw: &str, layout: &LayoutSet, samples: &[QASample]) -> Vec<RoutedAnnotation> {
    let ids: Vec<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
    let outcomes = match parse_annotation(raw, layout, &ids) {
        Ok(o) => o,
        Err(e) => ids
            .iter()
            .map(|id| ParseOutcome::Unparseable {
                sample_id: (*id).to_owned(),
                reason: e.to_string(),
            })
            .collect(),
    };
    samples
        .iter()
        .zip(outcomes)
        .map(|(sample, outcome)| {
            let (annotation, verdict) = match outcome {
                ParseOutcome::Parsed(a) => {
                    let v = check_annotation(&a, layout, sample);
                    (a, v)
                }
                ParseOutcome::Unparseable { sample_id, reason } => {
                    let a = KeyBoxAnnotation {
                        sample_id,
                        annotator_raw: raw.to_owned(),
                        notes: vec![reason.clone()],
                        ..Default::default()
                    };
                    let v = QAVerdict {
                        status: QAStatus::Failed,
                        failed_checks: vec![Check::Format],
                        entailment_detail: Some(format!("unparseable: {reason}")),
                    };
                    (a, v)
                }
            };
            let disposition = route(&annotation, &verdict);
            RoutedAnnotation {
                sample: sample.clone(),
                annotation,
                verdict,
                disposition,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{BBox, Category, LayoutBox};

    fn layout(n: u32) -> LayoutSet {
        let boxes = (0..n)
            .map(|i| LayoutBox {
                id: 0,
                bbox: BBox::new(10, 10 + i * 30, 100, 20).unwrap(),
                category: Category::Text,
                text: Some(format!("line {}", i + 1)),
            })
            .collect();
        LayoutSet::new("img", 200, 400, boxes).unwrap()
    }

    fn sample(id: &str, q: &str, a: &[&str]) -> QASample {
        QASample {
            sample_id: id.into(),
            image_id: "img".into(),
            question: q.into(),
            answers: a.iter().map(|s| s.to_string()).collect(),
            dataset_tag: "t".into(),
            split: None,
        }
    }

    #[test]
    fn prompt_lists_pairs() {
        let p = build_annotation_prompt(
            &layout(3),
            &[
                sample("a", "What is the date?", &["May 1", "1 May"]),
                sample("b", "Who signed?", &["J. Roe"]),
            ],
        )
        .unwrap();
        assert!(p.ends_with("**Here are the QA pairs:**\n\nQ1: What is the date? | A: May 1\nQ2: Who signed? | A: J. Roe"));
        for heading in [
            "1. **If the Number of Boxes in the Image Exceeds 3, Output at Least Three Boxes**",
            "2. **If the Number of Boxes in the Image is Less Than 3, Output Only the Boxes Helpful for Answering the Question**",
            "3. **Output Reason and Content**",
            "4. **Other Details**",
            "5. **Output Format**",
        ] {
            assert_eq!(p.matches(heading).count(), 1, "{heading}");
        }
    }

    #[test]
    fn prompt_rejects_mixed_images() {
        let mut b = sample("b", "q", &["a"]);
        b.image_id = "other".into();
        assert!(matches!(
            build_annotation_prompt(&layout(3), &[sample("a", "q", &["a"]), b]),
            Err(Error::Parameter(_))
        ));
        assert!(build_annotation_prompt(&layout(3), &[]).is_err());
    }

    #[test]
    fn structural_checks_by_rule() {
        let mut a = KeyBoxAnnotation {
            sample_id: "s".into(),
            helpful: [2].into(),
            confusing: BTreeSet::new(),
            rationales: [(2, "holds the total".to_owned())].into(),
            ..Default::default()
        };
        assert_eq!(a.structural_checks(3), vec![]);
        assert_eq!(a.structural_checks(10), vec![Check::MinBoxes]);
        a.confusing = [2, 5].into();
        a.rationales.insert(5, "nearby".into());
        assert_eq!(
            a.structural_checks(10),
            vec![Check::Disjointness, Check::MinBoxes]
        );
        a.confusing = [5, 11].into();
        assert_eq!(
            a.structural_checks(10),
            vec![Check::Format, Check::IdValidity]
        );
    }

    #[test]
    fn qa_batch_routes_every_sample() {
        let raw = "Q1:\nHELPFUL BOX: [<box>2</box>]\nCONFUSING BOX: []\nReason for <box>2</box>: has it\n";
        let routed = qa_batch(
            raw,
            &layout(3),
            &[sample("a", "q", &["line 2"]), sample("b", "q2", &["x"])],
        );
        assert_eq!(routed.len(), 2);
        assert_eq!(routed[0].disposition, Disposition::Dataset);
        assert_eq!(routed[1].verdict.failed_checks, vec![Check::Format]);

        let routed = qa_batch(
            "no structure at all",
            &layout(3),
            &[sample("a", "q", &["x"])],
        );
        assert!(matches!(routed[0].disposition, Disposition::Review { .. }));
    }
}
