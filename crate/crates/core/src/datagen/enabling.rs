use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{KeyBoxAnnotation, QASample};
use crate::layout::LayoutSet;

pub const DEFAULT_BOX_ID_CAP: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnablingTask {
    BoxId,
    BoxQuery,
}

/// One auxiliary training sample. `image` names the overlay the question
/// is asked about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnablingSample {
    pub sample_id: String,
    pub task: EnablingTask,
    pub image_id: String,
    pub image: String,
    pub question: String,
    pub target: String,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Box-index questions for up to `cap` boxes of `layout`. Pages with more
/// boxes than `cap` get a subset drawn from `seed` and the image id.
pub fn synthesize_box_id_task(
    layout: &LayoutSet,
    cap: usize,
    seed: u64,
    image: &str,
) -> Vec<EnablingSample> {
    let n = layout.len();
    let mut picks: Vec<usize> = if n <= cap {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&layout.image_id));
        sample(&mut rng, n, cap).into_vec()
    };
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|i| {
            let b = &layout.boxes[i];
            let r = b.bbox;
            EnablingSample {
                sample_id: format!("{}#box-id-{}", layout.image_id, b.id),
                task: EnablingTask::BoxId,
                image_id: layout.image_id.clone(),
                image: image.to_owned(),
                question: format!(
                    "What is the index of the box at [{}, {}, {}, {}]?",
                    r.x, r.y, r.w, r.h
                ),
                target: b.id.to_string(),
            }
        })
        .collect()
}

/// Box-role questions for every key box, helpful boxes first, each
/// answered by its rationale. Boxes without a rationale are skipped.
pub fn synthesize_box_query_task(
    annotation: &KeyBoxAnnotation,
    qa: &QASample,
    image: &str,
) -> Vec<EnablingSample> {
    annotation
        .helpful
        .iter()
        .chain(annotation.confusing.iter())
        .filter_map(|id| {
            let Some(rationale) = annotation.rationales.get(id).filter(|r| !r.trim().is_empty()) else {
                tracing::warn!(sample_id = %qa.sample_id, box_id = id, "no rationale; box-query sample skipped");
                return None;
            };
            Some(EnablingSample {
                sample_id: format!("{}#box-query-{id}", qa.sample_id),
                task: EnablingTask::BoxQuery,
                image_id: qa.image_id.clone(),
                image: image.to_owned(),
                question: format!("What role does box {id} play in answering \"{}\"?", qa.question),
                target: rationale.clone(),
            })
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
                bbox: BBox::new(10, 20 + i * 50, 30, 40).unwrap(),
                category: Category::Text,
                text: None,
            })
            .collect();
        LayoutSet::new("page", 100, 20 + 50 * n, boxes).unwrap()
    }

    #[test]
    fn small_pages_get_every_box() {
        let out = synthesize_box_id_task(&layout(3), 5, 0, "page.s1.png");
        assert_eq!(
            out.iter().map(|s| s.target.as_str()).collect::<Vec<_>>(),
            vec!["1", "2", "3"]
        );
        assert_eq!(
            out[0].question,
            "What is the index of the box at [10, 20, 30, 40]?"
        );
        assert_eq!(
            out[1].question,
            "What is the index of the box at [10, 70, 30, 40]?"
        );
    }

    #[test]
    fn seeded_subset() {
        let l = layout(20);
        let a = synthesize_box_id_task(&l, 5, 7, "x");
        assert_eq!(a.len(), 5);
        assert_eq!(a, synthesize_box_id_task(&l, 5, 7, "x"));
        let ids: Vec<u32> = a.iter().map(|s| s.target.parse().unwrap()).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert!((0..20).any(|s| synthesize_box_id_task(&l, 5, s, "x") != a));
    }

    #[test]
    fn box_query_per_key_box() {
        let qa = QASample {
            sample_id: "q1".into(),
            image_id: "page".into(),
            question: "Who is the \"applicant\"?".into(),
            answers: vec!["x".into()],
            dataset_tag: "t".into(),
            split: None,
        };
        let a = KeyBoxAnnotation {
            sample_id: "q1".into(),
            helpful: [16].into(),
            confusing: [3, 9].into(),
            rationales: [
                (16, "contains the applicant address".into()),
                (3, "a".into()),
                (9, " ".into()),
            ]
            .into(),
            ..Default::default()
        };
        let out = synthesize_box_query_task(&a, &qa, "img");
        assert_eq!(out.len(), 2);
        assert_eq!(
            out[0].question,
            "What role does box 16 play in answering \"Who is the \"applicant\"?\"?"
        );
        assert_eq!(out[0].target, "contains the applicant address");
        assert_eq!(out[1].sample_id, "q1#box-query-3");
    }
}
