use crate::error::{Error, Result};
use crate::layout::LayoutSet;

use super::KeyBoxSelection;

/// Short-answer suffix shared by the S2 and vanilla prompts.
pub const SHORT_ANSWER_SUFFIX: &str = "Answer the question using a single word or phrase.";

fn require_question(question: &str) -> Result<()> {
    if question.trim().is_empty() {
        return Err(Error::Parameter("question must be non-empty".into()));
    }
    Ok(())
}

/// Stage-one instruction: pick the box holding the answer.
pub fn build_s1_prompt(question: &str) -> Result<String> {
    require_question(question)?;
    Ok(format!(
        "Which red box in the given image contains the answer to the following question: {question}? \
         Use the box ID near the red box to answer the question."
    ))
}

/// Stage-two instruction: answer from the masked image, with the selected
/// ids and their coordinates spelled out.
pub fn build_s2_prompt(
    question: &str,
    selection: &KeyBoxSelection,
    layout: &LayoutSet,
) -> Result<String> {
    require_question(question)?;
    if selection.ids.is_empty() {
        return Err(Error::Parameter(
            "stage two needs a non-empty box selection".into(),
        ));
    }
    let ids = selection
        .ids
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    let boxes = selection
        .ids
        .iter()
        .map(|&id| {
            layout
                .get(id)
                .map(|b| b.bbox.to_string())
                .ok_or_else(|| Error::Parameter(format!("selected box {id} is not in the layout")))
        })
        .collect::<Result<Vec<_>>>()?
        .join(", ");
    Ok(format!(
        "{question} The key regions are boxes {ids} at {boxes}. Please pay more attention to the red boxes. {SHORT_ANSWER_SUFFIX}"
    ))
}

/// One-pass instruction used by vanilla QA.
pub fn build_vanilla_prompt(question: &str) -> Result<String> {
    require_question(question)?;
    Ok(format!("{question} {SHORT_ANSWER_SUFFIX}"))
}
