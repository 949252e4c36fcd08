//! Two-stage select-then-answer inference.
//!
//! Stage one shows the model every layout box outlined and numbered and
//! asks which boxes hold the answer. Stage two blurs everything but the
//! chosen boxes and asks the question again. When stage one yields nothing
//! usable (or the page has no boxes) the question is answered from the
//! plain image instead.

mod parse;
mod prompts;

use std::collections::BTreeSet;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, CallCounter, DecodeParams, ModelRequest, ModelResponse, RequestImage, RequestSummary,
};
use crate::error::{Error, Result};
use crate::layout::LayoutSet;
use crate::render::{encode_png, render_s1_overlay, render_s2_mask, RenderStyle};

pub use parse::parse_box_ids;
pub use prompts::{build_s1_prompt, build_s2_prompt, build_vanilla_prompt, SHORT_ANSWER_SUFFIX};

/// Default cap on the number of selected boxes.
pub const DEFAULT_K_MAX: usize = 8;

/// Boxes chosen in stage one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyBoxSelection {
    pub ids: Vec<u32>,
    /// Verbatim stage-one model output.
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parse_notes: Vec<String>,
}

impl KeyBoxSelection {
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id_set(&self) -> BTreeSet<u32> {
        self.ids.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    DocCob,
    VanillaQa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    S1,
    S2,
    Vanilla,
}

/// Why a two-stage run answered from the plain image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    EmptyLayout,
    EmptySelection,
}

/// What to do when stage one selects nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    #[default]
    Vanilla,
    Fail,
}

/// One model call as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_index: u64,
    pub stage: Stage,
    pub request: RequestSummary,
    pub response: ModelResponse,
}

/// Full record of one inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub sample_id: String,
    pub mode: InferenceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s1: Option<CallRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<KeyBoxSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s2: Option<CallRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vanilla: Option<CallRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<FallbackReason>,
    pub answer: String,
    pub total_prompt_tokens: u64,
    pub total_image_tokens: u64,
    pub total_output_tokens: u64,
    pub wall_time_ms: u64,
}

impl InferenceTrace {
    /// The calls of this trace in the order they were made.
    pub fn calls(&self) -> impl Iterator<Item = &CallRecord> {
        [&self.s1, &self.s2, &self.vanilla].into_iter().flatten()
    }

    /// The selected ids when stage two ran.
    pub fn selected_ids(&self) -> Option<&[u32]> {
        self.s2
            .as_ref()
            .and(self.selection.as_ref())
            .map(|s| s.ids.as_slice())
    }

    /// Copy with wall time zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_ms: 0,
            ..self.clone()
        }
    }
}

/// Knobs of the two-stage procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceOptions {
    pub k_max: usize,
    pub fallback: FallbackPolicy,
    pub max_output_tokens: u32,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            k_max: DEFAULT_K_MAX,
            fallback: FallbackPolicy::Vanilla,
            max_output_tokens: 128,
        }
    }
}

/// Runs inferences against one backend, numbering calls from a shared
/// counter.
pub struct Orchestrator<'a, B: Backend + ?Sized> {
    backend: &'a B,
    counter: &'a CallCounter,
    options: InferenceOptions,
}

struct TraceBuilder {
    trace: InferenceTrace,
    started: Instant,
}

impl TraceBuilder {
    fn new(sample_id: &str, mode: InferenceMode) -> Self {
        Self {
            trace: InferenceTrace {
                sample_id: sample_id.to_owned(),
                mode,
                s1: None,
                selection: None,
                s2: None,
                vanilla: None,
                fallback_reason: None,
                answer: String::new(),
                total_prompt_tokens: 0,
                total_image_tokens: 0,
                total_output_tokens: 0,
                wall_time_ms: 0,
            },
            started: Instant::now(),
        }
    }

    fn finish(mut self, answer: &str) -> InferenceTrace {
        let (p, i, o) = self.trace.calls().fold((0, 0, 0), |(p, i, o), c| {
            (
                p + c.response.prompt_token_count,
                i + c.response.image_token_count,
                o + c.response.output_token_count,
            )
        });
        self.trace.total_prompt_tokens = p;
        self.trace.total_image_tokens = i;
        self.trace.total_output_tokens = o;
        self.trace.answer = answer.trim().to_owned();
        self.trace.wall_time_ms = self.started.elapsed().as_millis() as u64;
        self.trace
    }
}

impl<'a, B: Backend + ?Sized> Orchestrator<'a, B> {
    pub fn new(backend: &'a B, counter: &'a CallCounter, options: InferenceOptions) -> Self {
        Self {
            backend,
            counter,
            options,
        }
    }

    pub fn options(&self) -> &InferenceOptions {
        &self.options
    }

    fn call(
        &self,
        stage: Stage,
        images: Vec<RequestImage>,
        instruction: String,
    ) -> Result<CallRecord> {
        let decode = DecodeParams {
            max_output_tokens: self.options.max_output_tokens,
        };
        let request = ModelRequest::new(images, instruction, decode)?;
        let response = self.backend.invoke(&request)?;
        let record = CallRecord {
            call_index: self.counter.next(),
            stage,
            request: request.summary(),
            response,
        };
        tracing::debug!(call = record.call_index, stage = ?stage, "model call");
        Ok(record)
    }

    fn vanilla_call(&self, image: &RgbImage, image_id: &str, question: &str) -> Result<CallRecord> {
        let raw = RequestImage::Raw {
            source_image_id: image_id.to_owned(),
            bytes: encode_png(image),
        };
        self.call(Stage::Vanilla, vec![raw], build_vanilla_prompt(question)?)
    }

    /// Answers in one pass from the unmodified image.
    pub fn infer_vanilla(
        &self,
        sample_id: &str,
        image: &RgbImage,
        image_id: &str,
        question: &str,
    ) -> Result<InferenceTrace> {
        let mut tb = TraceBuilder::new(sample_id, InferenceMode::VanillaQa);
        let call = self.vanilla_call(image, image_id, question)?;
        let answer = call.response.text.clone();
        tb.trace.vanilla = Some(call);
        Ok(tb.finish(&answer))
    }

    /// Select key boxes, then answer from the blur-masked image.
    pub fn infer_doc_cob(
        &self,
        sample_id: &str,
        image: &RgbImage,
        layout: &LayoutSet,
        question: &str,
        style: &RenderStyle,
    ) -> Result<InferenceTrace> {
        build_s1_prompt(question)?;
        let mut tb = TraceBuilder::new(sample_id, InferenceMode::DocCob);

        if layout.is_empty() {
            if self.options.fallback == FallbackPolicy::Fail {
                return Err(Error::Validation {
                    checks: vec!["empty-layout".into()],
                });
            }
            if (image.width(), image.height()) != (layout.image_width, layout.image_height) {
                return Err(Error::Binding(format!(
                    "layout {} does not match the image size",
                    layout.image_id
                )));
            }
            let call = self.vanilla_call(image, &layout.image_id, question)?;
            let answer = call.response.text.clone();
            tb.trace.vanilla = Some(call);
            tb.trace.fallback_reason = Some(FallbackReason::EmptyLayout);
            return Ok(tb.finish(&answer));
        }

        let overlay = render_s1_overlay(image, layout, style)?;
        let s1 = self.call(
            Stage::S1,
            vec![RequestImage::Prompted(overlay)],
            build_s1_prompt(question)?,
        )?;
        let selection = parse_box_ids(&s1.response.text, layout, self.options.k_max);
        tb.trace.s1 = Some(s1);

        if selection.is_empty() {
            tb.trace.selection = Some(selection);
            if self.options.fallback == FallbackPolicy::Fail {
                return Err(Error::Validation {
                    checks: vec!["empty-selection".into()],
                });
            }
            let call = self.vanilla_call(image, &layout.image_id, question)?;
            let answer = call.response.text.clone();
            tb.trace.vanilla = Some(call);
            tb.trace.fallback_reason = Some(FallbackReason::EmptySelection);
            return Ok(tb.finish(&answer));
        }

        let masked = render_s2_mask(image, layout, &selection.id_set(), style)?;
        let prompt = build_s2_prompt(question, &selection, layout)?;
        let s2 = self.call(Stage::S2, vec![RequestImage::Prompted(masked)], prompt)?;
        let answer = s2.response.text.clone();
        tb.trace.selection = Some(selection);
        tb.trace.s2 = Some(s2);
        Ok(tb.finish(&answer))
    }
}
