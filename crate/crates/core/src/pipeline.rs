//! Corpus access and the batch jobs behind the command-line tool.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, CallCounter};
use crate::datagen::{
    annotate_image, qa_batch, synthesize_box_id_task, synthesize_box_query_task, Disposition,
    QASample,
};
use crate::error::{Error, Result};
use crate::eval::Prediction;
use crate::layout::{load_layout_file, Dims, LayoutSet};
use crate::orchestrator::{InferenceMode, InferenceOptions, InferenceTrace, Orchestrator};
use crate::render::{encode_png, render_s1_overlay, StyleOverrides};
use crate::store::{write_jsonl, Dataset, DatasetRecord, Provenance, ReviewItem, ReviewQueue};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Page images and their layout files.
#[derive(Debug, Clone)]
pub struct Corpus {
    images: PathBuf,
    layouts: PathBuf,
}

fn check_id(image_id: &str) -> Result<()> {
    if image_id.is_empty() || image_id.starts_with('.') || image_id.contains(['/', '\\']) {
        return Err(Error::Parameter(format!("invalid image id {image_id:?}")));
    }
    Ok(())
}

impl Corpus {
    pub fn new(images: impl Into<PathBuf>, layouts: impl Into<PathBuf>) -> Self {
        Self {
            images: images.into(),
            layouts: layouts.into(),
        }
    }

    pub fn image_path(&self, image_id: &str) -> Result<PathBuf> {
        check_id(image_id)?;
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| self.images.join(format!("{image_id}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::NotFound(format!("image {image_id} in {}", self.images.display()))
            })
    }

    pub fn layout_path(&self, image_id: &str) -> Result<PathBuf> {
        check_id(image_id)?;
        Ok(self.layouts.join(format!("{image_id}.jsonl")))
    }

    /// Ids of every image in the image directory, sorted.
    pub fn image_ids(&self) -> Result<Vec<String>> {
        let entries = std::fs::read_dir(&self.images).map_err(|e| Error::io(&self.images, e))?;
        let mut ids = BTreeSet::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&self.images, e))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.insert(stem.to_owned());
                }
            }
        }
        Ok(ids.into_iter().collect())
    }

    pub fn load_image(&self, image_id: &str) -> Result<RgbImage> {
        crate::render::load_image(&self.image_path(image_id)?)
    }

    /// The layout of `image_id`, bound to the image's size.
    pub fn load_layout(&self, image_id: &str, dims: Dims) -> Result<LayoutSet> {
        let path = self.layout_path(image_id)?;
        if !path.is_file() {
            return Err(Error::NotFound(format!("layout file {}", path.display())));
        }
        load_layout_file(&path, image_id, dims)
    }

    pub fn load_page(&self, image_id: &str) -> Result<(RgbImage, LayoutSet)> {
        let image = self.load_image(image_id)?;
        let dims = Dims {
            width: image.width(),
            height: image.height(),
        };
        let layout = self.load_layout(image_id, dims)?;
        Ok((image, layout))
    }
}

/// Runs `job` over `0..n` on up to `workers` threads and returns the
/// results in index order. Stops handing out work after the first error.
fn parallel_map<T: Send>(
    n: usize,
    workers: usize,
    job: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let failed = std::sync::atomic::AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = job(i);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    let slots = slots.into_inner().expect("result lock");
    if failed.load(Ordering::SeqCst) {
        let first = slots.into_iter().flatten().find_map(|r| r.err());
        return Err(first.expect("a failed job left its error"));
    }
    Ok(slots
        .into_iter()
        .map(|r| r.expect("every job ran").expect("no job failed"))
        .collect())
}

/// Pages loaded once and shared between jobs.
struct PageCache<'a> {
    corpus: &'a Corpus,
    pages: Mutex<BTreeMap<String, std::sync::Arc<(RgbImage, LayoutSet)>>>,
}

impl<'a> PageCache<'a> {
    fn new(corpus: &'a Corpus) -> Self {
        Self {
            corpus,
            pages: Mutex::new(BTreeMap::new()),
        }
    }

    fn get(&self, image_id: &str) -> Result<std::sync::Arc<(RgbImage, LayoutSet)>> {
        if let Some(p) = self.pages.lock().expect("page lock").get(image_id) {
            return Ok(p.clone());
        }
        let page = std::sync::Arc::new(self.corpus.load_page(image_id)?);
        self.pages
            .lock()
            .expect("page lock")
            .insert(image_id.to_owned(), page.clone());
        Ok(page)
    }
}

/// Answers every sample. Traces come back in sample order; call indices
/// follow issue order, so they are reproducible with one worker.
pub fn run_inference<B: Backend + ?Sized>(
    backend: &B,
    corpus: &Corpus,
    samples: &[QASample],
    mode: InferenceMode,
    options: InferenceOptions,
    style: &StyleOverrides,
    workers: usize,
) -> Result<Vec<InferenceTrace>> {
    let counter = CallCounter::new();
    let orch = Orchestrator::new(backend, &counter, options);
    let pages = PageCache::new(corpus);
    parallel_map(samples.len(), workers, |i| {
        let s = &samples[i];
        let page = pages.get(&s.image_id)?;
        let (image, layout) = &*page;
        let trace = match mode {
            InferenceMode::DocCob => {
                let st = style.resolve(image.width(), image.height());
                orch.infer_doc_cob(&s.sample_id, image, layout, &s.question, &st)
            }
            InferenceMode::VanillaQa => {
                orch.infer_vanilla(&s.sample_id, image, &s.image_id, &s.question)
            }
        };
        trace.inspect_err(
            |e| tracing::error!(sample_id = %s.sample_id, error = %e, "inference failed"),
        )
    })
}

/// The prediction line for a trace.
pub fn prediction_from_trace(trace: &InferenceTrace) -> Prediction {
    Prediction {
        sample_id: trace.sample_id.clone(),
        answer: trace.answer.clone(),
        selection: trace.selection.clone(),
        fields: Vec::new(),
    }
}

/// Raw annotator output for the questions of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorOutput {
    pub image_id: String,
    /// Sample ids in the order they were asked, `Q1` first.
    pub sample_ids: Vec<String>,
    pub raw: String,
}

/// Groups samples by image, in image id order.
fn by_image(samples: &[QASample]) -> Vec<(String, Vec<QASample>)> {
    let mut groups: BTreeMap<&str, Vec<QASample>> = BTreeMap::new();
    for s in samples {
        groups
            .entry(s.image_id.as_str())
            .or_default()
            .push(s.clone());
    }
    groups.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

/// One annotator call per image covering all of its samples.
pub fn run_annotation<B: Backend + ?Sized>(
    backend: &B,
    corpus: &Corpus,
    samples: &[QASample],
    style: &StyleOverrides,
    max_output_tokens: u32,
    workers: usize,
) -> Result<Vec<AnnotatorOutput>> {
    let groups = by_image(samples);
    parallel_map(groups.len(), workers, |i| {
        let (image_id, group) = &groups[i];
        let (image, layout) = corpus.load_page(image_id)?;
        let st = style.resolve(image.width(), image.height());
        let response = annotate_image(backend, &image, &layout, group, &st, max_output_tokens)?;
        Ok(AnnotatorOutput {
            image_id: image_id.clone(),
            sample_ids: group.iter().map(|s| s.sample_id.clone()).collect(),
            raw: response.text,
        })
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSummary {
    pub samples: usize,
    /// Samples skipped because a record or review item already exists.
    pub skipped: usize,
    pub accepted: usize,
    pub queued: usize,
}

/// Runs the QA checks on annotator outputs and writes each question
/// either to `dataset` or to `queue`. Questions already stored in either
/// are skipped.
pub fn run_qa(
    corpus: &Corpus,
    samples: &[QASample],
    outputs: &[AnnotatorOutput],
    dataset: &mut Dataset,
    queue: &mut ReviewQueue,
) -> Result<QaSummary> {
    let index: BTreeMap<&str, &QASample> =
        samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut summary = QaSummary::default();
    for out in outputs {
        let group = out
            .sample_ids
            .iter()
            .map(|id| {
                let s = index.get(id.as_str()).ok_or_else(|| Error::Join {
                    missing: vec![id.clone()],
                })?;
                if s.image_id != out.image_id {
                    return Err(Error::Parameter(format!(
                        "sample {id} is not on image {}",
                        out.image_id
                    )));
                }
                if s.dataset_tag != dataset.tag() {
                    return Err(Error::Parameter(format!(
                        "sample {id} is tagged {:?}, dataset is {:?}",
                        s.dataset_tag,
                        dataset.tag()
                    )));
                }
                Ok((*s).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        summary.samples += group.len();
        let (_, layout) = corpus.load_page(&out.image_id)?;
        let image_path = corpus.image_path(&out.image_id)?.display().to_string();
        let layout_path = corpus.layout_path(&out.image_id)?.display().to_string();
        for routed in qa_batch(&out.raw, &layout, &group) {
            let s = routed.sample;
            if dataset.contains(&s.sample_id)
                || queue.get(&format!("review-{}", s.sample_id)).is_some()
            {
                summary.skipped += 1;
                continue;
            }
            let record = DatasetRecord {
                sample_id: s.sample_id.clone(),
                image_id: s.image_id.clone(),
                image_path: image_path.clone(),
                layout_path: layout_path.clone(),
                question: s.question.clone(),
                answers: s.answers.clone(),
                annotation: routed.annotation,
                provenance: Provenance::AutoPassed,
                dataset_tag: s.dataset_tag.clone(),
                split: s.split.clone(),
                layout_box_count: layout.len(),
            };
            match routed.disposition {
                Disposition::Dataset => {
                    dataset.append_record(&record)?;
                    summary.accepted += 1;
                }
                Disposition::Review { reasons } => {
                    tracing::info!(sample_id = %s.sample_id, ?reasons, "routed to review");
                    queue.enqueue(ReviewItem::pending(record, layout.clone(), reasons))?;
                    summary.queued += 1;
                }
            }
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnablingSummary {
    pub images: usize,
    pub box_id: usize,
    pub box_query: usize,
}

/// Writes S1 overlays and both enabling-task files for the images and
/// annotations in `records`:
///
/// - `<out>/overlays/<image_id>.png`
/// - `<out>/box_id.jsonl`
/// - `<out>/box_query.jsonl`
pub fn run_enabling_tasks(
    corpus: &Corpus,
    records: &[DatasetRecord],
    style: &StyleOverrides,
    cap: usize,
    seed: u64,
    out: &Path,
) -> Result<EnablingSummary> {
    let overlays = out.join("overlays");
    std::fs::create_dir_all(&overlays).map_err(|e| Error::io(&overlays, e))?;
    let images: BTreeSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let mut overlay_of = BTreeMap::new();
    let mut box_counts = BTreeMap::new();
    let mut box_id = Vec::new();
    for image_id in &images {
        let (image, layout) = corpus.load_page(image_id)?;
        let st = style.resolve(image.width(), image.height());
        let path = overlays.join(format!("{image_id}.png"));
        let rendered = render_s1_overlay(&image, &layout, &st)?;
        std::fs::write(&path, &rendered.image_bytes).map_err(|e| Error::io(&path, e))?;
        let name = format!("overlays/{image_id}.png");
        box_id.extend(synthesize_box_id_task(&layout, cap, seed, &name));
        overlay_of.insert(*image_id, name);
        box_counts.insert(*image_id, layout.len());
    }

    let mut sorted: Vec<&DatasetRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut box_query = Vec::new();
    for r in sorted {
        if box_counts[r.image_id.as_str()] != r.layout_box_count {
            return Err(Error::Binding(format!(
                "record {} was annotated on {} boxes, layout {} now has {}",
                r.sample_id,
                r.layout_box_count,
                r.image_id,
                box_counts[r.image_id.as_str()]
            )));
        }
        box_query.extend(synthesize_box_query_task(
            &r.annotation,
            &r.qa_sample(),
            &overlay_of[r.image_id.as_str()],
        ));
    }
    write_jsonl(&out.join("box_id.jsonl"), &box_id)?;
    write_jsonl(&out.join("box_query.jsonl"), &box_query)?;
    Ok(EnablingSummary {
        images: images.len(),
        box_id: box_id.len(),
        box_query: box_query.len(),
    })
}

/// PNG bytes of an image in the requested role.
pub fn page_png(
    corpus: &Corpus,
    image_id: &str,
    overlay: Option<&StyleOverrides>,
) -> Result<Vec<u8>> {
    match overlay {
        None => {
            let path = corpus.image_path(image_id)?;
            if path.extension().is_some_and(|e| e == "png") {
                std::fs::read(&path).map_err(|e| Error::io(&path, e))
            } else {
                Ok(encode_png(&corpus.load_image(image_id)?))
            }
        }
        Some(style) => {
            let (image, layout) = corpus.load_page(image_id)?;
            let st = style.resolve(image.width(), image.height());
            Ok(render_s1_overlay(&image, &layout, &st)?.image_bytes)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order_and_stops() {
        let out = parallel_map(50, 4, |i| Ok(i * 2)).unwrap();
        assert_eq!(out, (0..50).map(|i| i * 2).collect::<Vec<_>>());
        assert!(parallel_map(50, 4, |i| if i == 7 {
            Err(Error::Parameter("x".into()))
        } else {
            Ok(i)
        })
        .is_err());
        assert!(parallel_map(0, 4, Ok).unwrap().is_empty());
    }

    #[test]
    fn corpus_paths() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img");
        std::fs::create_dir_all(&images).unwrap();
        RgbImage::new(4, 4).save(images.join("b.png")).unwrap();
        RgbImage::new(4, 4).save(images.join("a.png")).unwrap();
        std::fs::write(images.join("notes.txt"), "x").unwrap();
        let c = Corpus::new(&images, dir.path().join("lay"));
        assert_eq!(c.image_ids().unwrap(), vec!["a", "b"]);
        assert!(matches!(c.image_path("zz"), Err(Error::NotFound(_))));
        assert!(c.image_path("../a").is_err());
        assert!(matches!(c.load_page("a"), Err(Error::NotFound(_))));
    }
}
