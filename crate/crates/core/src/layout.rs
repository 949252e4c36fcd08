//! Layout boxes: geometry, reading order, the interchange file adapter and
//! the OCR + K-means analyzer.

mod bbox;
mod kmeans;
mod reading_order;

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bbox::{iou, BBox};
pub use kmeans::{
    cluster_ocr_tokens, default_k, kmeans, token_points, within_cluster_variance, KMeansFit,
    KMeansOptions,
};
pub use reading_order::assign_reading_order;

use crate::error::{Error, Result};

/// Semantic class of a layout region.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Text,
    Title,
    Table,
    Figure,
    List,
    #[default]
    Other,
}

impl Category {
    /// Maps analyzer-specific labels onto the closed category set.
    ///
    /// Unknown labels become [`Category::Other`].
    pub fn from_label(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().as_str() {
            "text" | "plain_text" | "paragraph" | "plain text" => Category::Text,
            "title" | "header" | "heading" | "section_header" => Category::Title,
            "table" | "table_body" => Category::Table,
            "figure" | "image" | "picture" | "chart" => Category::Figure,
            "list" | "list_item" => Category::List,
            _ => Category::Other,
        }
    }
}

/// One indexed layout region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutBox {
    pub id: u32,
    pub bbox: BBox,
    #[serde(default)]
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// The ordered, indexed set of layout boxes of one page image.
///
/// Box ids are always exactly `1..=N` in reading order. Construct through
/// [`LayoutSet::new`], which clips and re-indexes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSet {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub boxes: Vec<LayoutBox>,
}

impl LayoutSet {
    /// Builds a layout from boxes in any order. Boxes are clipped to the
    /// image and re-indexed by reading order.
    pub fn new(
        image_id: impl Into<String>,
        image_width: u32,
        image_height: u32,
        boxes: Vec<LayoutBox>,
    ) -> Result<Self> {
        if image_width == 0 || image_height == 0 {
            return Err(Error::Parameter(format!(
                "image dimensions must be positive, got {image_width}x{image_height}"
            )));
        }
        let mut clipped = Vec::with_capacity(boxes.len());
        for (i, b) in boxes.into_iter().enumerate() {
            let bbox = b
                .bbox
                .clip(image_width, image_height)
                .ok_or_else(|| Error::Record {
                    record: i + 1,
                    message: format!(
                        "box {} has no area inside the {image_width}x{image_height} image",
                        b.bbox
                    ),
                })?;
            clipped.push(LayoutBox { bbox, ..b });
        }
        Ok(Self {
            image_id: image_id.into(),
            image_width,
            image_height,
            boxes: assign_reading_order(clipped),
        })
    }

    /// An empty layout (no boxes). Inference falls back to vanilla QA.
    pub fn empty(image_id: impl Into<String>, image_width: u32, image_height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            image_width,
            image_height,
            boxes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Looks up a box by its 1-based id.
    pub fn get(&self, id: u32) -> Option<&LayoutBox> {
        (id as usize).checked_sub(1).and_then(|i| self.boxes.get(i))
    }

    pub fn contains_id(&self, id: u32) -> bool {
        id >= 1 && id as usize <= self.boxes.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.boxes.iter().map(|b| b.id)
    }

    /// Checks the set invariants: contiguous ids, reading order, bounds.
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            if b.id as usize != i + 1 {
                return Err(Error::Record {
                    record: i + 1,
                    message: format!("expected id {}, found {}", i + 1, b.id),
                });
            }
            if !b.bbox.fits_within(self.image_width, self.image_height) {
                return Err(Error::Record {
                    record: i + 1,
                    message: format!("box {} exceeds image bounds", b.bbox),
                });
            }
        }
        let reordered = assign_reading_order(self.boxes.clone());
        if reordered != self.boxes {
            return Err(Error::Parameter(format!(
                "layout {} is not in reading order",
                self.image_id
            )));
        }
        Ok(())
    }

    /// Writes the layout in the interchange format, one record per line.
    pub fn to_interchange(&self) -> String {
        let mut out = String::new();
        for b in &self.boxes {
            let record = InterchangeRecord {
                bbox: [
                    b.bbox.x as i64,
                    b.bbox.y as i64,
                    b.bbox.w as i64,
                    b.bbox.h as i64,
                ],
                category: Some(category_label(b.category).to_owned()),
                text: b.text.clone(),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn category_label(c: Category) -> &'static str {
    match c {
        Category::Text => "text",
        Category::Title => "title",
        Category::Table => "table",
        Category::Figure => "figure",
        Category::List => "list",
        Category::Other => "other",
    }
}

/// OCR output for one word or line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrToken {
    pub bbox: BBox,
    pub text: String,
    #[serde(default = "full_confidence")]
    pub confidence: f64,
}

fn full_confidence() -> f64 {
    1.0
}

impl OcrToken {
    pub fn new(bbox: BBox, text: impl Into<String>, confidence: f64) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Parameter("OCR token text must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Parameter(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            bbox,
            text,
            confidence,
        })
    }
}

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// One line of a layout interchange file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct InterchangeRecord {
    bbox: [i64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

/// Reads analyzer output in the interchange format (one JSON record per
/// line, blank lines ignored) into a [`LayoutSet`].
///
/// Boxes overhanging the image are clipped; boxes left without area are
/// rejected with the offending line number.
pub fn load_layout(reader: impl BufRead, image_id: &str, dims: Dims) -> Result<LayoutSet> {
    if dims.width == 0 || dims.height == 0 {
        return Err(Error::Parameter(format!(
            "image dimensions must be positive, got {dims}"
        )));
    }
    let mut boxes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InterchangeRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: lineno,
            message: e.to_string(),
        })?;
        let [x, y, w, h] = rec.bbox;
        if w <= 0 || h <= 0 {
            return Err(Error::Record {
                record: lineno,
                message: format!("non-positive box size {w}x{h}"),
            });
        }
        let bbox = BBox::from_signed(x, y, w, h)
            .and_then(|b| b.clip(dims.width, dims.height))
            .ok_or_else(|| Error::Record {
                record: lineno,
                message: format!("box [{x}, {y}, {w}, {h}] has no area inside the {dims} image"),
            })?;
        boxes.push(LayoutBox {
            id: 0,
            bbox,
            category: rec
                .category
                .as_deref()
                .map(Category::from_label)
                .unwrap_or_default(),
            text: rec.text.filter(|t| !t.is_empty()),
        });
    }
    LayoutSet::new(image_id, dims.width, dims.height, boxes)
}

/// Convenience wrapper around [`load_layout`] for a file path.
pub fn load_layout_file(path: &Path, image_id: &str, dims: Dims) -> Result<LayoutSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_layout(std::io::BufReader::new(file), image_id, dims).map_err(|e| e.in_file(path))
}

/// Reads OCR tokens, one JSON record per line.
pub fn load_tokens(reader: impl BufRead) -> Result<Vec<OcrToken>> {
    let mut tokens = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tok: OcrToken = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let tok = OcrToken::new(tok.bbox, tok.text, tok.confidence).map_err(|e| Error::Format {
            line: idx + 1,
            message: e.to_string(),
        })?;
        tokens.push(tok);
    }
    Ok(tokens)
}
