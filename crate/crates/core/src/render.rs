//! The two visual prompts: the indexed S1 overlay and the S2 blur reverse
//! mask.
//!
//! Rendering is a pure function of the input pixels, the layout, the key
//! ids and the [`RenderStyle`]. All arithmetic is integer or fixed point,
//! and PNG output uses fixed encoder settings, so identical inputs produce
//! byte-identical files.

mod blur;
mod font;

use std::collections::BTreeSet;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{BBox, LayoutSet};

/// Stroke, tag and blur parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    pub border_color: [u8; 3],
    pub border_thickness: u32,
    pub label_font_px: u32,
    pub blur_sigma: f64,
}

impl RenderStyle {
    /// Resolution-proportional defaults for a `width` x `height` page.
    pub fn for_dims(width: u32, height: u32) -> Self {
        let min_side = width.min(height) as f64;
        Self {
            border_color: [255, 0, 0],
            border_thickness: ((0.003 * min_side).round() as u32).max(2),
            label_font_px: ((0.02 * min_side).round() as u32).max(12),
            blur_sigma: (0.008 * min_side).max(2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.border_thickness < 1 {
            return Err(Error::Parameter(
                "border thickness must be at least 1".into(),
            ));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "blur sigma must be positive, got {}",
                self.blur_sigma
            )));
        }
        if self.label_font_px < 8 {
            return Err(Error::Parameter(format!(
                "label font must be at least 8px, got {}",
                self.label_font_px
            )));
        }
        Ok(())
    }

    fn glyph_scale(&self) -> u32 {
        (self.label_font_px / 10).max(1)
    }
}

/// Optional per-field overrides on top of [`RenderStyle::for_dims`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleOverrides {
    pub border_color: Option<[u8; 3]>,
    pub border_thickness: Option<u32>,
    pub label_font_px: Option<u32>,
    pub blur_sigma: Option<f64>,
}

impl StyleOverrides {
    pub fn resolve(&self, width: u32, height: u32) -> RenderStyle {
        let base = RenderStyle::for_dims(width, height);
        RenderStyle {
            border_color: self.border_color.unwrap_or(base.border_color),
            border_thickness: self.border_thickness.unwrap_or(base.border_thickness),
            label_font_px: self.label_font_px.unwrap_or(base.label_font_px),
            blur_sigma: self.blur_sigma.unwrap_or(base.blur_sigma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    S1Overlay,
    S2Mask,
}

/// A rendered visual prompt, PNG encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptedImage {
    pub role: PromptRole,
    pub image_bytes: Vec<u8>,
    pub source_image_id: String,
    pub boxes_rendered: Vec<u32>,
}

/// Decodes a PNG or JPEG into 8-bit RGB.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let format = image::guess_format(bytes).map_err(|e| Error::Image(e.to_string()))?;
    match format {
        image::ImageFormat::Png | image::ImageFormat::Jpeg => {}
        other => return Err(Error::Image(format!("unsupported input format {other:?}"))),
    }
    image::load_from_memory_with_format(bytes, format)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image(e.to_string()))
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| e.in_file(path))
}

/// PNG with fixed compression and filter settings.
pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive)
        .write_image(
            image.as_raw(),
            image.width(),
            image.height(),
            image::ExtendedColorType::Rgb8,
        )
        .expect("in-memory PNG encoding");
    out
}

fn check_binding(image: &RgbImage, layout: &LayoutSet) -> Result<()> {
    if image.dimensions() != (layout.image_width, layout.image_height) {
        return Err(Error::Binding(format!(
            "layout {} is for {}x{} but the image is {}x{}",
            layout.image_id,
            layout.image_width,
            layout.image_height,
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Fills the inner stroke of `bbox`: pixels of the box closer than
/// `thickness` to its edge.
fn stroke(canvas: &mut RgbImage, bbox: &BBox, thickness: u32, color: Rgb<u8>) {
    let (w, h) = canvas.dimensions();
    let t = thickness;
    for py in bbox.y..bbox.bottom().min(h) {
        let edge_row = py < bbox.y + t || py + t >= bbox.bottom();
        for px in bbox.x..bbox.right().min(w) {
            if edge_row || px < bbox.x + t || px + t >= bbox.right() {
                canvas.put_pixel(px, py, color);
            }
        }
    }
}

/// Rectangle occupied by the id tag of a box.
///
/// The tag sits just above the box's top-left corner, or inside the box when
/// there is no room above, and is shifted left to stay within the image.
pub fn label_tag_rect(bbox: &BBox, id: u32, style: &RenderStyle, width: u32, height: u32) -> BBox {
    let scale = style.glyph_scale();
    let digits = id.to_string().len() as u32;
    let pad = scale.max(2);
    let tag_w = (font::text_width(digits, scale) + 2 * pad).min(width);
    let tag_h = style
        .label_font_px
        .max(font::GLYPH_H * scale + 2)
        .min(height);
    let y = if bbox.y >= tag_h {
        bbox.y - tag_h
    } else {
        bbox.y.min(height - tag_h)
    };
    let x = bbox.x.min(width - tag_w);
    BBox::new(x, y, tag_w, tag_h).expect("tag has positive size")
}

fn text_color(fill: [u8; 3]) -> Rgb<u8> {
    let luma = (299 * fill[0] as u32 + 587 * fill[1] as u32 + 114 * fill[2] as u32) / 1000;
    if luma > 160 {
        Rgb([0, 0, 0])
    } else {
        Rgb([255, 255, 255])
    }
}

fn draw_tag(canvas: &mut RgbImage, bbox: &BBox, id: u32, style: &RenderStyle) {
    let (w, h) = canvas.dimensions();
    let rect = label_tag_rect(bbox, id, style, w, h);
    let fill = Rgb(style.border_color);
    for py in rect.y..rect.bottom() {
        for px in rect.x..rect.right() {
            canvas.put_pixel(px, py, fill);
        }
    }
    let scale = style.glyph_scale();
    let ink = text_color(style.border_color);
    let text = id.to_string();
    let text_w = font::text_width(text.len() as u32, scale);
    let text_h = font::GLYPH_H * scale;
    let ox = rect.x + rect.w.saturating_sub(text_w) / 2;
    let oy = rect.y + rect.h.saturating_sub(text_h) / 2;
    for (i, ch) in text.bytes().enumerate() {
        let digit = ch - b'0';
        let gx = ox + i as u32 * (font::GLYPH_W + 1) * scale;
        for row in 0..font::GLYPH_H {
            for col in 0..font::GLYPH_W {
                if !font::is_set(digit, col, row) {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (px, py) = (gx + col * scale + dx, oy + row * scale + dy);
                        if rect.contains_point(px, py) {
                            canvas.put_pixel(px, py, ink);
                        }
                    }
                }
            }
        }
    }
}

/// Draws every box outline and its id tag onto a copy of `image`.
pub fn draw_s1_overlay(
    image: &RgbImage,
    layout: &LayoutSet,
    style: &RenderStyle,
) -> Result<RgbImage> {
    style.validate()?;
    check_binding(image, layout)?;
    let mut canvas = image.clone();
    let color = Rgb(style.border_color);
    for b in &layout.boxes {
        stroke(&mut canvas, &b.bbox, style.border_thickness, color);
    }
    for b in &layout.boxes {
        draw_tag(&mut canvas, &b.bbox, b.id, style);
    }
    Ok(canvas)
}

/// Renders the S1 prompt image: all boxes outlined and labelled by id.
pub fn render_s1_overlay(
    image: &RgbImage,
    layout: &LayoutSet,
    style: &RenderStyle,
) -> Result<PromptedImage> {
    let canvas = draw_s1_overlay(image, layout, style)?;
    Ok(PromptedImage {
        role: PromptRole::S1Overlay,
        image_bytes: encode_png(&canvas),
        source_image_id: layout.image_id.clone(),
        boxes_rendered: layout.ids().collect(),
    })
}

/// Blurs the page, restores the key boxes sharp, then outlines them.
pub fn draw_s2_mask(
    image: &RgbImage,
    layout: &LayoutSet,
    key_ids: &BTreeSet<u32>,
    style: &RenderStyle,
) -> Result<RgbImage> {
    style.validate()?;
    check_binding(image, layout)?;
    if key_ids.is_empty() {
        return Err(Error::Parameter(
            "the blur mask needs at least one key box".into(),
        ));
    }
    let key_boxes: Vec<BBox> = key_ids
        .iter()
        .map(|&id| {
            layout.get(id).map(|b| b.bbox).ok_or_else(|| {
                Error::Parameter(format!(
                    "key box {id} is not in layout {} (1..={})",
                    layout.image_id,
                    layout.len()
                ))
            })
        })
        .collect::<Result<_>>()?;

    let mut canvas = blur::gaussian_blur(image, style.blur_sigma);
    for bbox in &key_boxes {
        for py in bbox.y..bbox.bottom() {
            for px in bbox.x..bbox.right() {
                canvas.put_pixel(px, py, *image.get_pixel(px, py));
            }
        }
    }
    let color = Rgb(style.border_color);
    for bbox in &key_boxes {
        stroke(&mut canvas, bbox, style.border_thickness, color);
    }
    Ok(canvas)
}

/// Renders the S2 prompt image for the selected key boxes.
pub fn render_s2_mask(
    image: &RgbImage,
    layout: &LayoutSet,
    key_ids: &BTreeSet<u32>,
    style: &RenderStyle,
) -> Result<PromptedImage> {
    let canvas = draw_s2_mask(image, layout, key_ids, style)?;
    Ok(PromptedImage {
        role: PromptRole::S2Mask,
        image_bytes: encode_png(&canvas),
        source_image_id: layout.image_id.clone(),
        boxes_rendered: key_ids.iter().copied().collect(),
    })
}
