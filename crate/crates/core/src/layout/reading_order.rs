use std::cmp::Ordering;

use super::LayoutBox;

/// Sorts boxes into reading order and assigns ids `1..=N`.
///
/// Boxes are grouped into row bands: a box joins the current band when its
/// vertical overlap with the band's first box exceeds half the shorter of
/// the two heights. Bands run top to bottom, boxes within a band left to
/// right. Remaining ties fall back to `(y, x, w, h)`, then category and
/// text, so the result does not depend on input order.
pub fn assign_reading_order(mut boxes: Vec<LayoutBox>) -> Vec<LayoutBox> {
    boxes.sort_by(full_key);

    let mut bands: Vec<Vec<LayoutBox>> = Vec::new();
    for b in boxes {
        match bands.last_mut() {
            Some(band) if same_band(&band[0], &b) => band.push(b),
            _ => bands.push(vec![b]),
        }
    }

    let mut ordered = Vec::new();
    for mut band in bands {
        band.sort_by(|a, b| a.bbox.x.cmp(&b.bbox.x).then_with(|| full_key(a, b)));
        ordered.extend(band);
    }
    for (i, b) in ordered.iter_mut().enumerate() {
        b.id = i as u32 + 1;
    }
    ordered
}

fn same_band(anchor: &LayoutBox, candidate: &LayoutBox) -> bool {
    let overlap = anchor.bbox.vertical_overlap(&candidate.bbox) as u64;
    let shorter = anchor.bbox.h.min(candidate.bbox.h) as u64;
    // overlap > shorter / 2, in integers
    2 * overlap > shorter
}

fn full_key(a: &LayoutBox, b: &LayoutBox) -> Ordering {
    let (p, q) = (&a.bbox, &b.bbox);
    (p.y, p.x, p.w, p.h)
        .cmp(&(q.y, q.x, q.w, q.h))
        .then_with(|| a.category.cmp(&b.category))
        .then_with(|| a.text.cmp(&b.text))
}
