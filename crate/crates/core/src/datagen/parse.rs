use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;

use super::KeyBoxAnnotation;
use crate::error::{Error, Result};
use crate::layout::LayoutSet;

static QUESTION_HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[\s*#]*Q(\d+)[\s*]*:").unwrap());
static HELPFUL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bHELPFUL\s+BOX(?:ES)?[\s*]*:[\s*]*").unwrap());
static CONFUSING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bCONFUSING\s+BOX(?:ES)?[\s*]*:[\s*]*").unwrap());
static BOX_TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)<box>\s*(\d+)\s*</box>").unwrap());
static REASON: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)Reason\s+for\s+<box>\s*(\d+)\s*</box>[\s*]*:").unwrap());

/// Parse result for one expected question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseOutcome {
    Parsed(KeyBoxAnnotation),
    Unparseable { sample_id: String, reason: String },
}

/// Splits annotator output into `Q{i}:` blocks and reads the helpful and
/// confusing brackets and per-box reasons of each.
///
/// `sample_ids[i]` names the question asked as `Q{i+1}`. Ids that are not
/// layout ids are dropped and recorded; a question whose helpful set ends
/// up empty is unparseable. Fails only when no question parses.
///
/// ```
/// # use chainbox::layout::{BBox, LayoutBox, LayoutSet, Category};
/// # use chainbox::datagen::{parse_annotation, ParseOutcome};
/// let boxes = (0..20).map(|i| LayoutBox {
///     id: 0, bbox: BBox::new(0, i * 10, 50, 8).unwrap(), category: Category::Text, text: None,
/// }).collect();
/// let layout = LayoutSet::new("p", 100, 200, boxes).unwrap();
/// let raw = "Q1:\nHELPFUL BOX: [<box>16</box>]\n\nCONFUSING BOX: [<box>15</box>, <box>19</box>]\n\n\
///            Reason for <box>16</box>: **names the applicant**\n\nReason for <box>15</box>: **a similar label**\n";
/// let out = parse_annotation(raw, &layout, &["s1"]).unwrap();
/// let ParseOutcome::Parsed(a) = &out[0] else { panic!() };
/// assert_eq!(a.helpful, [16].into());
/// assert_eq!(a.confusing, [15, 19].into());
/// assert_eq!(a.missing_rationales(), vec![19]);
/// ```
pub fn parse_annotation(
    raw: &str,
    layout: &LayoutSet,
    sample_ids: &[&str],
) -> Result<Vec<ParseOutcome>> {
    let headers: Vec<(usize, usize, usize)> = QUESTION_HEADER
        .captures_iter(raw)
        .filter_map(|c| {
            let m = c.get(0)?;
            Some((c[1].parse().ok()?, m.start(), m.end()))
        })
        .collect();

    let block = |index: usize| -> Option<&str> {
        let pos = headers.iter().position(|h| h.0 == index)?;
        let end = headers.get(pos + 1).map_or(raw.len(), |h| h.1);
        Some(&raw[headers[pos].2..end])
    };

    let outcomes: Vec<ParseOutcome> = sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let sample_id = (*id).to_owned();
            match block(i + 1) {
                None => ParseOutcome::Unparseable {
                    sample_id,
                    reason: format!("no Q{} block", i + 1),
                },
                Some(text) => match parse_block(text, layout) {
                    Ok(mut a) => {
                        a.sample_id = sample_id;
                        a.annotator_raw = raw.to_owned();
                        if headers.iter().filter(|h| h.0 == i + 1).count() > 1 {
                            a.notes
                                .push(format!("repeated Q{} block; first one used", i + 1));
                        }
                        ParseOutcome::Parsed(a)
                    }
                    Err(reason) => ParseOutcome::Unparseable { sample_id, reason },
                },
            }
        })
        .collect();

    if !sample_ids.is_empty()
        && outcomes
            .iter()
            .all(|o| matches!(o, ParseOutcome::Unparseable { .. }))
    {
        return Err(Error::Format {
            line: 0,
            message: format!(
                "no parseable question block among {} expected",
                sample_ids.len()
            ),
        });
    }
    Ok(outcomes)
}

/// Ids inside the `[...]` that follows `label`, in order of mention.
fn bracket_ids(label: &Regex, name: &str, block: &str) -> Result<Vec<u64>, String> {
    let m = label
        .find(block)
        .ok_or_else(|| format!("missing {name} line"))?;
    let rest = &block[m.end()..];
    let rest = rest
        .strip_prefix('[')
        .ok_or_else(|| format!("{name}: expected '['"))?;
    let close = rest
        .find(']')
        .ok_or_else(|| format!("{name}: unclosed bracket"))?;
    let inner = &rest[..close];
    let leftover = BOX_TAG.replace_all(inner, "");
    if !leftover.chars().all(|c| c.is_whitespace() || c == ',') {
        return Err(format!("{name}: unexpected content {:?}", leftover.trim()));
    }
    BOX_TAG
        .captures_iter(inner)
        .map(|c| {
            c[1].parse::<u64>()
                .map_err(|_| format!("{name}: id {} out of range", &c[1]))
        })
        .collect()
}

fn parse_block(block: &str, layout: &LayoutSet) -> Result<KeyBoxAnnotation, String> {
    let mut a = KeyBoxAnnotation::default();
    let valid = |id: u64| u32::try_from(id).ok().filter(|id| layout.contains_id(*id));

    for (label, name, is_helpful) in [
        (&*HELPFUL, "HELPFUL BOX", true),
        (&*CONFUSING, "CONFUSING BOX", false),
    ] {
        let mut seen = BTreeSet::new();
        for id in bracket_ids(label, name, block)? {
            match valid(id) {
                None => {
                    a.notes
                        .push(format!("{name}: dropped id {id}, not in layout"));
                    a.dropped_ids.push(id);
                }
                Some(id) if !seen.insert(id) => {
                    a.notes.push(format!("{name}: repeated id {id}"));
                    a.duplicate_ids.push(id);
                }
                Some(id) => {
                    if is_helpful {
                        a.helpful.insert(id);
                    } else {
                        a.confusing.insert(id);
                    }
                }
            }
        }
    }
    if a.helpful.is_empty() {
        return Err("no valid helpful box".into());
    }

    let reasons: Vec<_> = REASON.captures_iter(block).collect();
    for (i, c) in reasons.iter().enumerate() {
        let whole = c.get(0).expect("match");
        let end = reasons
            .get(i + 1)
            .map_or(block.len(), |n| n.get(0).expect("match").start());
        let text = clean_reason(&block[whole.end()..end]);
        let Some(id) = c[1].parse::<u64>().ok().and_then(valid) else {
            a.notes
                .push(format!("reason for unknown box {} ignored", &c[1]));
            continue;
        };
        if text.is_empty() {
            continue;
        }
        if let std::collections::btree_map::Entry::Vacant(e) = a.rationales.entry(id) {
            e.insert(text);
        } else {
            a.notes
                .push(format!("repeated reason for box {id}; first one kept"));
        }
    }
    Ok(a)
}

fn clean_reason(s: &str) -> String {
    let joined = s.split_whitespace().collect::<Vec<_>>().join(" ");
    joined
        .trim_matches(|c: char| c == '*' || c.is_whitespace())
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{BBox, Category, LayoutBox};
    use proptest::prelude::*;

    fn layout(n: u32) -> LayoutSet {
        let boxes = (0..n)
            .map(|i| LayoutBox {
                id: 0,
                bbox: BBox::new(0, i * 10, 50, 8).unwrap(),
                category: Category::Text,
                text: None,
            })
            .collect();
        LayoutSet::new("p", 100, 10 * n.max(1), boxes).unwrap()
    }

    const EXAMPLE: &str = "Q1:\nHELPFUL BOX: [<box>16</box>]\n\nCONFUSING BOX: [<box>15</box>, <box>19</box>]\n\n\
        Reason for <box>16</box>: **30-50 word explanation**\n\nReason for <box>15</box>: **30-50 word explanation**\n\n\
        Q2:\n\nHELPFUL BOX: [<box>2</box>, <box>3</box>, <box>4</box>]\n\nCONFUSING BOX: []\n\n\
        Reason for <box>2</box>: **30-50 word explanation**\n\nReason for <box>3</box>: **30-50 word explanation**\n\n\
        Reason for <box>4</box>: **30-50 word explanation**\n";

    fn parsed(o: &ParseOutcome) -> &KeyBoxAnnotation {
        match o {
            ParseOutcome::Parsed(a) => a,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn format_example() {
        let out = parse_annotation(EXAMPLE, &layout(20), &["a", "b"]).unwrap();
        let a = parsed(&out[0]);
        assert_eq!(a.sample_id, "a");
        assert_eq!(a.helpful, [16].into());
        assert_eq!(a.confusing, [15, 19].into());
        assert_eq!(
            a.rationales.keys().copied().collect::<Vec<_>>(),
            vec![15, 16]
        );
        assert_eq!(a.rationales[&16], "30-50 word explanation");
        assert_eq!(a.missing_rationales(), vec![19]);
        let b = parsed(&out[1]);
        assert_eq!(b.helpful, [2, 3, 4].into());
        assert!(b.confusing.is_empty());
        assert!(b.missing_rationales().is_empty());
    }

    #[test]
    fn out_of_layout_ids_dropped() {
        let out = parse_annotation(EXAMPLE, &layout(16), &["a", "b"]).unwrap();
        let a = parsed(&out[0]);
        assert_eq!(a.confusing, [15].into());
        assert_eq!(a.dropped_ids, vec![19]);

        let out = parse_annotation(EXAMPLE, &layout(10), &["a", "b"]).unwrap();
        assert!(
            matches!(&out[0], ParseOutcome::Unparseable { reason, .. } if reason == "no valid helpful box")
        );
    }

    #[test]
    fn malformed_and_missing_blocks() {
        let raw = "Q1:\nHELPFUL BOX: [<box>1</box>, box 2]\nCONFUSING BOX: []\n\
                   Q2:\nHELPFUL BOX: [<box>1</box>\n\
                   Q3:\nHELPFUL BOX: [<box>1</box>]\nReason for <box>1</box>: r\n\
                   Q4:\n**HELPFUL BOX:** [<box>2</box>]\n**CONFUSING BOX:** []\nReason for <box>2</box>: multi\nline reason\n";
        let out = parse_annotation(raw, &layout(5), &["a", "b", "c", "d", "e"]).unwrap();
        assert!(matches!(&out[0], ParseOutcome::Unparseable { .. }));
        assert!(matches!(&out[1], ParseOutcome::Unparseable { .. }));
        assert!(
            matches!(&out[2], ParseOutcome::Unparseable { reason, .. } if reason.contains("CONFUSING"))
        );
        assert_eq!(parsed(&out[3]).rationales[&2], "multi line reason");
        assert!(
            matches!(&out[4], ParseOutcome::Unparseable { reason, .. } if reason == "no Q5 block")
        );
        assert!(matches!(
            parse_annotation("nothing", &layout(5), &["a"]),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        #[test]
        fn no_ids_lost(
            helpful in proptest::collection::vec(1u64..30, 1..6),
            confusing in proptest::collection::vec(1u64..30, 0..6),
            n in 1u32..25,
        ) {
            let fmt = |ids: &[u64]| ids.iter().map(|i| format!("<box>{i}</box>")).collect::<Vec<_>>().join(", ");
            let raw = format!("Q1:\nHELPFUL BOX: [{}]\nCONFUSING BOX: [{}]\n", fmt(&helpful), fmt(&confusing));
            let out = parse_annotation(&raw, &layout(n), &["a"]);
            let mentioned = helpful.len() + confusing.len();
            match out {
                Ok(v) => {
                    let a = parsed(&v[0]);
                    prop_assert_eq!(a.helpful.len() + a.confusing.len() + a.dropped_ids.len() + a.duplicate_ids.len(), mentioned);
                }
                Err(_) => prop_assert!(helpful.iter().all(|&h| h > n as u64)),
            }
        }
    }
}
