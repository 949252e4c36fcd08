use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;

use super::KeyBoxSelection;
use crate::layout::LayoutSet;

static TAGGED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<box>\s*(\d+)\s*</box>").unwrap());
// "box 3", "Box #3", "box ID 3", "boxes 3, 5 and 6"
static NAMED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\bbox(?:es)?\s*(?:ids?\s*)?[#:]?\s*(\d+(?:\s*(?:,|&|/|\band\b|\bor\b)\s*#?\d+)*)",
    )
    .unwrap()
});
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

/// Candidate ids in text order, from the highest-priority pattern family
/// that matches at all: `<box>n</box>` tags, then "box n" phrases, then
/// bare integers.
pub(crate) fn candidate_ids(raw: &str) -> Vec<u64> {
    let numbers = |s: &str| -> Vec<u64> {
        NUMBER
            .find_iter(s)
            .map(|m| m.as_str().parse().unwrap_or(u64::MAX))
            .collect()
    };
    let tagged: Vec<u64> = TAGGED
        .captures_iter(raw)
        .flat_map(|c| numbers(&c[1]))
        .collect();
    if !tagged.is_empty() {
        return tagged;
    }
    let named: Vec<u64> = NAMED
        .captures_iter(raw)
        .flat_map(|c| numbers(&c[1]))
        .collect();
    if !named.is_empty() {
        return named;
    }
    numbers(raw)
}

/// Extracts the selected box ids from a stage-one answer.
///
/// Ids are deduplicated keeping first occurrences, ids outside `1..=N` are
/// dropped and the list is cut to `k_max`. Every drop is noted in
/// `parse_notes`. An empty result means the selection failed.
pub fn parse_box_ids(raw: &str, layout: &LayoutSet, k_max: usize) -> KeyBoxSelection {
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let mut notes = Vec::new();
    for id in candidate_ids(raw) {
        if id == 0 || id > layout.len() as u64 {
            notes.push(format!(
                "dropped out-of-range id {id} (layout has {} boxes)",
                layout.len()
            ));
            continue;
        }
        if !seen.insert(id) {
            notes.push(format!("dropped duplicate id {id}"));
            continue;
        }
        ids.push(id as u32);
    }
    if ids.len() > k_max {
        let cut: Vec<String> = ids[k_max..].iter().map(u32::to_string).collect();
        notes.push(format!(
            "truncated to k_max = {k_max}, dropped {}",
            cut.join(", ")
        ));
        ids.truncate(k_max);
    }
    KeyBoxSelection {
        ids,
        raw_text: raw.to_owned(),
        parse_notes: notes,
    }
}
