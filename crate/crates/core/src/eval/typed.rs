use std::collections::BTreeMap;
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::keybox::Counts;
use crate::error::{Error, Result};
use crate::text::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    String,
    Numeric,
    Price,
    Date,
}

/// An extracted or gold field value with its declared type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypedField {
    pub field_name: String,
    pub value: String,
    pub value_type: ValueType,
}

/// How to read `NN/NN/YYYY` dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DateOrder {
    #[default]
    MonthFirst,
    DayFirst,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOptions {
    pub date_order: DateOrder,
    pub relative_tolerance: f64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            date_order: DateOrder::MonthFirst,
            relative_tolerance: 1e-6,
        }
    }
}

/// Field name to value type, per dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldTable(BTreeMap<String, ValueType>);

impl FieldTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, field_name: impl Into<String>, value_type: ValueType) {
        self.0.insert(field_name.into(), value_type);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, ValueType)> {
        self.0.iter().map(|(k, v)| (k, *v))
    }

    pub fn type_of(&self, field_name: &str) -> Result<ValueType> {
        self.0
            .get(field_name)
            .copied()
            .ok_or_else(|| Error::UnknownField(field_name.to_owned()))
    }

    /// Types a raw value by its field name.
    pub fn field(&self, field_name: &str, value: impl Into<String>) -> Result<TypedField> {
        Ok(TypedField {
            field_name: field_name.to_owned(),
            value: value.into(),
            value_type: self.type_of(field_name)?,
        })
    }

    /// [`typed_match`] on two untyped values of the same field.
    pub fn matches(
        &self,
        field_name: &str,
        pred: &str,
        gold: &str,
        opts: &MatchOptions,
    ) -> Result<bool> {
        let ty = self.type_of(field_name)?;
        let mk = |v: &str| TypedField {
            field_name: field_name.to_owned(),
            value: v.to_owned(),
            value_type: ty,
        };
        Ok(typed_match(&mk(pred), &mk(gold), opts))
    }
}

static CURRENCY_CODE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(usd|eur|gbp|jpy|cny|rmb|inr|cad|aud|chf)|(usd|eur|gbp|jpy|cny|rmb|inr|cad|aud|chf)$").unwrap()
});
static PLAIN_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[+-]?(\d+\.?\d*|\.\d+)$").unwrap());
static GROUPED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[+-]?\d{1,3}(,\d{3})+(\.\d*)?$").unwrap());

/// Parses numbers and prices: currency symbols and codes, thousands
/// separators and accounting parentheses are accepted.
pub fn parse_number(raw: &str) -> Option<f64> {
    let mut s: String = raw.trim().chars().filter(|c| !c.is_whitespace()).collect();
    let mut negative = false;
    if s.starts_with('(') && s.ends_with(')') && s.len() > 2 {
        negative = true;
        s = s[1..s.len() - 1].to_owned();
    }
    s = s.replace(['$', '€', '£', '¥', '₹', '₩'], "");
    s = CURRENCY_CODE.replace_all(&s, "").into_owned();
    if s.starts_with('-') && negative {
        return None;
    }
    let digits = if GROUPED.is_match(&s) {
        s.replace(',', "")
    } else if PLAIN_NUMBER.is_match(&s) {
        s
    } else {
        return None;
    };
    let v: f64 = digits.parse().ok()?;
    Some(if negative { -v } else { v })
}

fn numbers_equal(a: f64, b: f64, rel_tol: f64) -> bool {
    a == b || (a - b).abs() <= rel_tol * a.abs().max(b.abs())
}

static ABBREV_DOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b([a-z]{3,4})\.").unwrap());
static SEPT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bsept\b").unwrap());
static ORDINAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(\d{1,2})(st|nd|rd|th)\b").unwrap());

/// Parses `YYYY-MM-DD`, `MM/DD/YYYY` or `DD/MM/YYYY` (by `order`),
/// `Month D, YYYY` and `D Month YYYY`. Month names may be abbreviated.
pub fn parse_date(raw: &str, order: DateOrder) -> Option<NaiveDate> {
    let s = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let s = s.trim_matches(|c: char| c == '.' || c == ',' || c == ';');
    let s = ABBREV_DOT.replace_all(s, "$1");
    let s = SEPT.replace_all(&s, "Sep");
    let s = ORDINAL.replace_all(&s, "$1");
    let slash = match order {
        DateOrder::MonthFirst => "%m/%d/%Y",
        DateOrder::DayFirst => "%d/%m/%Y",
    };
    [
        "%Y-%m-%d",
        slash,
        "%B %d, %Y",
        "%B %d %Y",
        "%d %B %Y",
        "%d %B, %Y",
    ]
    .iter()
    .find_map(|fmt| NaiveDate::parse_from_str(&s, fmt).ok())
}

fn type_rule(a: &str, b: &str, ty: ValueType, opts: &MatchOptions) -> bool {
    match ty {
        ValueType::String => false,
        ValueType::Numeric | ValueType::Price => match (parse_number(a), parse_number(b)) {
            (Some(x), Some(y)) => numbers_equal(x, y, opts.relative_tolerance),
            _ => false,
        },
        ValueType::Date => match (
            parse_date(a, opts.date_order),
            parse_date(b, opts.date_order),
        ) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        },
    }
}

/// Strict variant: equality after [`normalize`].
pub fn exact_match(pred: &TypedField, gold: &TypedField) -> bool {
    pred.field_name == gold.field_name && normalize(&pred.value) == normalize(&gold.value)
}

/// Type-aware fuzzy match.
///
/// Strings compare after [`normalize`]. Numbers and prices compare by value
/// within a relative tolerance, dates by calendar day. Values that do not
/// parse under their type fall back to the string rule, so two values that
/// match exactly always match here too. Fields of differing declared type
/// use the string rule only.
pub fn typed_match(pred: &TypedField, gold: &TypedField, opts: &MatchOptions) -> bool {
    if exact_match(pred, gold) {
        return true;
    }
    pred.field_name == gold.field_name
        && pred.value_type == gold.value_type
        && type_rule(&pred.value, &gold.value, gold.value_type, opts)
}

/// Matching outcome for one set of predictions against golds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMatching {
    pub counts: Counts,
    /// `(gold index, prediction index)` of each matched pair.
    pub pairs: Vec<(usize, usize)>,
}

/// One-to-one matching of predictions to golds under `matcher`, grouped by
/// field name. Golds are visited in order and each takes its first
/// matching free prediction; when none is free, an augmenting path may
/// move an earlier gold to another of its matches. The result is a
/// maximum matching, so widening `matcher` never lowers the TP count.
pub fn match_fields(
    predictions: &[TypedField],
    golds: &[TypedField],
    matcher: impl Fn(&TypedField, &TypedField) -> bool,
) -> FieldMatching {
    let adj: Vec<Vec<usize>> = golds
        .iter()
        .map(|g| {
            (0..predictions.len())
                .filter(|&p| matcher(&predictions[p], g))
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; predictions.len()];

    fn augment(
        g: usize,
        adj: &[Vec<usize>],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &p in &adj[g] {
            if seen[p] {
                continue;
            }
            seen[p] = true;
            if owner[p].is_none_or(|other| augment(other, adj, owner, seen)) {
                owner[p] = Some(g);
                return true;
            }
        }
        false
    }

    for g in 0..golds.len() {
        // plain greedy first: take the first free match
        if let Some(&p) = adj[g].iter().find(|&&p| owner[p].is_none()) {
            owner[p] = Some(g);
            continue;
        }
        let mut seen = vec![false; predictions.len()];
        augment(g, &adj, &mut owner, &mut seen);
    }

    let mut pairs: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(p, g)| g.map(|g| (g, p)))
        .collect();
    pairs.sort_unstable();
    let tp = pairs.len() as u64;
    FieldMatching {
        counts: Counts {
            tp,
            fp: predictions.len() as u64 - tp,
            fn_: golds.len() as u64 - tp,
        },
        pairs,
    }
}

/// Micro-F1 with type-aware fuzzy matching.
pub fn typed_micro_f1(
    predictions: &[TypedField],
    golds: &[TypedField],
    opts: &MatchOptions,
) -> Counts {
    match_fields(predictions, golds, |p, g| typed_match(p, g, opts)).counts
}

/// Micro-F1 with strict normalized equality.
pub fn exact_micro_f1(predictions: &[TypedField], golds: &[TypedField]) -> Counts {
    match_fields(predictions, golds, exact_match).counts
}
