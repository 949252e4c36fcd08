use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use serde::Deserialize;

use chainbox::eval::{
    anls, exact_match, exact_micro_f1, keybox_counts, keybox_micro_f1, levenshtein, typed_match,
    typed_micro_f1, AnlsOptions, Counts, MatchOptions, TypedField, ValueType,
};
use chainbox::store::read_jsonl;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/metrics")
        .join(name)
}

#[derive(Deserialize)]
struct AnlsCase {
    pred: String,
    golds: Vec<String>,
    expected: f64,
    note: String,
}

#[derive(Deserialize)]
struct TypedCase {
    pred: String,
    gold: String,
    value_type: String,
    exact: bool,
    typed: bool,
}

fn ty(name: &str) -> ValueType {
    match name {
        "price" => ValueType::Price,
        "numeric" => ValueType::Numeric,
        "date" => ValueType::Date,
        _ => ValueType::String,
    }
}

fn field(value: &str, value_type: ValueType) -> TypedField {
    TypedField {
        field_name: "f".into(),
        value: value.into(),
        value_type,
    }
}

#[test]
fn anls_matches_frozen_cases() {
    let cases: Vec<AnlsCase> = read_jsonl(&fixture("anls_cases.jsonl")).unwrap();
    assert_eq!(cases.len(), 20);
    for c in cases {
        let got = anls(&c.pred, &c.golds, &AnlsOptions::default());
        assert!(
            (got - c.expected).abs() <= 1e-9,
            "{}: {got} vs {}",
            c.note,
            c.expected
        );
    }
}

#[test]
fn kitten_sitting() {
    assert_eq!(levenshtein("kitten", "sitting"), 3);
    let s = anls("kitten", &["sitting"], &AnlsOptions::default());
    assert!((s - 4.0 / 7.0).abs() <= 1e-9);
}

#[test]
fn typed_matches_frozen_cases() {
    let cases: Vec<TypedCase> = read_jsonl(&fixture("typed_cases.jsonl")).unwrap();
    assert_eq!(cases.len(), 30);
    for c in cases {
        let t = ty(&c.value_type);
        let (p, g) = (field(&c.pred, t), field(&c.gold, t));
        assert_eq!(
            exact_match(&p, &g),
            c.exact,
            "exact {:?} / {:?}",
            c.pred,
            c.gold
        );
        assert_eq!(
            typed_match(&p, &g, &MatchOptions::default()),
            c.typed,
            "typed {:?} / {:?}",
            c.pred,
            c.gold
        );
    }
}

fn word() -> impl Strategy<Value = String> {
    "[a-cA-C ]{0,10}"
}

fn ids() -> impl Strategy<Value = BTreeSet<u32>> {
    prop::collection::btree_set(1u32..12, 0..6)
}

proptest! {
    #[test]
    fn levenshtein_bounds(a in word(), b in word()) {
        let d = levenshtein(&a, &b);
        let (la, lb) = (a.chars().count(), b.chars().count());
        prop_assert!(d >= la.abs_diff(lb));
        prop_assert!(d <= la.max(lb));
        prop_assert_eq!(d, levenshtein(&b, &a));
        prop_assert_eq!(d == 0, a == b);
    }

    #[test]
    fn anls_in_unit_range(p in word(), golds in prop::collection::vec(word(), 1..4)) {
        let s = anls(&p, &golds, &AnlsOptions::default());
        prop_assert!((0.0..=1.0).contains(&s));
        // the best gold decides
        let best = golds.iter().map(|g| anls(&p, &[g], &AnlsOptions::default())).fold(0.0, f64::max);
        prop_assert_eq!(s, best);
    }

    #[test]
    fn anls_is_one_on_itself(g in word(), pad in " {0,3}") {
        let padded = format!("{pad}{}{pad}", g.to_uppercase());
        prop_assert_eq!(anls(&padded, &[&g], &AnlsOptions::default()), 1.0);
    }

    #[test]
    fn keybox_pooled_counts(pairs in prop::collection::vec((ids(), ids()), 0..20)) {
        let total = pairs.iter().fold(Counts::default(), |acc, (p, g)| {
            let c = keybox_counts(p, g);
            Counts { tp: acc.tp + c.tp, fp: acc.fp + c.fp, fn_: acc.fn_ + c.fn_ }
        });
        let f1 = keybox_micro_f1(pairs.iter().map(|(p, g)| (p, g)));
        prop_assert_eq!(f1, total.f1());
        prop_assert!((0.0..=1.0).contains(&f1));
        for (p, g) in &pairs {
            let c = keybox_counts(p, g);
            prop_assert_eq!(c.tp + c.fp, p.len() as u64);
            prop_assert_eq!(c.tp + c.fn_, g.len() as u64);
        }
    }

    #[test]
    fn typed_never_below_exact(
        preds in prop::collection::vec(("[a-c]", "[0-9]{1,3}(\\.0)?"), 0..6),
        golds in prop::collection::vec(("[a-c]", "[0-9]{1,3}"), 0..6),
    ) {
        let mk = |v: &[(String, String)]| -> Vec<TypedField> {
            v.iter().map(|(n, x)| TypedField { field_name: n.clone(), value: x.clone(), value_type: ValueType::Numeric }).collect()
        };
        let (p, g) = (mk(&preds), mk(&golds));
        let fuzzy = typed_micro_f1(&p, &g, &MatchOptions::default());
        let exact = exact_micro_f1(&p, &g);
        prop_assert!(fuzzy.tp >= exact.tp);
        prop_assert_eq!(fuzzy.tp + fuzzy.fp, p.len() as u64);
        prop_assert_eq!(fuzzy.tp + fuzzy.fn_, g.len() as u64);
    }
}
