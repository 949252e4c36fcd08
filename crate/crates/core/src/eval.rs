//! Evaluation metrics and run reports.

mod anls;
mod keybox;
mod levenshtein;
mod typed;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::KeyBoxSelection;
use crate::store::read_jsonl;

pub use anls::{anls, normalized_distance, AnlsOptions, DEFAULT_TAU};
pub use keybox::{keybox_counts, keybox_micro_f1, Counts};
pub use levenshtein::levenshtein;
pub use typed::{
    exact_match, exact_micro_f1, match_fields, parse_date, parse_number, typed_match,
    typed_micro_f1, DateOrder, FieldMatching, FieldTable, MatchOptions, TypedField, ValueType,
};

/// A field value as it appears in prediction files, before typing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldValue {
    pub field_name: String,
    pub value: String,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<KeyBoxSelection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldValue>,
}

/// The answer-as-field declaration of a gold record: the question asks for
/// one field, so the answer string is that field's value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerField {
    pub field_name: String,
    pub value_type: ValueType,
}

/// One line of a gold file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub sample_id: String,
    #[serde(default)]
    pub dataset_tag: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub helpful: Option<BTreeSet<u32>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<TypedField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_field: Option<AnswerField>,
}

impl Prediction {
    /// The prediction a perfect system would make for `gold`.
    pub fn from_gold(gold: &GoldRecord) -> Self {
        Prediction {
            sample_id: gold.sample_id.clone(),
            answer: gold.answers.first().cloned().unwrap_or_default(),
            selection: gold.helpful.as_ref().map(|h| KeyBoxSelection {
                ids: h.iter().copied().collect(),
                raw_text: String::new(),
                parse_notes: Vec::new(),
            }),
            fields: gold
                .fields
                .iter()
                .map(|f| FieldValue {
                    field_name: f.field_name.clone(),
                    value: f.value.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Anls,
    KeyboxF1,
    TypedMicroF1,
    FieldF1,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Anls => "anls",
            Metric::KeyboxF1 => "keybox-f1",
            Metric::TypedMicroF1 => "typed-micro-f1",
            Metric::FieldF1 => "field-f1",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anls" => Ok(Metric::Anls),
            "keybox-f1" => Ok(Metric::KeyboxF1),
            "typed-micro-f1" => Ok(Metric::TypedMicroF1),
            "field-f1" => Ok(Metric::FieldF1),
            other => Err(Error::Parameter(format!("unknown metric {other:?}"))),
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub tau: f64,
    pub case_insensitive: bool,
    pub date_order: DateOrder,
    pub relative_tolerance: f64,
    /// Extra field types, merged over those declared in the gold file.
    pub field_types: FieldTable,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            case_insensitive: true,
            date_order: DateOrder::MonthFirst,
            relative_tolerance: 1e-6,
            field_types: FieldTable::new(),
        }
    }
}

impl EvalSettings {
    pub fn anls_options(&self) -> AnlsOptions {
        AnlsOptions {
            tau: self.tau,
            case_insensitive: self.case_insensitive,
        }
    }

    pub fn match_options(&self) -> MatchOptions {
        MatchOptions {
            date_order: self.date_order,
            relative_tolerance: self.relative_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Counts>,
}

/// Aggregate score plus the per-sample table it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_tag: String,
    pub metric_name: String,
    pub score: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Counts>,
    pub per_sample: Vec<SampleScore>,
}

impl EvalReport {
    /// Tab-separated per-sample table with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("sample_id\tscore\ttp\tfp\tfn\n");
        for s in &self.per_sample {
            let (tp, fp, fn_) = s
                .counts
                .map_or((String::new(), String::new(), String::new()), |c| {
                    (c.tp.to_string(), c.fp.to_string(), c.fn_.to_string())
                });
            writeln!(out, "{}\t{:.6}\t{tp}\t{fp}\t{fn_}", s.sample_id, s.score)
                .expect("string write");
        }
        out
    }

    /// The aggregate without the per-sample table.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "dataset_tag": self.dataset_tag,
            "metric_name": self.metric_name,
            "score": self.score,
            "n_samples": self.n_samples,
            "counts": self.counts,
        })
    }
}

fn dataset_tag(golds: &[GoldRecord]) -> String {
    let tags: BTreeSet<&str> = golds.iter().map(|g| g.dataset_tag.as_str()).collect();
    match tags.len() {
        1 => tags.into_iter().next().unwrap_or_default().to_owned(),
        _ => "mixed".to_owned(),
    }
}

fn field_table(golds: &[GoldRecord], settings: &EvalSettings) -> FieldTable {
    let mut table = FieldTable::new();
    for g in golds {
        for f in &g.fields {
            table.insert(f.field_name.clone(), f.value_type);
        }
        if let Some(af) = &g.answer_field {
            table.insert(af.field_name.clone(), af.value_type);
        }
    }
    for (name, ty) in settings.field_types.iter() {
        table.insert(name.clone(), ty);
    }
    table
}

/// Typed (prediction, gold) field lists for one sample.
fn sample_fields(
    pred: Option<&Prediction>,
    gold: &GoldRecord,
    table: &FieldTable,
) -> Result<(Vec<TypedField>, Vec<TypedField>)> {
    let mut golds = gold.fields.clone();
    let mut preds = Vec::new();
    if let Some(p) = pred {
        for f in &p.fields {
            preds.push(table.field(&f.field_name, f.value.clone())?);
        }
    }
    if let Some(af) = &gold.answer_field {
        if let Some(first) = gold.answers.first() {
            golds.push(TypedField {
                field_name: af.field_name.clone(),
                value: first.clone(),
                value_type: af.value_type,
            });
        }
        if let Some(p) = pred.filter(|p| !p.answer.trim().is_empty()) {
            preds.push(TypedField {
                field_name: af.field_name.clone(),
                value: p.answer.clone(),
                value_type: af.value_type,
            });
        }
    }
    Ok((preds, golds))
}

/// Scores predictions against golds.
///
/// Every prediction must name a gold sample; golds without a prediction
/// count as empty answers. ANLS is the mean of per-question scores, the F1
/// metrics pool counts over the dataset.
pub fn evaluate(
    predictions: &[Prediction],
    golds: &[GoldRecord],
    metric: Metric,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Parameter("no predictions to evaluate".into()));
    }
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    for p in predictions {
        if by_id.insert(p.sample_id.as_str(), p).is_some() {
            return Err(Error::Parameter(format!(
                "duplicate prediction for sample {}",
                p.sample_id
            )));
        }
    }
    let gold_ids: BTreeSet<&str> = golds.iter().map(|g| g.sample_id.as_str()).collect();
    let missing: Vec<String> = predictions
        .iter()
        .filter(|p| !gold_ids.contains(p.sample_id.as_str()))
        .map(|p| p.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Join { missing });
    }

    let anls_opts = settings.anls_options();
    let match_opts = settings.match_options();
    let table = field_table(golds, settings);
    let mut per_sample = Vec::with_capacity(golds.len());
    for gold in golds {
        let pred = by_id.get(gold.sample_id.as_str()).copied();
        let row = match metric {
            Metric::Anls => SampleScore {
                sample_id: gold.sample_id.clone(),
                score: anls(
                    pred.map_or("", |p| p.answer.as_str()),
                    &gold.answers,
                    &anls_opts,
                ),
                counts: None,
            },
            Metric::KeyboxF1 => {
                let Some(helpful) = &gold.helpful else {
                    continue;
                };
                let selected = pred
                    .and_then(|p| p.selection.as_ref())
                    .map(KeyBoxSelection::id_set)
                    .unwrap_or_default();
                let c = keybox_counts(&selected, helpful);
                SampleScore {
                    sample_id: gold.sample_id.clone(),
                    score: c.f1(),
                    counts: Some(c),
                }
            }
            Metric::TypedMicroF1 | Metric::FieldF1 => {
                let (p, g) = sample_fields(pred, gold, &table)?;
                if p.is_empty() && g.is_empty() {
                    continue;
                }
                let c = if metric == Metric::TypedMicroF1 {
                    typed_micro_f1(&p, &g, &match_opts)
                } else {
                    exact_micro_f1(&p, &g)
                };
                SampleScore {
                    sample_id: gold.sample_id.clone(),
                    score: c.f1(),
                    counts: Some(c),
                }
            }
        };
        per_sample.push(row);
    }

    let (score, counts) = match metric {
        Metric::Anls => {
            let n = per_sample.len().max(1) as f64;
            (per_sample.iter().map(|s| s.score).sum::<f64>() / n, None)
        }
        _ => {
            let pooled: Counts = per_sample.iter().filter_map(|s| s.counts).sum();
            (pooled.f1(), Some(pooled))
        }
    };
    Ok(EvalReport {
        dataset_tag: dataset_tag(golds),
        metric_name: metric.name().to_owned(),
        score,
        n_samples: per_sample.len(),
        counts,
        per_sample,
    })
}

/// Reads prediction and gold files and scores them.
pub fn evaluate_run(
    predictions: &Path,
    gold: &Path,
    metric: Metric,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let preds: Vec<Prediction> = read_jsonl(predictions)?;
    let golds: Vec<GoldRecord> = read_jsonl(gold)?;
    evaluate(&preds, &golds, metric, settings)
}

/// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tsv = dir.join(format!("{stem}.tsv"));
    std::fs::write(&tsv, report.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
    let json = dir.join(format!("{stem}.json"));
    let body = serde_json::to_string_pretty(&report.summary()).expect("summary serializes") + "\n";
    std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

/// Per-dataset reports keyed by dataset tag.
pub fn evaluate_by_dataset(
    predictions: &[Prediction],
    golds: &[GoldRecord],
    metric: Metric,
    settings: &EvalSettings,
) -> Result<BTreeMap<String, EvalReport>> {
    let mut groups: BTreeMap<&str, Vec<GoldRecord>> = BTreeMap::new();
    for g in golds {
        groups
            .entry(g.dataset_tag.as_str())
            .or_default()
            .push(g.clone());
    }
    let mut out = BTreeMap::new();
    for (tag, group) in groups {
        let ids: BTreeSet<&str> = group.iter().map(|g| g.sample_id.as_str()).collect();
        let preds: Vec<Prediction> = predictions
            .iter()
            .filter(|p| ids.contains(p.sample_id.as_str()))
            .cloned()
            .collect();
        if preds.is_empty() {
            continue;
        }
        out.insert(tag.to_owned(), evaluate(&preds, &group, metric, settings)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold(id: &str, answers: &[&str], helpful: &[u32]) -> GoldRecord {
        GoldRecord {
            sample_id: id.into(),
            dataset_tag: "t".into(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
            helpful: Some(helpful.iter().copied().collect()),
            fields: vec![],
            answer_field: None,
        }
    }

    fn pred(id: &str, answer: &str, ids: &[u32]) -> Prediction {
        Prediction {
            sample_id: id.into(),
            answer: answer.into(),
            selection: Some(KeyBoxSelection {
                ids: ids.to_vec(),
                raw_text: String::new(),
                parse_notes: vec![],
            }),
            fields: vec![],
        }
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let mut golds = vec![
            gold("a", &["Dover"], &[1, 2]),
            gold("b", &["31 Palmer Drive"], &[3]),
        ];
        golds[0].fields.push(TypedField {
            field_name: "city".into(),
            value: "Dover".into(),
            value_type: ValueType::String,
        });
        golds[1].answer_field = Some(AnswerField {
            field_name: "street".into(),
            value_type: ValueType::String,
        });
        let preds: Vec<Prediction> = golds.iter().map(Prediction::from_gold).collect();
        for m in [
            Metric::Anls,
            Metric::KeyboxF1,
            Metric::TypedMicroF1,
            Metric::FieldF1,
        ] {
            let r = evaluate(&preds, &golds, m, &EvalSettings::default()).unwrap();
            assert_eq!(r.score, 1.0, "{m:?}");
        }
    }

    #[test]
    fn anls_mean_and_missing_predictions() {
        let golds = vec![gold("a", &["sitting"], &[]), gold("b", &["x"], &[])];
        let r = evaluate(
            &[pred("a", "kitten", &[])],
            &golds,
            Metric::Anls,
            &EvalSettings::default(),
        )
        .unwrap();
        assert_eq!(r.n_samples, 2);
        assert!((r.score - (4.0 / 7.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn keybox_pooled() {
        let golds = vec![gold("a", &["x"], &[2, 3, 4]), gold("b", &["y"], &[1])];
        let preds = vec![pred("a", "x", &[1, 2, 3]), pred("b", "y", &[])];
        let r = evaluate(&preds, &golds, Metric::KeyboxF1, &EvalSettings::default()).unwrap();
        assert_eq!(
            r.counts,
            Some(Counts {
                tp: 2,
                fp: 1,
                fn_: 2
            })
        );
        assert!((r.score - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn join_and_empty_errors() {
        let golds = vec![gold("a", &["x"], &[1])];
        assert!(matches!(
            evaluate(&[pred("zzz", "x", &[])], &golds, Metric::Anls, &EvalSettings::default()),
            Err(Error::Join { missing }) if missing == vec!["zzz".to_string()]
        ));
        assert!(evaluate(&[], &golds, Metric::Anls, &EvalSettings::default()).is_err());
    }

    #[test]
    fn unknown_field_in_prediction() {
        let golds = vec![gold("a", &["x"], &[1])];
        let mut p = pred("a", "x", &[]);
        p.fields.push(FieldValue {
            field_name: "ghost".into(),
            value: "1".into(),
        });
        assert!(matches!(
            evaluate(&[p], &golds, Metric::TypedMicroF1, &EvalSettings::default()),
            Err(Error::UnknownField(_))
        ));
    }

    #[test]
    fn report_tsv_layout() {
        let golds = vec![gold("a", &["x"], &[1])];
        let r = evaluate(
            &[pred("a", "x", &[1])],
            &golds,
            Metric::KeyboxF1,
            &EvalSettings::default(),
        )
        .unwrap();
        assert_eq!(
            r.to_tsv(),
            "sample_id\tscore\ttp\tfp\tfn\na\t1.000000\t1\t0\t0\n"
        );
        assert_eq!(r.summary()["metric_name"], "keybox-f1");
    }
}
