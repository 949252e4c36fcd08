use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Per-sample confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    /// `2 TP / (2 TP + FP + FN)`; 1.0 when all three are zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

/// Selected boxes against the gold helpful boxes of one question.
pub fn keybox_counts(predicted: &BTreeSet<u32>, gold_helpful: &BTreeSet<u32>) -> Counts {
    let tp = predicted.intersection(gold_helpful).count() as u64;
    Counts {
        tp,
        fp: predicted.len() as u64 - tp,
        fn_: gold_helpful.len() as u64 - tp,
    }
}

/// Micro-averaged F1 over a dataset: counts are pooled before dividing.
pub fn keybox_micro_f1<'a>(
    pairs: impl IntoIterator<Item = (&'a BTreeSet<u32>, &'a BTreeSet<u32>)>,
) -> f64 {
    pairs
        .into_iter()
        .map(|(p, g)| keybox_counts(p, g))
        .sum::<Counts>()
        .f1()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn examples() {
        assert_eq!(keybox_counts(&set(&[1, 2]), &set(&[1, 2])).f1(), 1.0);
        assert_eq!(keybox_counts(&set(&[]), &set(&[1])).f1(), 0.0);
        let c = keybox_counts(&set(&[1, 2, 3]), &set(&[2, 3, 4]));
        assert_eq!(
            c,
            Counts {
                tp: 2,
                fp: 1,
                fn_: 1
            }
        );
        assert!((c.f1() - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn pooling_differs_from_averaging() {
        let (a, b) = (set(&[1]), set(&[1]));
        let (c, d) = (set(&[1, 2, 3]), set(&[4]));
        // per-sample F1s are 1 and 0, pooled counts are tp 1, fp 3, fn 1
        assert!((keybox_micro_f1([(&a, &b), (&c, &d)]) - 2.0 / 6.0).abs() < 1e-15);
    }
}
