use super::levenshtein::levenshtein_chars;

/// Default ANLS threshold.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnlsOptions {
    pub tau: f64,
    pub case_insensitive: bool,
}

impl Default for AnlsOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            case_insensitive: true,
        }
    }
}

fn prepare(s: &str, opts: &AnlsOptions) -> Vec<char> {
    let t = s.trim();
    if opts.case_insensitive {
        t.to_lowercase().chars().collect()
    } else {
        t.chars().collect()
    }
}

/// Normalized Levenshtein distance of the prepared strings; 0 when both
/// are empty.
pub fn normalized_distance(pred: &str, gold: &str, opts: &AnlsOptions) -> f64 {
    let p = prepare(pred, opts);
    let g = prepare(gold, opts);
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 0.0;
    }
    levenshtein_chars(&p, &g) as f64 / longest as f64
}

/// Per-question ANLS: the best thresholded similarity over all golds.
///
/// Returns 0 for an empty gold list.
pub fn anls(pred: &str, golds: &[impl AsRef<str>], opts: &AnlsOptions) -> f64 {
    golds
        .iter()
        .map(|g| {
            let nl = normalized_distance(pred, g.as_ref(), opts);
            if nl < opts.tau {
                1.0 - nl
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let o = AnlsOptions::default();
        assert_eq!(anls("Dover", &["dover", "Dover, NH"], &o), 1.0);
        let s = anls("kitten", &["sitting"], &o);
        assert!((s - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(anls("abc", &["xyz"], &o), 0.0);
        assert_eq!(anls("", &[""], &o), 1.0);
        assert_eq!(anls("x", &[] as &[&str], &o), 0.0);
        let strict = AnlsOptions {
            case_insensitive: false,
            ..o
        };
        assert!(anls("DOVER", &["dover"], &strict) == 0.0);
    }
}
