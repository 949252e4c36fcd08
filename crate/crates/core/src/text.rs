//! Text normalization shared by the entailment check and field matching.

fn is_edge_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '“' | '”' | '‘' | '’' | '«' | '»' | '…' | '–' | '—' | '¡' | '¿' | '·'
        )
}

fn strip_token(tok: &str) -> &str {
    let mut rest = tok.trim_end_matches(is_edge_punct);
    while let Some(c) = rest.chars().next() {
        if !is_edge_punct(c) {
            break;
        }
        // keep the sign of a number
        if matches!(c, '-' | '+') && rest[1..].starts_with(|d: char| d.is_ascii_digit()) {
            break;
        }
        rest = &rest[c.len_utf8()..];
    }
    rest
}

/// Case-folds, collapses whitespace and strips leading and trailing
/// punctuation from every whitespace-separated token. Tokens that are pure
/// punctuation disappear.
pub fn normalize(s: &str) -> String {
    let lower = s.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    for tok in lower
        .split_whitespace()
        .map(strip_token)
        .filter(|t| !t.is_empty())
    {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(
            normalize("  Address:  31 Palmer\tDrive, Dover "),
            "address 31 palmer drive dover"
        );
        assert_eq!(normalize("ACME Corp."), "acme corp");
        assert_eq!(normalize("“Quoted” - text"), "quoted text");
        assert_eq!(normalize("-5"), "-5");
        assert_eq!(normalize("(-5)"), "-5");
        assert_eq!(normalize("$1,200.00"), "1,200.00");
        assert_eq!(normalize("U.S.A."), "u.s.a");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("ÉCOLE"), "école");
    }
}
