//! The judges' numeric rule: integer digits and the first decimal place
//! must agree. Later decimals are ignored, so 106.47 and "106.4 million"
//! match while 107.4 and 106 do not.

use std::sync::OnceLock;

use regex::Regex;

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d[\d,]*(?:\.\d+)?").unwrap())
}

fn ticker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b[A-Z][A-Z0-9]*[A-Z][A-Z0-9]*\b").unwrap())
}

/// (negative, integer digits without leading zeros, first decimal digit).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NumericKey {
    pub negative: bool,
    pub integer: String,
    pub first_decimal: char,
}

impl NumericKey {
    /// Parses a bare number such as "-1,234.56". Returns None for anything
    /// else.
    pub fn parse(token: &str) -> Option<Self> {
        let t = token.trim();
        let (negative, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let body = body.replace(',', "");
        let (int, frac) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body.as_str(), ""),
        };
        if int.is_empty() && frac.is_empty() {
            return None;
        }
        if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        let integer = int.trim_start_matches('0');
        let integer = if integer.is_empty() { "0" } else { integer }.to_string();
        let first_decimal = frac.chars().next().unwrap_or('0');
        let zero = integer == "0" && frac.chars().all(|c| c == '0');
        Some(Self {
            negative: negative && !zero,
            integer,
            first_decimal,
        })
    }
}

/// Numeric tokens in free text, commas stripped. A leading '-' counts as a
/// sign only when it does not join two alphanumerics (so dates stay
/// positive).
pub fn numbers_in(text: &str) -> Vec<String> {
    let bytes = text.as_bytes();
    number_re()
        .find_iter(text)
        .map(|m| {
            let s = m.as_str().trim_end_matches(',').replace(',', "");
            let start = m.start();
            let signed = start >= 1
                && bytes[start - 1] == b'-'
                && (start < 2 || !(bytes[start - 2] as char).is_ascii_alphanumeric());
            if signed {
                format!("-{s}")
            } else {
                s
            }
        })
        .collect()
}

/// Whether two numbers agree under the rule. Inputs may carry surrounding
/// text; the first number in each is compared.
pub fn numeric_match(gold: &str, predicted: &str) -> bool {
    let first = |s: &str| numbers_in(s).into_iter().next().and_then(|n| NumericKey::parse(&n));
    match (first(gold), first(predicted)) {
        (Some(g), Some(p)) => g == p,
        _ => false,
    }
}

/// Whether any number in `text` matches `gold`.
pub fn text_contains_number(text: &str, gold: &str) -> bool {
    let Some(g) = NumericKey::parse(gold) else {
        return false;
    };
    numbers_in(text).iter().any(|n| NumericKey::parse(n).as_ref() == Some(&g))
}

/// Uppercase identifier tokens of two or more letters, e.g. tickers.
pub fn ticker_tokens(text: &str) -> Vec<String> {
    ticker_re()
        .find_iter(text)
        .map(|m| m.as_str().to_string())
        .filter(|t| t.chars().filter(|c| c.is_ascii_uppercase()).count() >= 2)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyItem {
    Number(String),
    Token(String),
}

pub fn key_items(reference: &str) -> Vec<KeyItem> {
    let mut items: Vec<KeyItem> = numbers_in(reference).into_iter().map(KeyItem::Number).collect();
    items.extend(ticker_tokens(reference).into_iter().map(KeyItem::Token));
    items
}

/// Every key item of `reference` is present in `answer`; numbers under the
/// numeric rule, identifiers as whole tokens. A reference with no key items
/// falls back to case-insensitive containment.
pub fn contains_key_information(reference: &str, answer: &str) -> bool {
    let items = key_items(reference);
    if items.is_empty() {
        let r = reference.trim().to_lowercase();
        return !r.is_empty() && answer.to_lowercase().contains(&r);
    }
    let answer_tokens = ticker_tokens(answer);
    items.iter().all(|item| match item {
        KeyItem::Number(n) => text_contains_number(answer, n),
        KeyItem::Token(t) => answer_tokens.contains(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_cases() {
        assert!(numeric_match("106.47", "106.4 million"));
        assert!(numeric_match("106.47", "106.4"));
        assert!(numeric_match("106.47", "106.49"));
        assert!(!numeric_match("106.47", "107.4"));
        assert!(!numeric_match("106.47", "106"));
        assert!(!numeric_match("106.47", "106.5"));
        assert!(numeric_match("1,234.56", "1234.5"));
        assert!(numeric_match("20.00", "20"));
        assert!(!numeric_match("-3.25", "3.25"));
        assert!(!numeric_match("abc", "abc"));
    }

    #[test]
    fn extraction() {
        assert_eq!(numbers_in("B (150.00); C (-1,200.50)"), ["150.00", "-1200.50"]);
        assert_eq!(numbers_in("2021-05-01"), ["2021", "05", "01"]);
        assert_eq!(ticker_tokens("ABC rose; XYZ2 fell; A B"), ["ABC", "XYZ2"]);
    }

    #[test]
    fn key_information() {
        assert!(contains_key_information("B (150.00); C (120.00)", "BB? no: B is 150.0, C is 120.04"));
        assert!(contains_key_information("ACME (150.00)", "The leader is ACME at 150.0 and also ZZZ"));
        assert!(!contains_key_information("ACME (150.00)", "ACMX at 150.0"));
        assert!(!contains_key_information("ACME (150.00)", "ACME at 151.0"));
        assert!(contains_key_information("None", "none of them"));
        assert!(!contains_key_information("None", ""));
    }

    fn truncated(x: f64) -> (bool, String, char) {
        // oracle from the decimal string with 6 places
        let s = format!("{:.6}", x.abs());
        let (i, f) = s.split_once('.').unwrap();
        (x < 0.0 && !s.trim_matches(|c| c == '0' || c == '.').is_empty(), i.to_string(), f.chars().next().unwrap())
    }

    proptest! {
        #[test]
        fn agrees_with_string_oracle(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let (sa, sb) = (format!("{a:.6}"), format!("{b:.6}"));
            prop_assert_eq!(numeric_match(&sa, &sb), truncated(a) == truncated(b));
        }

        #[test]
        fn later_digits_ignored(i in 0u32..100000, d in 0u32..10, tail1 in 0u32..1000, tail2 in 0u32..1000) {
            let g = format!("{i}.{d}{tail1:03}");
            let p = format!("{i}.{d}{tail2:03}");
            prop_assert!(numeric_match(&g, &p));
        }
    }
}
