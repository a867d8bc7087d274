//! Tokenization and small parsing helpers shared by retrieval, the oracle
//! and the agent reply parsers.

use std::collections::BTreeSet;

/// Case-folded alphanumeric runs. CJK ideographs are emitted one per token
/// since they carry no whitespace.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if is_cjk(ch) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out.into_iter()
}

fn is_cjk(ch: char) -> bool {
    matches!(ch as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0xF900..=0xFAFF)
}

/// Small English and Chinese function-word list.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "did", "do", "does", "for", "from", "had", "has",
    "have", "how", "in", "is", "it", "its", "of", "on", "or", "s", "that", "the", "their", "this", "to",
    "was", "were", "what", "when", "where", "which", "who", "with", "的", "了", "和", "是", "在", "与",
    "及", "其", "为", "对", "中", "年",
];

pub fn content_words(text: &str, stopwords: &BTreeSet<String>) -> BTreeSet<String> {
    words(text).filter(|w| !stopwords.contains(w)).collect()
}

pub fn default_stopwords() -> BTreeSet<String> {
    DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect()
}

/// Content between the first `<tag>` and the last `</tag>` after it.
pub fn between_tags<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw.find(&open)? + open.len();
    let end = raw.rfind(&close)?;
    (end >= start).then(|| &raw[start..end])
}

/// Content of the last `<tag>...</tag>` block.
pub fn last_tag_block<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw.rfind(&open)? + open.len();
    let end = raw[start..].find(&close)? + start;
    Some(&raw[start..end])
}

/// The first balanced JSON value opening with `open` (`[` or `{`) that
/// parses, scanning left to right. Tolerates code fences and prose.
pub fn first_json_value(raw: &str, open: char) -> Option<serde_json::Value> {
    let close = if open == '[' { ']' } else { '}' };
    for (start, _) in raw.match_indices(open) {
        let mut depth = 0i32;
        let mut in_str = false;
        let mut escaped = false;
        for (off, ch) in raw[start..].char_indices() {
            if in_str {
                match ch {
                    _ if escaped => escaped = false,
                    '\\' => escaped = true,
                    '"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match ch {
                '"' => in_str = true,
                c if c == open => depth += 1,
                c if c == close => {
                    depth -= 1;
                    if depth == 0 {
                        let candidate = &raw[start..start + off + ch.len_utf8()];
                        if let Ok(v) = serde_json::from_str(candidate) {
                            return Some(v);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes() {
        let w: Vec<_> = words("ACME's Total-Cost, 2021!").collect();
        assert_eq!(w, ["acme", "s", "total", "cost", "2021"]);
        let cjk: Vec<_> = words("营业成本ab").collect();
        assert_eq!(cjk, ["营", "业", "成", "本", "ab"]);
    }

    #[test]
    fn tags() {
        assert_eq!(between_tags("x <json>[1]</json> y", "json"), Some("[1]"));
        assert_eq!(
            between_tags("<json>[1]</json> mid <json>[2]</json>", "json"),
            Some("[1]</json> mid <json>[2]")
        );
        assert_eq!(between_tags("nothing", "json"), None);
        assert_eq!(last_tag_block("<e>a</e><e>b</e>", "e"), Some("b"));
    }

    #[test]
    fn finds_json_in_prose() {
        let v = first_json_value("Sure!\n```json\n[{\"a\": \"]\"}]\n```", '[').unwrap();
        assert_eq!(v[0]["a"], "]");
        assert!(first_json_value("[not json] then [1, 2]", '[').unwrap().is_array());
        assert_eq!(first_json_value("no list", '['), None);
    }
}
