//! Metric catalog: one fixed sentence and one single-document question per
//! metric.

use std::sync::OnceLock;

use regex::Regex;

use crate::evaluator::numeric::numeric_match;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Number,
    Date,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricDef {
    pub name: &'static str,
    /// Wording used in questions. Its words always include every word of
    /// `name`, so a sidecar lookup on the question finds this metric.
    pub label: &'static str,
    pub doc_type: &'static str,
    pub kind: MetricKind,
    /// Placeholders: {ticker}, {year}, {value}.
    pub sentence: &'static str,
}

pub const ANNUAL_REPORT: &str = "annual_report";
pub const DIVIDEND_ANNOUNCEMENT: &str = "dividend_announcement";
pub const ESG_REPORT: &str = "esg_report";
pub const DOC_TYPES: [&str; 3] = [ANNUAL_REPORT, DIVIDEND_ANNOUNCEMENT, ESG_REPORT];

pub const METRICS: &[MetricDef] = &[
    MetricDef {
        name: "revenue",
        label: "revenue",
        doc_type: ANNUAL_REPORT,
        kind: MetricKind::Number,
        sentence: "{ticker}'s revenue for fiscal year {year} was {value} million.",
    },
    MetricDef {
        name: "total_operating_cost",
        label: "total operating cost",
        doc_type: ANNUAL_REPORT,
        kind: MetricKind::Number,
        sentence: "{ticker}'s total operating cost for fiscal year {year} was {value} million.",
    },
    MetricDef {
        name: "net_income",
        label: "net income",
        doc_type: ANNUAL_REPORT,
        kind: MetricKind::Number,
        sentence: "{ticker}'s net income for fiscal year {year} was {value} million.",
    },
    MetricDef {
        name: "total_assets",
        label: "total assets",
        doc_type: ANNUAL_REPORT,
        kind: MetricKind::Number,
        sentence: "{ticker}'s total assets at the end of fiscal year {year} were {value} million.",
    },
    MetricDef {
        name: "capital_adequacy_ratio",
        label: "capital adequacy ratio",
        doc_type: ANNUAL_REPORT,
        kind: MetricKind::Number,
        sentence: "{ticker}'s capital adequacy ratio for fiscal year {year} was {value} percent.",
    },
    MetricDef {
        name: "accounting_firm",
        label: "accounting firm",
        doc_type: ANNUAL_REPORT,
        kind: MetricKind::Text,
        sentence: "{ticker}'s financial statements for fiscal year {year} were audited by the accounting firm {value}.",
    },
    MetricDef {
        name: "dividend_per_share",
        label: "dividend per share",
        doc_type: DIVIDEND_ANNOUNCEMENT,
        kind: MetricKind::Number,
        sentence: "{ticker} declared a dividend per share of {value} yuan for fiscal year {year}.",
    },
    MetricDef {
        name: "registration_date",
        label: "equity registration date",
        doc_type: DIVIDEND_ANNOUNCEMENT,
        kind: MetricKind::Date,
        sentence: "The equity registration date for {ticker}'s fiscal year {year} payout is {value}.",
    },
    MetricDef {
        name: "ex_dividend_date",
        label: "ex-dividend date",
        doc_type: DIVIDEND_ANNOUNCEMENT,
        kind: MetricKind::Date,
        sentence: "The ex-dividend date for {ticker}'s fiscal year {year} payout is {value}.",
    },
    MetricDef {
        name: "carbon_emissions",
        label: "carbon emissions",
        doc_type: ESG_REPORT,
        kind: MetricKind::Number,
        sentence: "{ticker}'s carbon emissions in fiscal year {year} were {value} thousand tonnes.",
    },
    MetricDef {
        name: "employee_count",
        label: "employee count",
        doc_type: ESG_REPORT,
        kind: MetricKind::Number,
        sentence: "{ticker}'s employee count at the end of fiscal year {year} was {value}.",
    },
];

pub fn metric(name: &str) -> Option<&'static MetricDef> {
    METRICS.iter().find(|m| m.name == name)
}

pub fn metrics_for(doc_type: &str) -> impl Iterator<Item = &'static MetricDef> + '_ {
    METRICS.iter().filter(move |m| m.doc_type == doc_type)
}

/// Every lowercase word used by metric names or labels. Tickers avoid these.
pub fn reserved_words() -> Vec<String> {
    let mut out: Vec<String> = METRICS
        .iter()
        .flat_map(|m| crate::text::words(m.name).chain(crate::text::words(m.label)).collect::<Vec<_>>())
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Fixed two-decimal rendering for numbers.
pub fn format_number(v: f64) -> String {
    format!("{v:.2}")
}

impl MetricDef {
    pub fn statement(&self, ticker: &str, year: &str, value: &str) -> String {
        self.sentence
            .replace("{ticker}", ticker)
            .replace("{year}", year)
            .replace("{value}", value)
    }

    /// Single-document question for one fact. Mentions the label, the
    /// ticker and the year and nothing else metric-like.
    pub fn question(&self, ticker: &str, year: &str) -> String {
        format!("What was the {} of {ticker} for fiscal year {year}?", self.label)
    }

    /// The same question as a sub-query template over the metadata fields.
    pub fn subquery_template(&self) -> String {
        format!(
            "What was the {} of {{ticker_symbol}} for fiscal year {{fiscal_year}}?",
            self.label
        )
    }

    fn pattern(&self) -> &'static Regex {
        static CACHE: OnceLock<Vec<Regex>> = OnceLock::new();
        let all = CACHE.get_or_init(|| {
            METRICS
                .iter()
                .map(|m| {
                    let escaped = regex::escape(m.sentence);
                    let re = escaped
                        .replace(r"\{ticker\}", r"(?P<ticker>[A-Z0-9]+)")
                        .replace(r"\{year\}", r"(?P<year>\d{4})")
                        .replace(r"\{value\}", r"(?P<value>.+?)");
                    // the final period may be followed by more text
                    let re = re.strip_suffix(r"\.").map(|r| format!(r"{r}\.(?:\s|$)")).unwrap_or(re);
                    Regex::new(&re).expect("catalog pattern")
                })
                .collect()
        });
        let i = METRICS.iter().position(|m| m.name == self.name).expect("catalog metric");
        &all[i]
    }

    /// Parses every statement of this metric in `text` as
    /// (ticker, year, value).
    pub fn parse_all(&self, text: &str) -> Vec<(String, String, String)> {
        self.pattern()
            .captures_iter(text)
            .map(|c| (c["ticker"].to_string(), c["year"].to_string(), c["value"].trim().to_string()))
            .collect()
    }

    /// Whether a rendered value matches a gold value of this metric.
    pub fn value_matches(&self, gold: &str, candidate: &str) -> bool {
        match self.kind {
            MetricKind::Number => numeric_match(gold, candidate),
            MetricKind::Date | MetricKind::Text => gold.trim() == candidate.trim(),
        }
    }
}

/// Catalog metrics a question asks about: every word of the label occurs in
/// the question.
pub fn metrics_in_question(question: &str) -> Vec<&'static MetricDef> {
    let q: std::collections::BTreeSet<String> = crate::text::words(question).collect();
    METRICS
        .iter()
        .filter(|m| crate::text::words(m.label).all(|w| q.contains(&w)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Fact, FactSidecar};
    use crate::gateway::match_metric;

    #[test]
    fn statements_parse_back() {
        for m in METRICS {
            let value = match m.kind {
                MetricKind::Number => "1234.50",
                MetricKind::Date => "2022-05-17",
                MetricKind::Text => "Crestview Audit Partners",
            };
            let s = m.statement("QZX", "2021", value);
            let text = format!("Intro text. {s} More text follows.");
            assert_eq!(m.parse_all(&text), [("QZX".into(), "2021".into(), value.into())], "{}", m.name);
        }
    }

    #[test]
    fn questions_select_exactly_their_metric() {
        for doc_type in DOC_TYPES {
            let sidecar: FactSidecar = metrics_for(doc_type)
                .map(|m| {
                    (
                        m.name.to_string(),
                        Fact {
                            value: "1".into(),
                            statement: String::new(),
                        },
                    )
                })
                .collect();
            for m in metrics_for(doc_type) {
                assert_eq!(match_metric(&sidecar, &m.question("QZX", "2021")).unwrap(), Some(m.name));
            }
        }
    }

    #[test]
    fn question_metric_detection() {
        let names: Vec<_> = metrics_in_question(
            "Which 3 companies had the shortest interval between the equity registration date and the ex-dividend date?",
        )
        .iter()
        .map(|m| m.name)
        .collect();
        assert_eq!(names, ["registration_date", "ex_dividend_date"]);
        assert!(reserved_words().contains(&"dividend".to_string()));
    }
}
