use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use super::{AgentRole, ChatProvider, ChatRequest, ProviderError};
use crate::corpus::{Corpus, FactSidecar};
use crate::extractor::NOT_FOUND;
use crate::text::words;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("query matches several metrics ({0:?})")]
    Ambiguous(Vec<String>),
}

/// Finds the sidecar metric a query asks about: a metric matches when every
/// word of its name appears in the query, case-folded. More than one match
/// is an error.
pub fn match_metric<'a>(sidecar: &'a FactSidecar, query: &str) -> Result<Option<&'a str>, OracleError> {
    let query_words: BTreeSet<String> = words(query).collect();
    let hits: Vec<&str> = sidecar
        .keys()
        .filter(|name| words(name).all(|w| query_words.contains(&w)))
        .map(String::as_str)
        .collect();
    match hits.len() {
        0 => Ok(None),
        1 => Ok(Some(hits[0])),
        _ => Err(OracleError::Ambiguous(hits.iter().map(|s| s.to_string()).collect())),
    }
}

/// Reader that answers single-document sub-queries from fact sidecars.
/// Every other request gets the not-found sentinel.
#[derive(Debug, Clone, Default)]
pub struct OracleProvider {
    sidecars: HashMap<String, FactSidecar>,
}

impl OracleProvider {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut p = Self::default();
        p.add_corpus(corpus);
        p
    }

    pub fn add_corpus(&mut self, corpus: &Corpus) {
        for doc in corpus.documents() {
            if let Some(sidecar) = &doc.fact_sidecar {
                self.sidecars.insert(doc.doc_id.clone(), sidecar.clone());
            }
        }
    }

    pub fn answer(&self, doc_id: &str, query: &str) -> Result<String, OracleError> {
        let Some(sidecar) = self.sidecars.get(doc_id) else {
            return Ok(NOT_FOUND.to_string());
        };
        Ok(match match_metric(sidecar, query)? {
            Some(metric) => sidecar[metric].statement.clone(),
            None => NOT_FOUND.to_string(),
        })
    }
}

impl ChatProvider for OracleProvider {
    fn id(&self) -> &str {
        "oracle"
    }

    fn send(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        match (&request.role, &request.focus) {
            (AgentRole::Reader, Some(focus)) => self
                .answer(&focus.doc_id, &focus.query)
                .map_err(|e| ProviderError::fatal(format!("oracle: {e}"))),
            _ => Ok(NOT_FOUND.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Fact;

    fn sidecar(names: &[&str]) -> FactSidecar {
        names
            .iter()
            .map(|n| {
                (
                    n.to_string(),
                    Fact {
                        value: "1".into(),
                        statement: format!("{n} statement"),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn words_must_all_appear() {
        let s = sidecar(&["total_operating_cost", "net_income", "total_assets"]);
        assert_eq!(
            match_metric(&s, "What was ACME's total operating cost in fiscal year 2021?").unwrap(),
            Some("total_operating_cost")
        );
        assert_eq!(match_metric(&s, "What were ACME's Total Assets?").unwrap(), Some("total_assets"));
        assert_eq!(match_metric(&s, "How many employees?").unwrap(), None);
    }

    #[test]
    fn ambiguity_is_an_error() {
        let s = sidecar(&["net_income", "income"]);
        assert!(match_metric(&s, "net income in 2021").is_err());
    }

    #[test]
    fn hyphenated_words_split() {
        let s = sidecar(&["ex_dividend_date", "registration_date"]);
        assert_eq!(
            match_metric(&s, "What was the ex-dividend date of ACME?").unwrap(),
            Some("ex_dividend_date")
        );
        assert_eq!(
            match_metric(&s, "What was the equity registration date of ACME?").unwrap(),
            Some("registration_date")
        );
    }
}
