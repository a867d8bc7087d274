//! Sub-query templates: parsing the planning agent's reply, validating it
//! against the metadata schema, and instantiating templates per document.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{satisfies, Metadata, MetadataSchema, Restriction};
use crate::gateway::{AgentRole, ChatRequest, Gateway, GatewayError};
use crate::prompts;
use crate::text::first_json_value;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no JSON list of templates found in reply")]
    NoList,
    #[error("template {index}: {message}")]
    Malformed { index: usize, message: String },
    #[error("unknown placeholder {0}")]
    UnknownPlaceholder(String),
    #[error("unknown restriction field {0}")]
    UnknownRestrictionField(String),
    #[error("plan has no templates")]
    Empty,
    #[error("planning failed after {attempts} attempt(s): {last_error}; raw reply: {raw}")]
    Unparseable {
        attempts: u32,
        last_error: String,
        raw: String,
    },
    #[error("empty question")]
    EmptyQuestion,
    #[error("metadata lacks field {field} required by template")]
    MissingField { field: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQueryTemplate {
    pub subtask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restriction: Option<Restriction>,
}

impl SubQueryTemplate {
    pub fn new(subtask: impl Into<String>) -> Self {
        Self {
            subtask: subtask.into(),
            restriction: None,
        }
    }

    pub fn restricted(mut self, restriction: Restriction) -> Self {
        self.restriction = Some(restriction);
        self
    }

    pub fn placeholders(&self) -> Vec<&str> {
        placeholder_re()
            .captures_iter(&self.subtask)
            .map(|c| c.get(1).unwrap().as_str())
            .collect()
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([^{}]*)\}").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Plan {
    pub question: String,
    pub templates: Vec<SubQueryTemplate>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl Plan {
    /// Serialized in the same list shape the planning agent is asked for.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.templates).expect("plan serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstantiatedQuery {
    pub doc_id: String,
    pub template_index: usize,
    pub query_text: String,
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    let scalar = |x: &Value| match x {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    };
    match v {
        Value::Array(items) => items.iter().map(scalar).collect(),
        other => scalar(other).map(|s| vec![s]),
    }
}

fn validate_template(t: &SubQueryTemplate, schema: &MetadataSchema) -> Result<(), PlanError> {
    let stripped = placeholder_re().replace_all(&t.subtask, "");
    if stripped.contains('{') || stripped.contains('}') {
        return Err(PlanError::UnknownPlaceholder(format!(
            "unbalanced brace in {:?}",
            t.subtask
        )));
    }
    if let Some(bad) = t.placeholders().into_iter().find(|p| !schema.contains(p)) {
        return Err(PlanError::UnknownPlaceholder(bad.to_string()));
    }
    if let Some(r) = &t.restriction {
        if let Some(bad) = r.keys().find(|k| !schema.contains(k)) {
            return Err(PlanError::UnknownRestrictionField(bad.clone()));
        }
    }
    Ok(())
}

/// Extracts the first list of template objects in `raw` and validates it.
pub fn parse_plan(raw: &str, schema: &MetadataSchema) -> Result<Plan, PlanError> {
    let Some(Value::Array(items)) = first_json_value(raw, '[') else {
        return Err(PlanError::NoList);
    };
    let mut plan = Plan::default();
    for (index, item) in items.iter().enumerate() {
        let malformed = |message: &str| PlanError::Malformed {
            index,
            message: message.to_string(),
        };
        let obj = item.as_object().ok_or_else(|| malformed("not an object"))?;
        let subtask = obj
            .get("subtask")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| malformed("missing subtask"))?;
        let restriction = match obj.get("restriction") {
            None | Some(Value::Null) => None,
            Some(Value::Object(map)) => {
                let mut r = Restriction::new();
                for (k, v) in map {
                    let values = string_list(v).ok_or_else(|| malformed("restriction values must be strings"))?;
                    r.insert(k.clone(), values);
                }
                Some(r)
            }
            Some(_) => return Err(malformed("restriction must be an object")),
        };
        let template = SubQueryTemplate {
            subtask: subtask.to_string(),
            restriction,
        };
        validate_template(&template, schema)?;
        if plan.templates.iter().any(|t| t.subtask == template.subtask) {
            let w = format!("duplicate subtask dropped: {}", template.subtask);
            log::warn!("{w}");
            plan.warnings.push(w);
            continue;
        }
        plan.templates.push(template);
    }
    if plan.templates.is_empty() {
        return Err(PlanError::Empty);
    }
    for field in schema.field_names() {
        if !plan.templates.iter().any(|t| t.placeholders().contains(&field)) {
            let w = format!("metadata field {field} is not placed in any template");
            log::info!("{w}");
            plan.warnings.push(w);
        }
    }
    Ok(plan)
}

/// Asks the planning agent for templates, re-prompting with the parse error
/// up to `repair_retries` times.
pub fn plan(
    question: &str,
    schema: &MetadataSchema,
    gateway: &Gateway,
    repair_retries: u32,
) -> Result<Plan, PlanError> {
    if question.trim().is_empty() {
        return Err(PlanError::EmptyQuestion);
    }
    let (system, user) = prompts::plan(question, &schema.description());
    let mut prompt = user.clone();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let reply = gateway.complete(&ChatRequest::new(AgentRole::Planner, &system, &prompt))?;
        match parse_plan(&reply.text, schema) {
            Ok(mut p) => {
                p.question = question.to_string();
                return Ok(p);
            }
            Err(e) if attempts > repair_retries => {
                return Err(PlanError::Unparseable {
                    attempts,
                    last_error: e.to_string(),
                    raw: reply.text,
                })
            }
            Err(e) => {
                log::warn!("plan reply rejected: {e}");
                prompt = user.clone() + &prompts::PLAN_REPAIR.replace("{error}", &e.to_string());
            }
        }
    }
}

pub fn satisfy_restriction(metadata: &Metadata, template: &SubQueryTemplate) -> bool {
    template
        .restriction
        .as_ref()
        .map(|r| satisfies(metadata, r))
        .unwrap_or(true)
}

pub fn fill_template(
    template: &SubQueryTemplate,
    template_index: usize,
    doc_id: &str,
    metadata: &Metadata,
) -> Result<InstantiatedQuery, PlanError> {
    let mut missing = None;
    let text = placeholder_re().replace_all(&template.subtask, |c: &regex::Captures| {
        let field = &c[1];
        match metadata.get(field) {
            Some(v) => v.clone(),
            None => {
                missing.get_or_insert_with(|| field.to_string());
                String::new()
            }
        }
    });
    if let Some(field) = missing {
        return Err(PlanError::MissingField { field });
    }
    Ok(InstantiatedQuery {
        doc_id: doc_id.to_string(),
        template_index,
        query_text: text.into_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptEntry, ScriptedProvider};

    fn schema() -> MetadataSchema {
        MetadataSchema::financial_filings()
    }

    fn meta(t: &str, y: &str) -> Metadata {
        [("ticker_symbol", t), ("fiscal_year", y), ("document_type", "annual_report")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    const ONE: &str = r#"[{"subtask":"What was {ticker_symbol}'s total operating cost in fiscal year {fiscal_year}?","restriction":{"fiscal_year":["2021"]}}]"#;

    #[test]
    fn plan_from_scripted_reply() {
        let gw = Gateway::local(ScriptedProvider::new(vec![ScriptEntry::new("", ONE)]));
        let p = plan("Which company had the highest cost?", &schema(), &gw, 2).unwrap();
        assert_eq!(p.templates.len(), 1);
        assert_eq!(p.templates[0].restriction.as_ref().unwrap()["fiscal_year"], ["2021"]);
        assert_eq!(p.question, "Which company had the highest cost?");
    }

    #[test]
    fn malformed_reply_errors_after_retries() {
        let gw = Gateway::local(ScriptedProvider::new(vec![ScriptEntry::new(
            "",
            r#"{"subtask": "What was {ticker_symbol}'s revenue?"}"#,
        )]));
        let err = plan("q", &schema(), &gw, 2).unwrap_err();
        assert!(matches!(err, PlanError::Unparseable { attempts: 3, .. }), "{err}");
        assert!(err.to_string().contains("raw reply"));
    }

    #[test]
    fn repair_prompt_recovers() {
        let gw = Gateway::local(ScriptedProvider::new(vec![
            ScriptEntry::new("could not be used", ONE),
            ScriptEntry::new("", "not json"),
        ]));
        assert_eq!(plan("q", &schema(), &gw, 1).unwrap().templates.len(), 1);
    }

    #[test]
    fn restriction_is_optional() {
        let raw = r#"[{"subtask":"Revenue of {ticker_symbol} in {fiscal_year}?","restriction":{"fiscal_year":["2021","2022"]}},{"subtask":"Auditor of {ticker_symbol} for {document_type}?"}]"#;
        let p = parse_plan(raw, &schema()).unwrap();
        assert_eq!(p.templates.len(), 2);
        assert!(p.templates[1].restriction.is_none());
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn fenced_list_and_validation() {
        let fenced = format!("Here is the plan:\n```json\n{ONE}\n```\nDone.");
        assert!(parse_plan(&fenced, &schema()).is_ok());

        let bad = r#"[{"subtask":"cost in {yearr}"}]"#;
        let err = parse_plan(bad, &schema()).unwrap_err();
        assert_eq!(err.to_string(), "unknown placeholder yearr");

        let bad = r#"[{"subtask":"cost of {ticker_symbol}","restriction":{"publication_year":["2021"]}}]"#;
        let err = parse_plan(bad, &schema()).unwrap_err();
        assert_eq!(err.to_string(), "unknown restriction field publication_year");
    }

    #[test]
    fn duplicates_and_unplaced_fields_warn() {
        let raw = r#"[{"subtask":"x {ticker_symbol}"},{"subtask":"x {ticker_symbol}"}]"#;
        let p = parse_plan(raw, &schema()).unwrap();
        assert_eq!(p.templates.len(), 1);
        assert!(p.warnings.iter().any(|w| w.contains("duplicate")));
        assert!(p.warnings.iter().any(|w| w.contains("fiscal_year")));
    }

    #[test]
    fn restriction_membership() {
        let t = SubQueryTemplate::new("x").restricted(
            [("fiscal_year".to_string(), vec!["2021".to_string(), "2022".to_string()])].into(),
        );
        assert!(satisfy_restriction(&meta("A", "2021"), &t));
        assert!(!satisfy_restriction(&meta("A", "2023"), &t));
        assert!(satisfy_restriction(&meta("A", "2023"), &SubQueryTemplate::new("x")));
    }

    #[test]
    fn fill() {
        let t = SubQueryTemplate::new("cost of {ticker_symbol} in {fiscal_year}");
        let q = fill_template(&t, 0, "d1", &meta("ACME", "2021")).unwrap();
        assert_eq!(q.query_text, "cost of ACME in 2021");
        assert!(!q.query_text.contains('{'));

        let plain = SubQueryTemplate::new("no placeholders here");
        assert_eq!(fill_template(&plain, 1, "d1", &meta("A", "1")).unwrap().query_text, plain.subtask);

        let mut m = meta("A", "2021");
        m.remove("ticker_symbol");
        assert!(matches!(
            fill_template(&t, 0, "d1", &m),
            Err(PlanError::MissingField { field }) if field == "ticker_symbol"
        ));
    }
}
