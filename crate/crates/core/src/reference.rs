//! Rule-based stand-ins for the normalizer, synthesizer and judge roles,
//! and fixture builders that script the planner and coder for a generated
//! benchmark. Together with the oracle reader they make a full run
//! reproducible without any model.

use std::collections::BTreeSet;

use serde_json::{json, Map, Value};

use crate::benchgen::catalog::{self, MetricDef};
use crate::benchgen::templates::{OracleKind, QuestionTemplate};
use crate::benchgen::{BenchError, YEAR};
use crate::evaluator::numeric::contains_key_information;
use crate::evaluator::BenchmarkInstance;
use crate::gateway::{AgentRole, ChatProvider, ChatRequest, ProviderError, ScriptEntry, ScriptFixture};
use crate::prompts::markers::*;
use crate::text::first_json_value;

fn after<'a>(raw: &'a str, marker: &str) -> Option<&'a str> {
    raw.find(marker).map(|i| &raw[i + marker.len()..])
}

fn json_after(raw: &str, marker: &str, open: char) -> Result<Value, String> {
    after(raw, marker)
        .and_then(|rest| first_json_value(rest, open))
        .ok_or_else(|| format!("no JSON after {marker:?}"))
}

fn line_after<'a>(raw: &'a str, marker: &str) -> Option<&'a str> {
    after(raw, marker).map(|rest| rest.lines().next().unwrap_or("").trim())
}

/// Text between `start` and the last `end` marker.
fn span<'a>(raw: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let body = after(raw, start)?;
    let stop = body.rfind(end).unwrap_or(body.len());
    Some(body[..stop].trim())
}

const CRITERIA: &str = "\n\nEvaluation Criteria:";

/// Normalizer, synthesizer and judge in one provider, dispatching on role.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceAgent;

impl ChatProvider for ReferenceAgent {
    fn id(&self) -> &str {
        "reference"
    }

    fn send(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let prompt = request.user_prompt.as_str();
        let reply = match request.role {
            AgentRole::Normalizer => normalize(prompt),
            AgentRole::Synthesizer => synthesize(prompt),
            AgentRole::Judge => judge(prompt),
            role => Err(format!("no reference rule for the {role} role")),
        };
        reply.map_err(|e| ProviderError::fatal(format!("reference agent: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Normalizer

fn turns(v: Value) -> Result<Vec<Map<String, Value>>, String> {
    match v {
        Value::Array(items) => items
            .into_iter()
            .map(|i| match i {
                Value::Object(o) => Ok(o),
                _ => Err("dialog turn is not an object".to_string()),
            })
            .collect(),
        _ => Err("dialog is not a list".into()),
    }
}

fn metadata_of(turn: &Map<String, Value>) -> Map<String, Value> {
    turn.get("metadata").and_then(Value::as_object).cloned().unwrap_or_default()
}

fn answer_of(turn: &Map<String, Value>) -> &str {
    turn.get("answer").and_then(Value::as_str).unwrap_or("")
}

/// The value a statement in `answer` gives for this metric, preferring the
/// one about the turn's own company and year.
fn metric_value(def: &MetricDef, answer: &str, ticker: &str, year: &str) -> Option<String> {
    let parsed = def.parse_all(answer);
    parsed
        .iter()
        .find(|(t, y, _)| t == ticker && y == year)
        .or(parsed.first())
        .map(|(_, _, v)| v.clone())
}

fn to_record(turn: &Map<String, Value>, fields: &[String]) -> Value {
    let meta = metadata_of(turn);
    let text = |k: &str| meta.get(k).and_then(Value::as_str).unwrap_or("").to_string();
    let (ticker, year) = (text(crate::benchgen::TICKER), text(YEAR));
    let mut rec = Map::new();
    for f in fields {
        let v = if let Some(m) = meta.get(f) {
            m.clone()
        } else if let Some(def) = catalog::metric(f) {
            metric_value(def, answer_of(turn), &ticker, &year).map(Value::from).unwrap_or(Value::Null)
        } else {
            Value::Null
        };
        rec.insert(f.clone(), v);
    }
    Value::Object(rec)
}

fn normalize(prompt: &str) -> Result<String, String> {
    if prompt.contains(NORM_NEW) {
        let exemplar = json_after(prompt, NORM_EXEMPLAR, '[')?;
        let fields: Vec<String> = exemplar
            .as_array()
            .and_then(|a| a.first())
            .and_then(Value::as_object)
            .map(|o| o.keys().cloned().collect())
            .ok_or("exemplar has no records")?;
        let dialog = turns(json_after(prompt, NORM_NEW, '[')?)?;
        let records: Vec<Value> = dialog.iter().map(|t| to_record(t, &fields)).collect();
        return Ok(format!("<json>{}</json>", Value::Array(records)));
    }
    let question = line_after(prompt, NORM_TASK).ok_or("no task line")?;
    let dialog = turns(json_after(prompt, NORM_DIALOG, '[')?)?;
    let mut metrics: Vec<&str> = catalog::metrics_in_question(question).iter().map(|m| m.name).collect();
    for m in catalog::METRICS {
        if !metrics.contains(&m.name) && dialog.iter().any(|t| !m.parse_all(answer_of(t)).is_empty()) {
            metrics.push(m.name);
        }
    }
    let mut fields: Vec<String> = Vec::new();
    for t in &dialog {
        for k in metadata_of(t).keys() {
            if !fields.contains(k) {
                fields.push(k.clone());
            }
        }
    }
    let meta_fields = fields.join(", ");
    fields.extend(metrics.iter().map(|m| m.to_string()));
    let records: Vec<Value> = dialog.iter().map(|t| to_record(t, &fields)).collect();
    let des = format!(
        "One record per answered sub-question. Metadata fields: {meta_fields}. Metric fields, null when the answer does not state them: {}.",
        metrics.join(", ")
    );
    Ok(format!("<des>{des}</des>\n<json>{}</json>", Value::Array(records)))
}

// ---------------------------------------------------------------------------
// Synthesizer

fn synthesize(prompt: &str) -> Result<String, String> {
    let start = prompt.rfind(FINAL_RUN).ok_or("no code response")? + FINAL_RUN.len();
    let end = prompt.rfind(FINAL_RUN_END).filter(|e| *e >= start).unwrap_or(prompt.len());
    Ok(prompt[start..end].trim().to_string())
}

// ---------------------------------------------------------------------------
// Judge

fn judge(prompt: &str) -> Result<String, String> {
    if prompt.contains(CELL_METRICS) {
        judge_cells(prompt)
    } else if prompt.contains(RAG_ERROR_SIDE) {
        let (total, correct) = judge_rag(prompt)?;
        Ok(json!({"error_extractions": total - correct, "total_required": total, "explanation": "reference rule"}).to_string())
    } else if prompt.contains(RAG_CORRECT_SIDE) {
        let (total, correct) = judge_rag(prompt)?;
        Ok(json!({"correct_extractions": correct, "total_required": total, "explanation": "reference rule"}).to_string())
    } else if prompt.contains(FINAL_REFERENCE) {
        let reference = span(prompt, FINAL_REFERENCE, FINAL_MODEL).ok_or("no reference answer")?;
        let reference = reference.strip_suffix("3.").unwrap_or(reference).trim();
        let answer = span(prompt, FINAL_MODEL, CRITERIA).ok_or("no model answer")?;
        let ok = !answer.is_empty() && contains_key_information(reference, answer);
        Ok(json!({"is_correct": ok, "explanation": "key items compared under the numeric rule"}).to_string())
    } else {
        Err("unrecognized judge prompt".into())
    }
}

/// Catalog statements in a text as (metric, ticker, year, value).
fn statements(text: &str) -> Vec<(&'static MetricDef, String, String, String)> {
    catalog::METRICS
        .iter()
        .flat_map(|m| m.parse_all(text).into_iter().map(move |(t, y, v)| (m, t, y, v)))
        .collect()
}

fn supported(def: &MetricDef, ticker: &str, year: &str, gold: &str, info: &str) -> bool {
    def.parse_all(info)
        .iter()
        .any(|(t, y, v)| t == ticker && y == year && def.value_matches(gold, v))
}

fn judge_rag(prompt: &str) -> Result<(usize, usize), String> {
    let facts: Vec<String> = serde_json::from_value(json_after(prompt, RAG_SOURCE, '[')?).map_err(|e| e.to_string())?;
    let info = span(prompt, RAG_INFO, CRITERIA).unwrap_or("");
    let correct = facts
        .iter()
        .filter(|f| {
            let parts = statements(f);
            if parts.is_empty() {
                contains_key_information(f, info)
            } else {
                parts.iter().all(|(m, t, y, v)| supported(m, t, y, v, info))
            }
        })
        .count();
    Ok((facts.len(), correct))
}

fn judge_cells(prompt: &str) -> Result<String, String> {
    let row = json_after(prompt, CELL_ROW, '{')?;
    let columns: Vec<String> = serde_json::from_value(json_after(prompt, CELL_METRICS, '[')?).map_err(|e| e.to_string())?;
    let dialog = turns(json_after(prompt, CELL_DIALOG, '[')?)?;
    let field = |k: &str| row.get(k).and_then(Value::as_str).unwrap_or("").to_string();
    let (ticker, year) = (field(crate::benchgen::TICKER), field(YEAR));
    let correct: Vec<&String> = columns
        .iter()
        .filter(|c| {
            let Some(def) = catalog::metric(c) else {
                return false;
            };
            let gold = field(c);
            dialog.iter().any(|t| supported(def, &ticker, &year, &gold, answer_of(t)))
        })
        .collect();
    Ok(json!({ "correct_metric_fields": correct }).to_string())
}

// ---------------------------------------------------------------------------
// Planner and coder fixtures

/// The plan the reference planner gives: one sub-query per required metric,
/// restricted to the template's document type and years.
pub fn reference_plan(template: &QuestionTemplate) -> Result<Value, BenchError> {
    let doc_type = template.doc_type()?;
    let years = template.years()?;
    template
        .required_metrics
        .iter()
        .map(|m| {
            let def = catalog::metric(m).ok_or_else(|| BenchError::UnknownMetric(m.clone()))?;
            Ok(json!({
                "subtask": def.subquery_template(),
                "restriction": {"fiscal_year": years, "document_type": [doc_type]},
            }))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Value::Array)
}

const PROGRAM_HEAD: &str = r#"import json
import os
import sys

path = sys.argv[1] if len(sys.argv) > 1 else os.environ["MUDA_DATA_PATH"]
with open(path, encoding="utf-8") as f:
    records = json.load(f)

# merge the per-question records of each company and year
rows = {}
for r in records:
    key = (str(r.get("ticker_symbol")), str(r.get("fiscal_year")))
    row = rows.setdefault(key, {})
    for k, v in r.items():
        if v is not None:
            row[k] = v


def column(year, metric):
    out = []
    for (t, y) in sorted(rows):
        if y == year and rows[(t, y)].get(metric) is not None:
            out.append((t, rows[(t, y)][metric]))
    return out


def mean(xs):
    total = 0.0
    for x in xs:
        total += x
    return total / len(xs)


def pvariance(xs):
    m = mean(xs)
    total = 0.0
    for x in xs:
        total += (x - m) * (x - m)
    return total / len(xs)


def growth(a, b):
    return (b - a) / abs(a) * 100.0


def paired(y1, y2, metric):
    later = dict(column(y2, metric))
    return [(t, v, later[t]) for t, v in column(y1, metric) if t in later]

"#;

fn py_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// Analysis program for a resolved template. Folds run in ticker order
/// and print with two decimals, mirroring the benchmark oracles.
pub fn reference_program(template: &QuestionTemplate) -> Result<String, BenchError> {
    let metric = py_str(&template.param_str("metric")?);
    let p = |k: &str| template.param_str(k).map(|v| py_str(&v));
    let sign = |t: &QuestionTemplate| -> Result<&str, BenchError> {
        Ok(if t.param_str("order")? == "desc" { "-" } else { "" })
    };
    let body = match template.answer_oracle {
        OracleKind::TopKByMetric => format!(
            "items = [(t, float(v)) for t, v in column({year}, {metric})]\n\
             items.sort(key=lambda it: ({sign}it[1], it[0]))\n\
             print(\"; \".join(f\"{{t}} ({{v:.2f}})\" for t, v in items[:{k}]))\n",
            year = p("year")?,
            sign = sign(template)?,
            k = template.param_usize("k")?,
        ),
        OracleKind::Range => format!(
            "xs = [float(v) for _, v in column({year}, {metric})]\n\
             hi = max(xs)\n\
             lo = min(xs)\n\
             print(f\"max {{hi:.2f}}; min {{lo:.2f}}; range {{hi - lo:.2f}}\")\n",
            year = p("year")?,
        ),
        OracleKind::Variance => format!(
            "xs = [float(v) for _, v in column({year}, {metric})]\n\
             print(f\"variance {{pvariance(xs):.2f}}\")\n",
            year = p("year")?,
        ),
        OracleKind::GrowthRateTopK => format!(
            "items = [(t, growth(float(a), float(b))) for t, a, b in paired({from}, {to}, {metric})]\n\
             items.sort(key=lambda it: ({sign}it[1], it[0]))\n\
             print(\"; \".join(f\"{{t}} ({{g:.2f}}%)\" for t, g in items[:{k}]))\n",
            from = p("from_year")?,
            to = p("to_year")?,
            sign = sign(template)?,
            k = template.param_usize("k")?,
        ),
        OracleKind::ChangeDetection => format!(
            "changed = [f\"{{t}} ({{a}} -> {{b}})\" for t, a, b in paired({from}, {to}, {metric}) if str(a) != str(b)]\n\
             print(\"; \".join(changed) if changed else \"None\")\n",
            from = p("from_year")?,
            to = p("to_year")?,
        ),
        OracleKind::IntervalDays => format!(
            "from datetime import date\n\
             ends = dict(column({year}, {to_metric}))\n\
             items = []\n\
             for t, start in column({year}, {metric}):\n\
             \x20   if t in ends:\n\
             \x20       items.append((t, (date.fromisoformat(ends[t]) - date.fromisoformat(start)).days))\n\
             items.sort(key=lambda it: ({sign}it[1], it[0]))\n\
             print(\"; \".join(f\"{{t}} ({{d}} days)\" for t, d in items[:{k}]))\n",
            year = p("year")?,
            to_metric = p("to_metric")?,
            sign = sign(template)?,
            k = template.param_usize("k")?,
        ),
        OracleKind::Outlier2Sigma => format!(
            "import math\n\
             rates = [(t, growth(float(a), float(b))) for t, a, b in paired({from}, {to}, {metric})]\n\
             xs = [g for _, g in rates]\n\
             m = mean(xs)\n\
             sd = math.sqrt(pvariance(xs))\n\
             out = [f\"{{t}} ({{g:.2f}}%)\" for t, g in rates if abs(g - m) > 2 * sd]\n\
             print(\"; \".join(out) if out else \"None\")\n",
            from = p("from_year")?,
            to = p("to_year")?,
        ),
    };
    Ok(format!("{PROGRAM_HEAD}{body}"))
}

/// Years an instance covers, ascending.
fn instance_years(instance: &BenchmarkInstance) -> Vec<String> {
    let set: BTreeSet<String> = instance.metadata.iter().filter_map(|m| m.get(YEAR).cloned()).collect();
    set.into_iter().collect()
}

/// Matcher that fires on exactly this question inside a planner or coder
/// prompt.
pub fn question_matcher(marker: &str, question: &str) -> String {
    format!("{marker}{question}\n")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fixtures {
    pub planner: ScriptFixture,
    pub coder: ScriptFixture,
}

/// Planner and coder replies for every distinct question in `instances`.
pub fn build_fixtures(instances: &[BenchmarkInstance], templates: &[QuestionTemplate]) -> Result<Fixtures, BenchError> {
    let mut out = Fixtures::default();
    let mut seen = BTreeSet::new();
    for inst in instances {
        if !seen.insert(inst.question.clone()) {
            continue;
        }
        let template = templates
            .iter()
            .find(|t| t.id == inst.template_id)
            .ok_or_else(|| BenchError::BadParam {
                template: inst.template_id.clone(),
                key: "template_id".into(),
            })?
            .resolve(&instance_years(inst))?;
        let plan = serde_json::to_string_pretty(&reference_plan(&template)?).expect("plan serializes");
        out.planner.entries.push(ScriptEntry::new(question_matcher(TASK, &inst.question), plan));
        let code = reference_program(&template)?;
        out.coder.entries.push(ScriptEntry::new(
            question_matcher(CODE_TASK, &inst.question),
            format!("<execute>\n{code}</execute>"),
        ));
    }
    Ok(out)
}
