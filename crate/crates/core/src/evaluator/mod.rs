//! Final-answer judging, process scoring and aggregation.

pub mod numeric;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::Metadata;
use crate::extractor::TranscriptRecord;
use crate::gateway::{AgentRole, ChatRequest, Gateway};
use crate::prompts;
use crate::text::first_json_value;

pub use numeric::numeric_match;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("instance {0} has no gold facts")]
    NoGoldFacts(String),
    #[error("instance {0} has no aligned rows")]
    NoAlignedRows(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Simple,
    Complex,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tier::Simple => "simple",
            Tier::Complex => "complex",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedRow {
    pub doc_id: String,
    /// (field name, gold value) per metric cell.
    pub metric_columns: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkInstance {
    pub id: String,
    pub question: String,
    pub doc_ids: Vec<String>,
    /// Metadata per entry of `doc_ids`.
    #[serde(default)]
    pub metadata: Vec<Metadata>,
    pub gold_facts: Vec<String>,
    pub gold_answer: String,
    #[serde(default)]
    pub aligned_rows: Option<Vec<AlignedRow>>,
    pub tier: Tier,
    #[serde(default)]
    pub template_id: String,
    #[serde(default)]
    pub noise_doc_ids: Vec<String>,
}

impl BenchmarkInstance {
    /// Merged facts make coverage judging less reliable.
    pub fn non_atomic_risk(&self) -> bool {
        self.gold_facts.len() < self.doc_ids.len()
    }

    pub fn metadata_of(&self, doc_id: &str) -> Option<&Metadata> {
        self.doc_ids
            .iter()
            .position(|d| d == doc_id)
            .and_then(|i| self.metadata.get(i))
    }
}

pub mod flags {
    pub const EMPTY_PREDICTION: &str = "empty_prediction";
    pub const JUDGE_PARSE_FAILURE: &str = "judge_parse_failure";
    pub const JUDGE_UNAVAILABLE: &str = "judge_unavailable";
    pub const MISSING_RUN: &str = "missing_run";
    pub const MISSING_TRANSCRIPT: &str = "missing_transcript";
    pub const NON_ATOMIC_RISK: &str = "non_atomic_risk";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub final_correct: bool,
    pub judge_reply: String,
    pub explanation: String,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl Judgment {
    pub fn incorrect(flag: &str) -> Self {
        Self {
            final_correct: false,
            judge_reply: String::new(),
            explanation: flag.replace('_', " "),
            flags: vec![flag.to_string()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessMode {
    RagDoubleCheck,
    CellWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessScore {
    pub mode: ProcessMode,
    pub c_i: Option<f64>,
    pub e_i: Option<f64>,
    pub c_tilde: Option<f64>,
    pub c_cell: Option<f64>,
    pub p_i: f64,
    pub m_i: bool,
}

pub fn conservative_coverage(c: f64, e: f64) -> f64 {
    c.min(1.0 - e).clamp(0.0, 1.0)
}

impl ProcessScore {
    pub fn rag(c: f64, e: f64) -> Self {
        let c_tilde = conservative_coverage(c, e);
        Self {
            mode: ProcessMode::RagDoubleCheck,
            c_i: Some(c),
            e_i: Some(e),
            c_tilde: Some(c_tilde),
            c_cell: None,
            p_i: c_tilde,
            m_i: c_tilde == 1.0,
        }
    }

    pub fn cell(c_cell: f64) -> Self {
        Self {
            mode: ProcessMode::CellWise,
            c_i: None,
            e_i: None,
            c_tilde: None,
            c_cell: Some(c_cell),
            p_i: c_cell,
            m_i: c_cell == 1.0,
        }
    }

    /// Worst score for a mode, used when a run is missing.
    pub fn zero(mode: ProcessMode) -> Self {
        match mode {
            ProcessMode::RagDoubleCheck => Self::rag(0.0, 1.0),
            ProcessMode::CellWise => Self::cell(0.0),
        }
    }
}

/// Count clamped to [0, total] and divided by total.
pub fn clamped_ratio(count: f64, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let count = if count.is_finite() { count } else { 0.0 };
    count.clamp(0.0, total as f64) / total as f64
}

fn ask_json(gateway: &Gateway, system: &str, user: &str, retries: u32, key: &str) -> (Option<Value>, Vec<String>) {
    let mut replies = Vec::new();
    let mut prompt = user.to_string();
    for _ in 0..=retries {
        match gateway.complete(&ChatRequest::new(AgentRole::Judge, system, &prompt)) {
            Ok(r) => {
                let parsed = first_json_value(&r.text, '{').filter(|v| v.get(key).is_some());
                replies.push(r.text);
                if parsed.is_some() {
                    return (parsed, replies);
                }
            }
            Err(e) => {
                log::warn!("judge call failed: {e}");
                replies.push(format!("<gateway error: {e}>"));
                return (None, replies);
            }
        }
        prompt = user.to_string() + prompts::JUDGE_REPAIR;
    }
    (None, replies)
}

fn as_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_lowercase().as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn as_count(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

pub fn judge_final(instance: &BenchmarkInstance, predicted: &str, gateway: &Gateway, retries: u32) -> Judgment {
    if predicted.trim().is_empty() {
        return Judgment::incorrect(flags::EMPTY_PREDICTION);
    }
    let (system, user) = prompts::judge_final(&instance.question, &instance.gold_answer, predicted);
    let (parsed, replies) = ask_json(gateway, &system, &user, retries, "is_correct");
    let reply = replies.last().cloned().unwrap_or_default();
    match parsed.as_ref().and_then(|v| as_bool(&v["is_correct"])) {
        Some(ok) => Judgment {
            final_correct: ok,
            judge_reply: reply,
            explanation: parsed
                .as_ref()
                .and_then(|v| v.get("explanation"))
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            flags: vec![],
        },
        None => Judgment {
            judge_reply: reply,
            ..Judgment::incorrect(flags::JUDGE_PARSE_FAILURE)
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagCoverage {
    pub c_i: f64,
    pub e_i: f64,
    pub replies: Vec<String>,
    pub flags: Vec<String>,
}

/// Two independent judge calls: matched facts and erroneous or missing
/// facts. Failures default to C = 0 and E = 1.
pub fn judge_rag_coverage(
    instance: &BenchmarkInstance,
    extracted_chunks: &[String],
    gateway: &Gateway,
    retries: u32,
) -> Result<RagCoverage, EvalError> {
    let total = instance.gold_facts.len();
    if total == 0 {
        return Err(EvalError::NoGoldFacts(instance.id.clone()));
    }
    let source = serde_json::to_string(&instance.gold_facts).expect("serializable");
    let info = extracted_chunks.join(prompts::CHUNK_SEPARATOR);
    let mut flags = Vec::new();
    let mut replies = Vec::new();

    let (system, user) = prompts::judge_rag_correct(total, &source, &info);
    let (parsed, r) = ask_json(gateway, &system, &user, retries, "correct_extractions");
    replies.extend(r);
    let c_i = match parsed.as_ref().and_then(|v| as_count(&v["correct_extractions"])) {
        Some(n) => clamped_ratio(n, total),
        None => {
            flags.push(flags::JUDGE_PARSE_FAILURE.to_string());
            0.0
        }
    };

    let (system, user) = prompts::judge_rag_error(total, &source, &info);
    let (parsed, r) = ask_json(gateway, &system, &user, retries, "error_extractions");
    replies.extend(r);
    let e_i = match parsed.as_ref().and_then(|v| as_count(&v["error_extractions"])) {
        Some(n) => clamped_ratio(n, total),
        None => {
            if !flags.iter().any(|f| f == flags::JUDGE_PARSE_FAILURE) {
                flags.push(flags::JUDGE_PARSE_FAILURE.to_string());
            }
            1.0
        }
    };
    Ok(RagCoverage {
        c_i,
        e_i,
        replies,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCoverage {
    pub c_cell: f64,
    pub correct: usize,
    pub total: usize,
    pub replies: Vec<String>,
    pub flags: Vec<String>,
}

/// Per-document dialog shown to the cell judge.
pub fn render_dialog(records: &[&TranscriptRecord]) -> String {
    let turns: Vec<Value> = records
        .iter()
        .filter_map(|r| {
            r.answer.as_ref().map(|a| {
                serde_json::json!({
                    "question": r.query_text,
                    "answer": a,
                })
            })
        })
        .collect();
    serde_json::to_string_pretty(&turns).expect("serializable")
}

/// One judge call per aligned row against that document's dialog.
pub fn judge_cells(
    instance: &BenchmarkInstance,
    transcripts: &[TranscriptRecord],
    gateway: &Gateway,
    retries: u32,
) -> Result<CellCoverage, EvalError> {
    let rows = instance
        .aligned_rows
        .as_ref()
        .ok_or_else(|| EvalError::NoAlignedRows(instance.id.clone()))?;
    let mut by_doc: BTreeMap<&str, Vec<&TranscriptRecord>> = BTreeMap::new();
    for t in transcripts {
        if t.answer.is_some() {
            by_doc.entry(t.doc_id.as_str()).or_default().push(t);
        }
    }
    let mut out = CellCoverage {
        c_cell: 0.0,
        correct: 0,
        total: 0,
        replies: Vec::new(),
        flags: Vec::new(),
    };
    for (row_index, row) in rows.iter().enumerate() {
        out.total += row.metric_columns.len();
        let Some(dialog) = by_doc.get(row.doc_id.as_str()) else {
            out.flags.push(format!("{}: {}", flags::MISSING_TRANSCRIPT, row.doc_id));
            continue;
        };
        let meta = instance.metadata_of(&row.doc_id).cloned().unwrap_or_default();
        let mut headers: Vec<String> = meta.keys().cloned().collect();
        headers.extend(row.metric_columns.iter().map(|(f, _)| f.clone()));
        let mut source_row = serde_json::Map::new();
        for (k, v) in &meta {
            source_row.insert(k.clone(), Value::from(v.as_str()));
        }
        for (f, v) in &row.metric_columns {
            source_row.insert(f.clone(), Value::from(v.as_str()));
        }
        let columns: Vec<&str> = row.metric_columns.iter().map(|(f, _)| f.as_str()).collect();
        let (system, user) = prompts::judge_cells(
            &instance.question,
            &headers.join(", "),
            row_index,
            &Value::Object(source_row).to_string(),
            &serde_json::to_string(&meta).expect("serializable"),
            columns.len(),
            &serde_json::to_string(&columns).expect("serializable"),
            &render_dialog(dialog),
        );
        let (parsed, replies) = ask_json(gateway, &system, &user, retries, "correct_metric_fields");
        out.replies.extend(replies);
        match parsed.as_ref().and_then(|v| v["correct_metric_fields"].as_array()) {
            Some(fields) => {
                let named: BTreeSet<&str> = fields.iter().filter_map(Value::as_str).collect();
                let (kept, dropped): (Vec<&str>, Vec<&str>) = named.into_iter().partition(|f| columns.contains(f));
                if !dropped.is_empty() {
                    log::warn!("cell judge named fields outside the row: {dropped:?}");
                }
                out.correct += kept.len();
            }
            None => out.flags.push(format!("{}: row {row_index}", flags::JUDGE_PARSE_FAILURE)),
        }
    }
    out.c_cell = clamped_ratio(out.correct as f64, out.total);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub n: usize,
    pub acc_process: f64,
    pub acc_final: f64,
    pub acc_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: Accuracy,
    pub by_tier: BTreeMap<Tier, Accuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub instance_id: String,
    pub tier: Tier,
    pub process: ProcessScore,
    pub judgment: Judgment,
    #[serde(default)]
    pub flags: Vec<String>,
}

fn accuracy(items: &[&ScoredInstance]) -> Accuracy {
    let n = items.len() as f64;
    let mean = |f: &dyn Fn(&ScoredInstance) -> f64| items.iter().map(|s| f(s)).sum::<f64>() / n;
    let t = |s: &ScoredInstance| if s.judgment.final_correct { 1.0 } else { 0.0 };
    Accuracy {
        n: items.len(),
        acc_process: mean(&|s| s.process.p_i),
        acc_final: mean(&t),
        acc_full: mean(&|s| if s.process.m_i { t(s) } else { 0.0 }),
    }
}

pub fn aggregate(scores: &[ScoredInstance]) -> Result<MetricReport, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let all: Vec<&ScoredInstance> = scores.iter().collect();
    let mut by_tier = BTreeMap::new();
    for tier in [Tier::Simple, Tier::Complex] {
        let subset: Vec<&ScoredInstance> = scores.iter().filter(|s| s.tier == tier).collect();
        if !subset.is_empty() {
            by_tier.insert(tier, accuracy(&subset));
        }
    }
    Ok(MetricReport {
        overall: accuracy(&all),
        by_tier,
    })
}

impl MetricReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<9} {:>5} {:>12} {:>10} {:>9}\n",
            "tier", "n", "Acc_process", "Acc_final", "Acc_full"
        );
        let row = |name: &str, a: &Accuracy| {
            format!(
                "{:<9} {:>5} {:>12.4} {:>10.4} {:>9.4}\n",
                name, a.n, a.acc_process, a.acc_final, a.acc_full
            )
        };
        for (tier, acc) in &self.by_tier {
            out.push_str(&row(&tier.to_string(), acc));
        }
        out.push_str(&row("overall", &self.overall));
        out
    }
}
