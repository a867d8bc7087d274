//! Turns extraction transcripts into one flat record set under a schema
//! fixed by the first sample.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::extractor::{ExtractionPair, NOT_FOUND};
use crate::gateway::{AgentRole, ChatRequest, Gateway, GatewayError};
use crate::prompts;
use crate::text::between_tags;

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("tag <{0}> not found")]
    MissingTag(String),
    #[error("invalid json payload: {0}")]
    Json(String),
    #[error("nested structure in field `{0}`")]
    NestedStructure(String),
    #[error("schema has no fields")]
    EmptySchema,
    #[error("no extraction pairs to normalize")]
    EmptyInput,
    #[error("invalid normalize config: {0}")]
    Config(String),
    #[error("normalization reply unusable after {attempts} attempts: {last_error}")]
    Unparseable { attempts: u32, last_error: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSchema {
    pub description: String,
    pub field_names: Vec<String>,
}

/// One depth-1 record. Key order follows the schema.
pub type FlatRecord = Map<String, Value>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Source {
    pub doc_id: String,
    pub template_index: usize,
}

impl From<&ExtractionPair> for Source {
    fn from(p: &ExtractionPair) -> Self {
        Self {
            doc_id: p.query.doc_id.clone(),
            template_index: p.query.template_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedBatch {
    pub batch_index: usize,
    pub sources: Vec<Source>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSet {
    pub schema: RecordSchema,
    pub records: Vec<FlatRecord>,
    /// Sources of each record, parallel to `records`.
    pub provenance: Vec<Vec<Source>>,
    #[serde(default)]
    pub failed_batches: Vec<FailedBatch>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProvenanceFile {
    provenance: Vec<Vec<Source>>,
    failed_batches: Vec<FailedBatch>,
    warnings: Vec<String>,
}

pub const RECORDS_FILE: &str = "records.json";
pub const SCHEMA_FILE: &str = "schema.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

pub fn to_pretty_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

impl RecordSet {
    pub fn is_flat(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.values().all(|v| !v.is_array() && !v.is_object()))
    }

    /// Writes records, schema and provenance files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), NormalizeError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RECORDS_FILE), to_pretty_json(&self.records))?;
        std::fs::write(dir.join(SCHEMA_FILE), to_pretty_json(&self.schema))?;
        let prov = ProvenanceFile {
            provenance: self.provenance.clone(),
            failed_batches: self.failed_batches.clone(),
            warnings: self.warnings.clone(),
        };
        std::fs::write(dir.join(PROVENANCE_FILE), to_pretty_json(&prov))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NormalizeError> {
        let read = |name: &str| -> Result<String, NormalizeError> { Ok(std::fs::read_to_string(dir.join(name))?) };
        let json = |e: serde_json::Error| NormalizeError::Json(e.to_string());
        let records: Vec<FlatRecord> = serde_json::from_str(&read(RECORDS_FILE)?).map_err(json)?;
        let schema: RecordSchema = serde_json::from_str(&read(SCHEMA_FILE)?).map_err(json)?;
        let prov: ProvenanceFile = serde_json::from_str(&read(PROVENANCE_FILE)?).map_err(json)?;
        Ok(Self {
            schema,
            records,
            provenance: prov.provenance,
            failed_batches: prov.failed_batches,
            warnings: prov.warnings,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeConfig {
    pub batch_size: usize,
    pub sample_size: usize,
    pub repair_retries: u32,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            sample_size: 5,
            repair_retries: 1,
        }
    }
}

impl NormalizeConfig {
    pub fn validate(&self) -> Result<(), NormalizeError> {
        if self.batch_size == 0 || self.sample_size == 0 {
            return Err(NormalizeError::Config("batch_size and sample_size must be positive".into()));
        }
        if self.sample_size > self.batch_size {
            return Err(NormalizeError::Config(format!(
                "sample_size {} exceeds batch_size {}",
                self.sample_size, self.batch_size
            )));
        }
        Ok(())
    }
}

pub fn parse_tagged<'a>(raw: &'a str, tag: &str) -> Result<&'a str, NormalizeError> {
    between_tags(raw, tag).ok_or_else(|| NormalizeError::MissingTag(tag.to_string()))
}

/// Conversation transcript shown to the normalizing agent.
pub fn render_conversation(pairs: &[ExtractionPair]) -> String {
    let turns: Vec<Value> = pairs
        .iter()
        .map(|p| {
            serde_json::json!({
                "metadata": p.metadata,
                "question": p.query.query_text,
                "answer": p.answer,
            })
        })
        .collect();
    serde_json::to_string_pretty(&turns).expect("serializable")
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?(0|[1-9]\d*)(\.\d+)?([eE][+-]?\d+)?$").unwrap())
}

/// Stores numeric strings as numbers, integers as integers. The sentinel
/// becomes null.
pub fn coerce_scalar(v: Value) -> Value {
    match v {
        Value::String(s) => {
            let t = s.trim();
            if t == NOT_FOUND {
                return Value::Null;
            }
            if number_re().is_match(t) {
                if let Ok(i) = t.parse::<i64>() {
                    return Value::from(i);
                }
                if let Some(n) = t.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                    return Value::Number(n);
                }
            }
            Value::String(s)
        }
        other => other,
    }
}

fn parse_record_list(raw: &str) -> Result<Vec<FlatRecord>, NormalizeError> {
    let body = parse_tagged(raw, "json")?;
    let value: Value = serde_json::from_str(body.trim()).map_err(|e| NormalizeError::Json(e.to_string()))?;
    let items = match value {
        Value::Array(items) => items,
        Value::Object(o) => vec![Value::Object(o)],
        _ => return Err(NormalizeError::Json("expected a list of objects".into())),
    };
    items
        .into_iter()
        .map(|item| match item {
            Value::Object(map) => {
                let mut rec = FlatRecord::new();
                for (k, v) in map {
                    if v.is_array() || v.is_object() {
                        return Err(NormalizeError::NestedStructure(k));
                    }
                    rec.insert(k, coerce_scalar(v));
                }
                Ok(rec)
            }
            _ => Err(NormalizeError::Json("list item is not an object".into())),
        })
        .collect()
}

/// Asks, re-asks on parse failure, and hands back the parsed payload.
fn ask_with_repair<T>(
    gateway: &Gateway,
    system: &str,
    user: &str,
    repair_retries: u32,
    parse: impl Fn(&str) -> Result<T, NormalizeError>,
) -> Result<T, NormalizeError> {
    let mut prompt = user.to_string();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let reply = gateway.complete(&ChatRequest::new(AgentRole::Normalizer, system, &prompt))?;
        match parse(&reply.text) {
            Ok(v) => return Ok(v),
            Err(e) if attempts > repair_retries => {
                return Err(NormalizeError::Unparseable {
                    attempts,
                    last_error: e.to_string(),
                })
            }
            Err(e) => {
                log::warn!("normalizer reply rejected: {e}");
                prompt = user.to_string() + &prompts::NORM_REPAIR.replace("{error}", &e.to_string());
            }
        }
    }
}

/// Conforms a record to the schema: unknown keys dropped, missing keys null.
pub fn conform(record: FlatRecord, schema: &RecordSchema, warnings: &mut Vec<String>) -> FlatRecord {
    let mut record = record;
    let mut out = FlatRecord::new();
    for name in &schema.field_names {
        out.insert(name.clone(), record.remove(name).unwrap_or(Value::Null));
    }
    for key in record.keys() {
        let w = format!("dropped field `{key}` outside the schema");
        log::warn!("{w}");
        warnings.push(w);
    }
    out
}

/// Stage one: the schema is the union of keys across the sample records,
/// in first-seen order.
pub fn define_schema(
    sample: &[ExtractionPair],
    question: &str,
    gateway: &Gateway,
    repair_retries: u32,
) -> Result<(RecordSchema, Vec<FlatRecord>), NormalizeError> {
    if sample.is_empty() {
        return Err(NormalizeError::EmptyInput);
    }
    let (system, user) = prompts::norm_schema(question, &render_conversation(sample));
    let (description, records) = ask_with_repair(gateway, &system, &user, repair_retries, |raw| {
        let records = parse_record_list(raw)?;
        let des = parse_tagged(raw, "des")?.trim().to_string();
        Ok((des, records))
    })?;
    let mut field_names: Vec<String> = Vec::new();
    for r in &records {
        for k in r.keys() {
            if !field_names.contains(k) {
                field_names.push(k.clone());
            }
        }
    }
    if field_names.is_empty() {
        return Err(NormalizeError::EmptySchema);
    }
    let schema = RecordSchema {
        description,
        field_names,
    };
    let mut ignored = Vec::new();
    let records = records.into_iter().map(|r| conform(r, &schema, &mut ignored)).collect();
    Ok((schema, records))
}

pub fn normalize_batch(
    batch: &[ExtractionPair],
    schema: &RecordSchema,
    exemplar: &[FlatRecord],
    gateway: &Gateway,
    repair_retries: u32,
    warnings: &mut Vec<String>,
) -> Result<Vec<FlatRecord>, NormalizeError> {
    let exemplar_json = serde_json::to_string_pretty(exemplar).expect("serializable");
    let (system, user) = prompts::norm_continuation(&exemplar_json, &render_conversation(batch));
    let records = ask_with_repair(gateway, &system, &user, repair_retries, parse_record_list)?;
    Ok(records.into_iter().map(|r| conform(r, schema, warnings)).collect())
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Sources of a record: one-to-one when counts agree, otherwise the batch
/// pairs whose metadata agrees with the record on every shared key.
fn attribute(records: &[FlatRecord], batch: &[ExtractionPair]) -> Vec<Vec<Source>> {
    if records.len() == batch.len() {
        return batch.iter().map(|p| vec![Source::from(p)]).collect();
    }
    records
        .iter()
        .map(|r| {
            let hits: BTreeSet<Source> = batch
                .iter()
                .filter(|p| {
                    let mut shared = 0;
                    let agrees = p.metadata.iter().all(|(k, v)| match r.get(k).and_then(value_text) {
                        Some(rv) => {
                            shared += 1;
                            rv == v.trim()
                        }
                        None => true,
                    });
                    agrees && shared > 0
                })
                .map(Source::from)
                .collect();
            if hits.is_empty() {
                batch.iter().map(Source::from).collect()
            } else {
                hits.into_iter().collect()
            }
        })
        .collect()
}

/// Splits pairs into ⌈n/B⌉ batches, processed in order.
pub fn normalize_all(
    pairs: &[ExtractionPair],
    question: &str,
    cfg: &NormalizeConfig,
    gateway: &Gateway,
) -> Result<RecordSet, NormalizeError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(NormalizeError::EmptyInput);
    }
    let sample = &pairs[..cfg.sample_size.min(pairs.len())];
    let (schema, exemplar) = define_schema(sample, question, gateway, cfg.repair_retries)?;
    let mut set = RecordSet {
        schema,
        records: Vec::new(),
        provenance: Vec::new(),
        failed_batches: Vec::new(),
        warnings: Vec::new(),
    };
    for (k, batch) in pairs.chunks(cfg.batch_size).enumerate() {
        let mut warnings = Vec::new();
        match normalize_batch(batch, &set.schema, &exemplar, gateway, cfg.repair_retries, &mut warnings) {
            Ok(records) => {
                if records.len() != batch.len() {
                    warnings.push(format!(
                        "batch {k}: {} records for {} pairs",
                        records.len(),
                        batch.len()
                    ));
                }
                set.provenance.extend(attribute(&records, batch));
                set.records.extend(records);
            }
            Err(e) => {
                log::warn!("normalization batch {k} failed: {e}");
                set.failed_batches.push(FailedBatch {
                    batch_index: k,
                    sources: batch.iter().map(Source::from).collect(),
                    error: e.to_string(),
                });
            }
        }
        set.warnings.extend(warnings);
    }
    Ok(set)
}
