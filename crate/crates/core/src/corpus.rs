//! Document collection with a metadata index, restriction filtering and
//! character-based chunking.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed values per metadata field. A document passes when, for every
/// listed field, its value is one of the allowed strings.
pub type Restriction = BTreeMap<String, Vec<String>>;

/// Metadata values keyed by field name.
pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("metadata key mismatch in document {doc_id}: expected {expected:?}, found {found:?}")]
    MetadataMismatch {
        doc_id: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("duplicate doc_id {0}")]
    DuplicateDocId(String),
    #[error("unknown metadata field {0}")]
    UnknownField(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("document {0} has empty text")]
    EmptyText(String),
    #[error("overlap_chars ({overlap}) must be smaller than chunk_chars ({chunk})")]
    InvalidChunking { chunk: usize, overlap: usize },
    #[error("unknown document {0}")]
    UnknownDocument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Categorical,
    Year,
    Identifier,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Categorical => "categorical",
            ValueKind::Year => "year",
            ValueKind::Identifier => "identifier",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataField {
    pub name: String,
    pub description: String,
    pub kind: ValueKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetadataSchema {
    pub fields: Vec<MetadataField>,
}

impl MetadataSchema {
    pub fn new(fields: Vec<MetadataField>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for f in &fields {
            if f.name.trim().is_empty() {
                return Err(CorpusError::InvalidSchema("empty field name".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(CorpusError::InvalidSchema(format!(
                    "duplicate field {}",
                    f.name
                )));
            }
        }
        Ok(Self { fields })
    }

    /// The three-field schema used for listed-company filings.
    pub fn financial_filings() -> Self {
        let field = |name: &str, description: &str, kind| MetadataField {
            name: name.to_string(),
            description: description.to_string(),
            kind,
        };
        Self {
            fields: vec![
                field(
                    "ticker_symbol",
                    "stock ticker of the company the document belongs to",
                    ValueKind::Identifier,
                ),
                field(
                    "fiscal_year",
                    "fiscal year the document covers (not its publication year)",
                    ValueKind::Year,
                ),
                field(
                    "document_type",
                    "kind of filing: annual_report, esg_report or dividend_announcement",
                    ValueKind::Categorical,
                ),
            ],
        }
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.fields.iter().any(|f| f.name == name)
    }

    /// One line per field, `name: description (kind)`, in declared order.
    pub fn description(&self) -> String {
        self.fields
            .iter()
            .map(|f| format!("{}: {} ({})", f.name, f.description, f.kind))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Free-function form of [`MetadataSchema::description`].
pub fn schema_description(schema: &MetadataSchema) -> String {
    schema.description()
}

/// One machine-readable fact embedded in a synthetic document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub value: String,
    pub statement: String,
}

pub type FactSidecar = BTreeMap<String, Fact>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub text: String,
    pub metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact_sidecar: Option<FactSidecar>,
}

impl DocumentRecord {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>, metadata: Metadata) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
            metadata: metadata
                .into_iter()
                .map(|(k, v)| (k, v.trim().to_string()))
                .collect(),
            fact_sidecar: None,
        }
    }

    pub fn with_sidecar(mut self, sidecar: FactSidecar) -> Self {
        self.fact_sidecar = Some(sidecar);
        self
    }
}

/// Conjunction across fields, disjunction within each allowed list.
/// Values compare as exact strings after trimming.
pub fn satisfies(metadata: &Metadata, restriction: &Restriction) -> bool {
    restriction.iter().all(|(field, allowed)| {
        metadata
            .get(field)
            .map(|v| allowed.iter().any(|a| a.trim() == v.trim()))
            .unwrap_or(false)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    schema: MetadataSchema,
    documents: Vec<DocumentRecord>,
}

impl Corpus {
    pub fn new(schema: MetadataSchema, documents: Vec<DocumentRecord>) -> Result<Self, CorpusError> {
        let corpus = Self { schema, documents };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let expected: BTreeSet<&str> = self.schema.field_names().collect();
        let mut ids = HashSet::new();
        for doc in &self.documents {
            if !ids.insert(doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateDocId(doc.doc_id.clone()));
            }
            let found: BTreeSet<&str> = doc.metadata.keys().map(String::as_str).collect();
            if found != expected {
                return Err(CorpusError::MetadataMismatch {
                    doc_id: doc.doc_id.clone(),
                    expected: expected.iter().map(|s| s.to_string()).collect(),
                    found: found.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> &MetadataSchema {
        &self.schema
    }

    pub fn documents(&self) -> &[DocumentRecord] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&DocumentRecord> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    /// A new corpus holding the named documents, in the order given.
    pub fn subset<S: AsRef<str>>(&self, doc_ids: &[S]) -> Result<Corpus, CorpusError> {
        let docs = doc_ids
            .iter()
            .map(|id| {
                self.get(id.as_ref())
                    .cloned()
                    .ok_or_else(|| CorpusError::UnknownDocument(id.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Corpus::new(self.schema.clone(), docs)
    }

    /// Appends documents, re-checking every invariant.
    pub fn extended(&self, extra: Vec<DocumentRecord>) -> Result<Corpus, CorpusError> {
        let mut docs = self.documents.clone();
        docs.extend(extra);
        Corpus::new(self.schema.clone(), docs)
    }

    pub fn filter_by_restriction(
        &self,
        restriction: &Restriction,
    ) -> Result<Vec<&DocumentRecord>, CorpusError> {
        if let Some(unknown) = restriction.keys().find(|k| !self.schema.contains(k)) {
            return Err(CorpusError::UnknownField(unknown.clone()));
        }
        Ok(self
            .documents
            .iter()
            .filter(|d| satisfies(&d.metadata, restriction))
            .collect())
    }

    /// Human-readable listing of every document's metadata, one per line.
    pub fn metadata_listing(&self) -> String {
        self.documents
            .iter()
            .map(|d| {
                let fields = self
                    .schema
                    .field_names()
                    .map(|f| format!("{}={}", f, d.metadata.get(f).map(String::as_str).unwrap_or("")))
                    .collect::<Vec<_>>()
                    .join(", ");
                format!("- {}: {}", d.doc_id, fields)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

// ---------------------------------------------------------------------------
// Chunking

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub chunk_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            chunk_chars: 4000,
            overlap_chars: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    /// Character (not byte) offsets into the document text.
    pub char_span: (usize, usize),
}

pub fn chunk_document(
    doc: &DocumentRecord,
    chunk_chars: usize,
    overlap_chars: usize,
) -> Result<Vec<Chunk>, CorpusError> {
    if chunk_chars == 0 || overlap_chars >= chunk_chars {
        return Err(CorpusError::InvalidChunking {
            chunk: chunk_chars,
            overlap: overlap_chars,
        });
    }
    let chars: Vec<char> = doc.text.chars().collect();
    if chars.is_empty() {
        return Err(CorpusError::EmptyText(doc.doc_id.clone()));
    }
    let step = chunk_chars - overlap_chars;
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + chunk_chars).min(chars.len());
        chunks.push(Chunk {
            doc_id: doc.doc_id.clone(),
            index: chunks.len(),
            text: chars[start..end].iter().collect(),
            char_span: (start, end),
        });
        if end == chars.len() {
            break;
        }
        start += step;
    }
    Ok(chunks)
}

// ---------------------------------------------------------------------------
// Manifest files

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub text_path: String,
    pub metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact_sidecar_path: Option<String>,
}

/// On-disk shape of a corpus manifest. Paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: MetadataSchema,
    pub documents: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CorpusError> {
    let raw = read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| CorpusError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a manifest and every document it references (eagerly).
pub fn load_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    let manifest = read_manifest(path)?;
    let schema = MetadataSchema::new(manifest.schema.fields)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut docs = Vec::with_capacity(manifest.documents.len());
    let mut ids = HashSet::new();
    for entry in manifest.documents {
        if !ids.insert(entry.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId(entry.doc_id));
        }
        let text = read_to_string(&base.join(&entry.text_path))?;
        let mut doc = DocumentRecord::new(entry.doc_id, text, entry.metadata);
        if let Some(sidecar_path) = entry.fact_sidecar_path {
            let p = base.join(sidecar_path);
            let raw = read_to_string(&p)?;
            let sidecar: FactSidecar = serde_json::from_str(&raw).map_err(|e| CorpusError::Parse {
                path: p.clone(),
                message: e.to_string(),
            })?;
            doc.fact_sidecar = Some(sidecar);
        }
        docs.push(doc);
    }
    Corpus::new(schema, docs)
}

/// Writes `manifest.json`, `docs/<id>.txt` and `sidecars/<id>.json` under
/// `dir`, returning the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf, CorpusError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    fs::create_dir_all(dir.join("docs")).map_err(io(dir))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for doc in corpus.documents() {
        let text_rel = format!("docs/{}.txt", doc.doc_id);
        let text_path = dir.join(&text_rel);
        fs::write(&text_path, &doc.text).map_err(io(&text_path))?;
        let sidecar_rel = match &doc.fact_sidecar {
            Some(sidecar) => {
                fs::create_dir_all(dir.join("sidecars")).map_err(io(dir))?;
                let rel = format!("sidecars/{}.json", doc.doc_id);
                let p = dir.join(&rel);
                let body = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
                fs::write(&p, body).map_err(io(&p))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            doc_id: doc.doc_id.clone(),
            text_path: text_rel,
            metadata: doc.metadata.clone(),
            fact_sidecar_path: sidecar_rel,
        });
    }
    let manifest = Manifest {
        schema: corpus.schema().clone(),
        documents: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_json_string()).map_err(io(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(t: &str, y: &str, d: &str) -> Metadata {
        [
            ("ticker_symbol", t),
            ("fiscal_year", y),
            ("document_type", d),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    fn doc(id: &str, t: &str, y: &str, d: &str) -> DocumentRecord {
        DocumentRecord::new(id, format!("text of {id}"), meta(t, y, d))
    }

    fn restriction(pairs: &[(&str, &[&str])]) -> Restriction {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn filter_by_year_list() {
        let corpus = Corpus::new(
            MetadataSchema::financial_filings(),
            vec![
                doc("A", "AAA", "2021", "annual_report"),
                doc("B", "BBB", "2022", "annual_report"),
                doc("C", "CCC", "2023", "annual_report"),
            ],
        )
        .unwrap();
        let r = restriction(&[("fiscal_year", &["2021", "2022"])]);
        let ids: Vec<_> = corpus
            .filter_by_restriction(&r)
            .unwrap()
            .iter()
            .map(|d| d.doc_id.as_str())
            .collect();
        assert_eq!(ids, ["A", "B"]);
        assert_eq!(corpus.filter_by_restriction(&Restriction::new()).unwrap().len(), 3);
    }

    #[test]
    fn filter_two_fields_matches_scan() {
        let docs = vec![
            doc("d1", "AAA", "2021", "esg_report"),
            doc("d2", "AAA", "2021", "annual_report"),
            doc("d3", "BBB", "2021", "esg_report"),
            doc("d4", "BBB", "2022", "esg_report"),
            doc("d5", "CCC", "2022", "annual_report"),
            doc("d6", "CCC", "2021", "esg_report"),
        ];
        let corpus = Corpus::new(MetadataSchema::financial_filings(), docs.clone()).unwrap();
        let r = restriction(&[("fiscal_year", &["2021"]), ("document_type", &["esg_report"])]);
        let got: Vec<_> = corpus
            .filter_by_restriction(&r)
            .unwrap()
            .into_iter()
            .map(|d| d.doc_id.clone())
            .collect();
        let expected: Vec<_> = docs
            .iter()
            .filter(|d| d.metadata["fiscal_year"] == "2021" && d.metadata["document_type"] == "esg_report")
            .map(|d| d.doc_id.clone())
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got, ["d1", "d3", "d6"]);
    }

    #[test]
    fn unknown_restriction_field() {
        let corpus =
            Corpus::new(MetadataSchema::financial_filings(), vec![doc("A", "AAA", "2021", "x")]).unwrap();
        let r = restriction(&[("publication_year", &["2021"])]);
        assert!(matches!(
            corpus.filter_by_restriction(&r),
            Err(CorpusError::UnknownField(f)) if f == "publication_year"
        ));
    }

    #[test]
    fn duplicate_and_mismatch_rejected() {
        let dup = Corpus::new(
            MetadataSchema::financial_filings(),
            vec![doc("d1", "A", "2021", "x"), doc("d1", "B", "2021", "x")],
        );
        assert!(matches!(dup, Err(CorpusError::DuplicateDocId(id)) if id == "d1"));

        let mut m = meta("A", "2021", "x");
        m.remove("fiscal_year");
        let bad = Corpus::new(
            MetadataSchema::financial_filings(),
            vec![DocumentRecord::new("d1", "t", m)],
        );
        let err = bad.unwrap_err();
        assert!(err.to_string().contains("metadata key mismatch"));
    }

    #[test]
    fn metadata_values_are_trimmed() {
        let d = DocumentRecord::new("x", "t", meta(" AAA ", "2021\n", "esg_report"));
        assert_eq!(d.metadata["ticker_symbol"], "AAA");
        assert_eq!(d.metadata["fiscal_year"], "2021");
    }

    #[test]
    fn sliding_window_spans() {
        let d = DocumentRecord::new("d", "abcdefghij", meta("A", "2021", "x"));
        let spans: Vec<_> = chunk_document(&d, 4, 1).unwrap().iter().map(|c| c.char_span).collect();
        assert_eq!(spans, [(0, 4), (3, 7), (6, 10)]);

        let short = chunk_document(&d, 50, 5).unwrap();
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].text, "abcdefghij");

        assert!(matches!(
            chunk_document(&d, 4, 4),
            Err(CorpusError::InvalidChunking { .. })
        ));
        let empty = DocumentRecord::new("e", "", meta("A", "2021", "x"));
        assert!(matches!(chunk_document(&empty, 4, 1), Err(CorpusError::EmptyText(_))));
    }

    #[test]
    fn chunk_spans_count_chars_not_bytes() {
        let d = DocumentRecord::new("d", "营业总成本为四十二", meta("A", "2021", "x"));
        let chunks = chunk_document(&d, 4, 1).unwrap();
        assert_eq!(chunks[0].text, "营业总成");
        assert_eq!(chunks.last().unwrap().char_span.1, 9);
    }

    #[test]
    fn schema_description_lines() {
        let s = MetadataSchema::financial_filings();
        let desc = s.description();
        let lines: Vec<_> = desc.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("ticker_symbol: "));
        assert!(lines[1].starts_with("fiscal_year: "));
        assert!(lines[2].ends_with("(categorical)"));
        assert_eq!(desc, schema_description(&s));
        assert_eq!(MetadataSchema::new(vec![]).unwrap().description(), "");
    }

    #[test]
    fn schema_rejects_duplicate_names() {
        let f = MetadataField {
            name: "a".into(),
            description: String::new(),
            kind: ValueKind::Categorical,
        };
        assert!(MetadataSchema::new(vec![f.clone(), f]).is_err());
    }
}
