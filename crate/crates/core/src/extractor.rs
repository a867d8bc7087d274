//! Per-document retrieval-augmented extraction and the flat retrieval
//! baseline.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{chunk_document, Chunk, ChunkingConfig, Corpus, CorpusError, DocumentRecord, Metadata};
use crate::gateway::{AgentRole, ChatRequest, Gateway, GatewayError};
use crate::planner::{fill_template, satisfy_restriction, InstantiatedQuery, Plan, PlanError};
use crate::prompts;
use crate::text::{content_words, default_stopwords};

/// Answer recorded when a document does not contain what the sub-query asks.
pub const NOT_FOUND: &str = "NO_ANSWER_FOUND";

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("document {doc_id}, template {template_index}: {source}")]
    Gateway {
        doc_id: String,
        template_index: usize,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("query targets document {query_doc} but was given {doc}")]
    WrongDocument { query_doc: String, doc: String },
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("flat retrieval: {0}")]
    Baseline(#[source] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    LexicalOverlap,
    Injected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Chunk budget per reader call.
    pub top_k: usize,
    #[serde(default)]
    pub scorer: ScorerKind,
    #[serde(default)]
    pub chunking: ChunkingConfig,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            scorer: ScorerKind::LexicalOverlap,
            chunking: ChunkingConfig::default(),
        }
    }
}

pub trait ChunkScorer: Send + Sync {
    fn score(&self, query: &str, chunk_text: &str) -> f64;
}

/// Number of distinct case-folded content words shared by query and chunk.
#[derive(Debug, Clone)]
pub struct LexicalOverlap {
    stopwords: BTreeSet<String>,
}

impl Default for LexicalOverlap {
    fn default() -> Self {
        Self {
            stopwords: default_stopwords(),
        }
    }
}

impl LexicalOverlap {
    pub fn with_stopwords(stopwords: impl IntoIterator<Item = String>) -> Self {
        Self {
            stopwords: stopwords.into_iter().collect(),
        }
    }
}

impl ChunkScorer for LexicalOverlap {
    fn score(&self, query: &str, chunk_text: &str) -> f64 {
        let q = content_words(query, &self.stopwords);
        let c = content_words(chunk_text, &self.stopwords);
        q.intersection(&c).count() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRef {
    pub doc_id: String,
    pub chunk_index: usize,
    pub score: f64,
}

impl From<&ScoredChunk> for ChunkRef {
    fn from(s: &ScoredChunk) -> Self {
        Self {
            doc_id: s.chunk.doc_id.clone(),
            chunk_index: s.chunk.index,
            score: s.score,
        }
    }
}

#[derive(Clone)]
pub struct Retriever {
    config: RetrievalConfig,
    scorer: Arc<dyn ChunkScorer>,
}

impl std::fmt::Debug for Retriever {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Retriever").field("config", &self.config).finish()
    }
}

impl Retriever {
    pub fn new(config: RetrievalConfig) -> Result<Self, ExtractError> {
        if config.scorer == ScorerKind::Injected {
            return Err(ExtractError::Config(
                "scorer `injected` needs Retriever::with_scorer".into(),
            ));
        }
        Self::with_scorer(config, Arc::new(LexicalOverlap::default()))
    }

    pub fn with_scorer(config: RetrievalConfig, scorer: Arc<dyn ChunkScorer>) -> Result<Self, ExtractError> {
        if config.top_k == 0 {
            return Err(ExtractError::Config("top_k must be at least 1".into()));
        }
        Ok(Self { config, scorer })
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    fn scored(&self, doc: &DocumentRecord, query: &str) -> Result<Vec<ScoredChunk>, CorpusError> {
        let chunks = chunk_document(doc, self.config.chunking.chunk_chars, self.config.chunking.overlap_chars)?;
        Ok(chunks
            .into_iter()
            .map(|chunk| ScoredChunk {
                score: self.scorer.score(query, &chunk.text),
                chunk,
            })
            .collect())
    }

    /// Top `top_k` chunks of one document, score descending, ties by lower
    /// chunk index.
    pub fn retrieve(&self, doc: &DocumentRecord, query: &str) -> Result<Vec<ScoredChunk>, CorpusError> {
        self.retrieve_k(doc, query, self.config.top_k)
    }

    fn retrieve_k(&self, doc: &DocumentRecord, query: &str, k: usize) -> Result<Vec<ScoredChunk>, CorpusError> {
        let mut scored = self.scored(doc, query)?;
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.chunk.index.cmp(&b.chunk.index)));
        scored.truncate(k);
        Ok(scored)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionPair {
    pub metadata: Metadata,
    pub query: InstantiatedQuery,
    pub answer: String,
    pub retrieved: Vec<ChunkRef>,
}

pub fn answer_subquery(
    doc: &DocumentRecord,
    query: &InstantiatedQuery,
    retriever: &Retriever,
    gateway: &Gateway,
) -> Result<ExtractionPair, ExtractError> {
    if query.doc_id != doc.doc_id {
        return Err(ExtractError::WrongDocument {
            query_doc: query.doc_id.clone(),
            doc: doc.doc_id.clone(),
        });
    }
    let hits = retriever.retrieve(doc, &query.query_text)?;
    let excerpts: Vec<String> = hits.iter().map(|h| h.chunk.text.clone()).collect();
    let (system, user) = prompts::reader(&doc.doc_id, &query.query_text, &excerpts);
    let request = ChatRequest::new(AgentRole::Reader, system, user).with_focus(&doc.doc_id, &query.query_text);
    let reply = gateway.complete(&request).map_err(|source| ExtractError::Gateway {
        doc_id: doc.doc_id.clone(),
        template_index: query.template_index,
        source,
    })?;
    let answer = match reply.text.trim() {
        "" => NOT_FOUND.to_string(),
        t => t.to_string(),
    };
    Ok(ExtractionPair {
        metadata: doc.metadata.clone(),
        query: query.clone(),
        answer,
        retrieved: hits.iter().map(ChunkRef::from).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedPair {
    pub doc_id: String,
    pub template_index: usize,
    pub query_text: String,
    pub error: String,
}

/// One line of the persisted extraction transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub doc_id: String,
    pub template_index: usize,
    pub query_text: String,
    pub answer: Option<String>,
    pub retrieved: Vec<(usize, f64)>,
    pub status: String,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    pub pairs: Vec<ExtractionPair>,
    pub failures: Vec<FailedPair>,
    pub warnings: Vec<String>,
}

impl ExtractionOutcome {
    /// Successful and failed pairs, merged in (document, template) order.
    pub fn transcript(&self, corpus: &Corpus) -> Vec<TranscriptRecord> {
        let position = |id: &str| corpus.documents().iter().position(|d| d.doc_id == id).unwrap_or(usize::MAX);
        let mut records: Vec<TranscriptRecord> = self
            .pairs
            .iter()
            .map(|p| TranscriptRecord {
                doc_id: p.query.doc_id.clone(),
                template_index: p.query.template_index,
                query_text: p.query.query_text.clone(),
                answer: Some(p.answer.clone()),
                retrieved: p.retrieved.iter().map(|r| (r.chunk_index, r.score)).collect(),
                status: "ok".into(),
                metadata: p.metadata.clone(),
            })
            .chain(self.failures.iter().map(|f| TranscriptRecord {
                doc_id: f.doc_id.clone(),
                template_index: f.template_index,
                query_text: f.query_text.clone(),
                answer: None,
                retrieved: Vec::new(),
                status: format!("failed: {}", f.error),
                metadata: corpus.get(&f.doc_id).map(|d| d.metadata.clone()).unwrap_or_default(),
            }))
            .collect();
        records.sort_by_key(|r| (position(&r.doc_id), r.template_index));
        records
    }

    /// Rebuilds an outcome from a persisted transcript.
    pub fn from_transcript(records: &[TranscriptRecord]) -> Self {
        let mut out = Self::default();
        for r in records {
            let query = InstantiatedQuery {
                doc_id: r.doc_id.clone(),
                template_index: r.template_index,
                query_text: r.query_text.clone(),
            };
            match (&r.answer, r.status.as_str()) {
                (Some(answer), "ok") => out.pairs.push(ExtractionPair {
                    metadata: r.metadata.clone(),
                    query,
                    answer: answer.clone(),
                    retrieved: r
                        .retrieved
                        .iter()
                        .map(|(i, s)| ChunkRef {
                            doc_id: r.doc_id.clone(),
                            chunk_index: *i,
                            score: *s,
                        })
                        .collect(),
                }),
                _ => out.failures.push(FailedPair {
                    doc_id: r.doc_id.clone(),
                    template_index: r.template_index,
                    query_text: r.query_text.clone(),
                    error: r.status.trim_start_matches("failed: ").to_string(),
                }),
            }
        }
        out
    }
}

/// Every (document, template) pair whose restriction the document
/// satisfies, in document-then-template order.
pub fn instantiate_all(corpus: &Corpus, plan: &Plan) -> Result<Vec<InstantiatedQuery>, PlanError> {
    let mut out = Vec::new();
    for doc in corpus.documents() {
        for (j, t) in plan.templates.iter().enumerate() {
            if satisfy_restriction(&doc.metadata, t) {
                out.push(fill_template(t, j, &doc.doc_id, &doc.metadata)?);
            }
        }
    }
    Ok(out)
}

/// Runs every instantiated sub-query with up to `parallelism` concurrent
/// reader calls. Output order does not depend on completion order.
pub fn extract_all(
    corpus: &Corpus,
    plan: &Plan,
    retriever: &Retriever,
    gateway: &Gateway,
    parallelism: usize,
) -> Result<ExtractionOutcome, ExtractError> {
    let jobs = instantiate_all(corpus, plan)?;
    let mut outcome = ExtractionOutcome::default();
    if jobs.is_empty() {
        let w = "no document satisfies any template restriction".to_string();
        log::warn!("{w}");
        outcome.warnings.push(w);
        return Ok(outcome);
    }
    let results: Mutex<Vec<Option<Result<ExtractionPair, ExtractError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..parallelism.max(1).min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let doc = corpus.get(&job.doc_id).expect("job built from corpus");
                let r = answer_subquery(doc, job, retriever, gateway);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    for (job, r) in jobs.iter().zip(results.into_inner().unwrap()) {
        match r.expect("every job ran") {
            Ok(pair) => outcome.pairs.push(pair),
            Err(e) => {
                log::warn!("extraction failed: {e}");
                outcome.failures.push(FailedPair {
                    doc_id: job.doc_id.clone(),
                    template_index: job.template_index,
                    query_text: job.query_text.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedChunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineAnswer {
    pub question: String,
    pub answer: String,
    pub retrieved: Vec<RetrievedChunk>,
    pub metadata_in_prompt: bool,
}

/// Scores every chunk of every document and answers from the global top
/// `budget` in one reader call. Ties go to the earlier document, then the
/// lower chunk index.
pub fn flat_rag(
    question: &str,
    corpus: &Corpus,
    budget: usize,
    metadata_in_prompt: bool,
    retriever: &Retriever,
    gateway: &Gateway,
) -> Result<BaselineAnswer, ExtractError> {
    if budget == 0 {
        return Err(ExtractError::Config("budget must be at least 1".into()));
    }
    let mut pool: Vec<(usize, ScoredChunk)> = Vec::new();
    for (pos, doc) in corpus.documents().iter().enumerate() {
        pool.extend(retriever.scored(doc, question)?.into_iter().map(|c| (pos, c)));
    }
    pool.sort_by(|(pa, a), (pb, b)| {
        b.score
            .total_cmp(&a.score)
            .then(pa.cmp(pb))
            .then(a.chunk.index.cmp(&b.chunk.index))
    });
    pool.truncate(budget);
    let excerpts: Vec<String> = pool.iter().map(|(_, c)| c.chunk.text.clone()).collect();
    let listing = metadata_in_prompt.then(|| corpus.metadata_listing());
    let (system, user) = prompts::flat_rag(question, &excerpts, listing.as_deref());
    let reply = gateway
        .complete(&ChatRequest::new(AgentRole::Reader, system, user))
        .map_err(ExtractError::Baseline)?;
    Ok(BaselineAnswer {
        question: question.to_string(),
        answer: reply.text,
        retrieved: pool
            .into_iter()
            .map(|(_, c)| RetrievedChunk {
                doc_id: c.chunk.doc_id,
                chunk_index: c.chunk.index,
                score: c.score,
                text: c.chunk.text,
            })
            .collect(),
        metadata_in_prompt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MetadataSchema;
    use crate::gateway::{FnProvider, ProviderError, ScriptEntry, ScriptedProvider};
    use crate::planner::SubQueryTemplate;

    fn meta(t: &str, y: &str) -> Metadata {
        [("ticker_symbol", t), ("fiscal_year", y), ("document_type", "annual_report")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn cfg(top_k: usize, chunk: usize) -> RetrievalConfig {
        RetrievalConfig {
            top_k,
            scorer: ScorerKind::LexicalOverlap,
            chunking: ChunkingConfig {
                chunk_chars: chunk,
                overlap_chars: 0,
            },
        }
    }

    // Four 20-char chunks; query words: alpha beta gamma.
    fn four_chunk_doc() -> DocumentRecord {
        let text = ["alpha xxxxxxxxxxxxxx", "zzzzzzzzzzzzzzzzzzzz", "alpha beta gamma yyy", "qqqqqqqqqqqqqqqqqqqq"].concat();
        DocumentRecord::new("d", text, meta("A", "2021"))
    }

    #[test]
    fn picks_highest_overlap() {
        let r = Retriever::new(cfg(1, 20)).unwrap();
        let hits = r.retrieve(&four_chunk_doc(), "alpha beta gamma").unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].chunk.index, 2);
        assert_eq!(hits[0].score, 3.0);
    }

    #[test]
    fn saturation_and_order() {
        let r = Retriever::new(cfg(10, 20)).unwrap();
        let hits = r.retrieve(&four_chunk_doc(), "alpha beta gamma").unwrap();
        let order: Vec<_> = hits.iter().map(|h| h.chunk.index).collect();
        assert_eq!(order, [2, 0, 1, 3]);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let doc = DocumentRecord::new("d", "cost aaaa cost bbbb", meta("A", "2021"));
        let r = Retriever::new(cfg(1, 10)).unwrap();
        assert_eq!(r.retrieve(&doc, "cost").unwrap()[0].chunk.index, 0);
    }

    #[test]
    fn scripted_reader_answer() {
        let doc = four_chunk_doc();
        let gw = Gateway::local(ScriptedProvider::new(vec![ScriptEntry::new("", "42.0")]));
        let q = InstantiatedQuery {
            doc_id: "d".into(),
            template_index: 0,
            query_text: "alpha?".into(),
        };
        let pair = answer_subquery(&doc, &q, &Retriever::new(cfg(2, 20)).unwrap(), &gw).unwrap();
        assert_eq!(pair.answer, "42.0");
        assert!(pair.retrieved.len() <= 2);
    }

    fn corpus3() -> Corpus {
        Corpus::new(
            MetadataSchema::financial_filings(),
            vec![
                DocumentRecord::new("a", "alpha text", meta("AAA", "2021")),
                DocumentRecord::new("b", "beta text", meta("BBB", "2022")),
                DocumentRecord::new("c", "gamma text", meta("CCC", "2023")),
            ],
        )
        .unwrap()
    }

    fn years(ys: &[&str]) -> crate::corpus::Restriction {
        [("fiscal_year".to_string(), ys.iter().map(|s| s.to_string()).collect())].into()
    }

    #[test]
    fn extract_all_order_and_count() {
        let plan = Plan {
            question: "q".into(),
            templates: vec![
                SubQueryTemplate::new("rev {ticker_symbol}").restricted(years(&["2021", "2022", "2023"])),
                SubQueryTemplate::new("cost {ticker_symbol}").restricted(years(&["2022"])),
            ],
            warnings: vec![],
        };
        let corpus = corpus3();
        // brute force: (doc, template) pairs that satisfy
        let expected: Vec<(String, usize)> = corpus
            .documents()
            .iter()
            .flat_map(|d| {
                plan.templates
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.restriction.as_ref().unwrap()["fiscal_year"].contains(&d.metadata["fiscal_year"]))
                    .map(|(j, _)| (d.doc_id.clone(), j))
                    .collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(expected.len(), 4);
        let gw = Gateway::local(FnProvider::new("slow", |req: &ChatRequest| {
            let q = &req.focus.as_ref().unwrap().query;
            std::thread::sleep(std::time::Duration::from_millis(if q.contains("AAA") { 20 } else { 1 }));
            Ok(q.clone())
        }));
        let out = extract_all(&corpus, &plan, &Retriever::new(cfg(1, 100)).unwrap(), &gw, 4).unwrap();
        let got: Vec<_> = out.pairs.iter().map(|p| (p.query.doc_id.clone(), p.query.template_index)).collect();
        assert_eq!(got, expected);
        for p in &out.pairs {
            assert!(satisfy_restriction(&p.metadata, &plan.templates[p.query.template_index]));
        }
    }

    #[test]
    fn empty_match_warns() {
        let plan = Plan {
            question: "q".into(),
            templates: vec![SubQueryTemplate::new("x").restricted(years(&["1999"]))],
            warnings: vec![],
        };
        let gw = Gateway::local(ScriptedProvider::new(vec![]));
        let out = extract_all(&corpus3(), &plan, &Retriever::new(cfg(1, 100)).unwrap(), &gw, 2).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn partial_failure_is_recorded() {
        let plan = Plan {
            question: "q".into(),
            templates: vec![SubQueryTemplate::new("x {ticker_symbol}")],
            warnings: vec![],
        };
        let corpus = corpus3().extended(vec![DocumentRecord::new("d", "delta", meta("DDD", "2021"))]).unwrap();
        let gw = Gateway::local(FnProvider::new("f", |req: &ChatRequest| {
            if req.focus.as_ref().unwrap().doc_id == "b" {
                Err(ProviderError::fatal("boom"))
            } else {
                Ok("fine".into())
            }
        }));
        let out = extract_all(&corpus, &plan, &Retriever::new(cfg(1, 100)).unwrap(), &gw, 3).unwrap();
        assert_eq!(out.pairs.len(), 3);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].doc_id, "b");
        let transcript = out.transcript(&corpus);
        assert_eq!(transcript[1].doc_id, "b");
        assert!(transcript[1].status.starts_with("failed"));
        assert_eq!(ExtractionOutcome::from_transcript(&transcript), out_without_warnings(out));
    }

    fn out_without_warnings(mut o: ExtractionOutcome) -> ExtractionOutcome {
        o.warnings.clear();
        o
    }

    #[test]
    fn flat_budget_and_metadata_prompt() {
        let docs: Vec<_> = (0..4)
            .map(|i| DocumentRecord::new(format!("d{i}"), "word ".repeat(60), meta(&format!("T{i}"), "2021")))
            .collect();
        let corpus = Corpus::new(MetadataSchema::financial_filings(), docs).unwrap();
        let seen = Arc::new(Mutex::new(String::new()));
        let s2 = seen.clone();
        let gw = Gateway::local(FnProvider::new("cap", move |req: &ChatRequest| {
            *s2.lock().unwrap() = req.user_prompt.clone();
            Ok("answer".into())
        }));
        let r = Retriever::new(cfg(1, 50)).unwrap();
        let b = flat_rag("word?", &corpus, 2 * corpus.len(), true, &r, &gw).unwrap();
        assert_eq!(b.retrieved.len(), 8);
        assert!(seen.lock().unwrap().starts_with("The list of document metadata you can query is as follows:"));
        // all tie: document order then chunk index
        assert_eq!((b.retrieved[0].doc_id.as_str(), b.retrieved[0].chunk_index), ("d0", 0));
        assert_eq!(b.retrieved[1].doc_id, "d0");

        let all = flat_rag("word?", &corpus, 10_000, false, &r, &gw).unwrap();
        assert_eq!(all.retrieved.len(), 4 * 6);
        assert!(!seen.lock().unwrap().contains("document metadata"));
    }
}
