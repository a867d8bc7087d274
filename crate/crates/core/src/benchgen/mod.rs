//! Synthetic benchmark construction from a master table of indicators:
//! documents with embedded fact sentences, instantiated questions, gold
//! facts, oracle answers, aligned rows and out-of-scope noise documents.

pub mod catalog;
pub mod oracles;
pub mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    write_corpus, Corpus, CorpusError, DocumentRecord, Fact, FactSidecar, Metadata, MetadataSchema,
};
use crate::evaluator::numeric::text_contains_number;
use crate::evaluator::{AlignedRow, BenchmarkInstance};
use crate::extractor::{answer_subquery, ExtractError, Retriever};
use crate::gateway::Gateway;
use crate::planner::InstantiatedQuery;

use catalog::{MetricDef, MetricKind};
use templates::QuestionTemplate;

pub const TICKER: &str = "ticker_symbol";
pub const YEAR: &str = "fiscal_year";
pub const DOC_TYPE: &str = "document_type";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("master table is empty")]
    EmptyTable,
    #[error("two rows share metadata {0}")]
    MetadataCollision(String),
    #[error("row {row} has no value for {metric}")]
    MissingMetric { row: String, metric: String },
    #[error("no row for {0}")]
    MissingRow(String),
    #[error("row {row}: {metric} value {value:?} is malformed")]
    BadValue { row: String, metric: String, value: String },
    #[error("template {0}: tie among the top entries and no tie rule")]
    Tie(String),
    #[error("unknown metric {0}")]
    UnknownMetric(String),
    #[error("template {template}: bad or missing parameter `{key}`")]
    BadParam { template: String, key: String },
    #[error("only {available} out-of-scope documents can be built, {needed} needed")]
    NotEnoughNoise { needed: usize, available: usize },
    #[error("negative noise ratio {0}")]
    NegativeRatio(f64),
    #[error("master table csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterRow {
    pub metadata: Metadata,
    pub metrics: BTreeMap<String, String>,
}

impl MasterRow {
    fn field(&self, name: &str) -> &str {
        self.metadata.get(name).map(String::as_str).unwrap_or("")
    }

    pub fn ticker(&self) -> &str {
        self.field(TICKER)
    }

    pub fn year(&self) -> &str {
        self.field(YEAR)
    }

    pub fn doc_type(&self) -> &str {
        self.field(DOC_TYPE)
    }

    pub fn doc_id(&self) -> String {
        doc_id(self.ticker(), self.year(), self.doc_type())
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.ticker(), self.year(), self.doc_type())
    }
}

pub fn doc_id(ticker: &str, year: &str, doc_type: &str) -> String {
    format!("{ticker}-{year}-{doc_type}")
}

fn metadata(ticker: &str, year: &str, doc_type: &str) -> Metadata {
    [(TICKER, ticker), (YEAR, year), (DOC_TYPE, doc_type)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// One row per document, unique on (ticker, year, document type).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterTable {
    rows: Vec<MasterRow>,
}

impl MasterTable {
    pub fn new(rows: Vec<MasterRow>) -> Result<Self, BenchError> {
        if rows.is_empty() {
            return Err(BenchError::EmptyTable);
        }
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !seen.insert(r.label()) {
                return Err(BenchError::MetadataCollision(r.label()));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[MasterRow] {
        &self.rows
    }

    pub fn find(&self, ticker: &str, year: &str, doc_type: &str) -> Option<&MasterRow> {
        self.rows
            .iter()
            .find(|r| r.ticker() == ticker && r.year() == year && r.doc_type() == doc_type)
    }

    pub fn tickers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(MasterRow::ticker).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn years(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(MasterRow::year).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Header of metadata fields then every catalog metric; an empty cell
    /// means the row has no such metric.
    pub fn to_csv(&self) -> Result<String, BenchError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![TICKER, YEAR, DOC_TYPE];
        header.extend(catalog::METRICS.iter().map(|m| m.name));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.ticker(), r.year(), r.doc_type()];
            rec.extend(
                catalog::METRICS
                    .iter()
                    .map(|m| r.metrics.get(m.name).map(String::as_str).unwrap_or("")),
            );
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| BenchError::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(raw: &str) -> Result<Self, BenchError> {
        let mut r = csv::Reader::from_reader(raw.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let mut row = MasterRow {
                metadata: Metadata::new(),
                metrics: BTreeMap::new(),
            };
            for (name, cell) in header.iter().zip(rec.iter()) {
                let cell = cell.trim();
                if [TICKER, YEAR, DOC_TYPE].contains(&name.as_str()) {
                    row.metadata.insert(name.clone(), cell.to_string());
                } else if !cell.is_empty() {
                    row.metrics.insert(name.clone(), cell.to_string());
                }
            }
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        Self::from_csv(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        fs::write(path, self.to_csv()?).map_err(io_err(path))
    }
}

// ---------------------------------------------------------------------------
// Master table generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub companies: usize,
    pub first_year: i32,
    pub last_year: i32,
    /// Instances built per template.
    pub per_template: usize,
    pub filler_paragraphs: usize,
    /// Inclusive bounds on the companies drawn into one instance.
    pub min_companies: usize,
    pub max_companies: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            companies: 18,
            first_year: 2020,
            last_year: 2023,
            per_template: 4,
            filler_paragraphs: 2,
            min_companies: 5,
            max_companies: 9,
        }
    }
}

const FIRMS: &[&str] = &[
    "Northbridge Accounting",
    "Crestview Audit Partners",
    "Lakeshore Assurance",
    "Summit Ledger Group",
    "Harborline Auditors",
];

fn random_ticker(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=4);
    (0..len).map(|_| rng.gen_range(b'A'..=b'Z') as char).collect()
}

/// Keeps rendered values distinct per (metric, year) by nudging collisions.
struct Distinct(BTreeSet<(String, String, String)>);

impl Distinct {
    fn number(&mut self, metric: &str, year: &str, mut v: f64) -> String {
        loop {
            let s = catalog::format_number(v);
            if s == "-0.00" {
                v = 0.01;
                continue;
            }
            if self.0.insert((metric.into(), year.into(), s.clone())) {
                return s;
            }
            v += 0.01;
        }
    }

    fn date(&mut self, metric: &str, year: &str, mut d: NaiveDate) -> NaiveDate {
        loop {
            let s = d.format("%Y-%m-%d").to_string();
            if self.0.insert((metric.into(), year.into(), s)) {
                return d;
            }
            d += Duration::days(1);
        }
    }
}

/// Seeded table covering every company, year and document type.
pub fn generate_master_table(cfg: &GenConfig) -> Result<MasterTable, BenchError> {
    if cfg.companies == 0 || cfg.first_year > cfg.last_year {
        return Err(BenchError::EmptyTable);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reserved: BTreeSet<String> = catalog::reserved_words().into_iter().collect();
    let mut tickers = BTreeSet::new();
    while tickers.len() < cfg.companies {
        let t = random_ticker(&mut rng);
        if !reserved.contains(&t.to_lowercase()) {
            tickers.insert(t);
        }
    }
    let years: Vec<i32> = (cfg.first_year..=cfg.last_year).collect();
    let mut distinct = Distinct(BTreeSet::new());
    let mut rows = Vec::new();
    for ticker in &tickers {
        let shock_year = if rng.gen_bool(1.0 / 6.0) && years.len() > 1 {
            Some(rng.gen_range(1..years.len()))
        } else {
            None
        };
        let mut revenue = rng.gen_range(800.0..40000.0);
        let mut carbon = rng.gen_range(20.0..5000.0);
        let mut employees: f64 = rng.gen_range(300.0..80000.0_f64).round();
        let mut firm = *FIRMS.choose(&mut rng).expect("firms");
        for (i, &year) in years.iter().enumerate() {
            if i > 0 {
                revenue *= rng.gen_range(0.85..1.3);
                carbon *= rng.gen_range(0.8..1.2);
                employees = (employees * rng.gen_range(0.9..1.15)).round();
                if rng.gen_bool(0.3) {
                    let others: Vec<&str> = FIRMS.iter().copied().filter(|f| *f != firm).collect();
                    firm = others.choose(&mut rng).expect("firms");
                }
            }
            let shock = if shock_year == Some(i) { rng.gen_range(2.2..2.5) } else { 1.0 };
            let y = year.to_string();
            let rev = revenue * shock;
            let mut annual = BTreeMap::new();
            let mut put = |m: &str, v: String| {
                annual.insert(m.to_string(), v);
            };
            put("revenue", distinct.number("revenue", &y, rev));
            put(
                "total_operating_cost",
                distinct.number("total_operating_cost", &y, rev * rng.gen_range(0.55..0.95)),
            );
            put("net_income", distinct.number("net_income", &y, rev * rng.gen_range(-0.08..0.22)));
            put("total_assets", distinct.number("total_assets", &y, rev * rng.gen_range(1.5..4.0)));
            put(
                "capital_adequacy_ratio",
                distinct.number("capital_adequacy_ratio", &y, rng.gen_range(8.0..22.0)),
            );
            put("accounting_firm", firm.to_string());
            rows.push(MasterRow {
                metadata: metadata(ticker, &y, catalog::ANNUAL_REPORT),
                metrics: annual,
            });

            let reg = NaiveDate::from_ymd_opt(year + 1, rng.gen_range(4..=7), rng.gen_range(1..=28)).expect("valid date");
            let reg = distinct.date("registration_date", &y, reg);
            let ex = distinct.date("ex_dividend_date", &y, reg + Duration::days(rng.gen_range(1..=20)));
            let mut dividend = BTreeMap::new();
            dividend.insert(
                "dividend_per_share".to_string(),
                distinct.number("dividend_per_share", &y, rng.gen_range(0.05..3.0)),
            );
            dividend.insert("registration_date".to_string(), reg.format("%Y-%m-%d").to_string());
            dividend.insert("ex_dividend_date".to_string(), ex.format("%Y-%m-%d").to_string());
            rows.push(MasterRow {
                metadata: metadata(ticker, &y, catalog::DIVIDEND_ANNOUNCEMENT),
                metrics: dividend,
            });

            let mut esg = BTreeMap::new();
            esg.insert(
                "carbon_emissions".to_string(),
                distinct.number("carbon_emissions", &y, carbon * shock),
            );
            esg.insert(
                "employee_count".to_string(),
                distinct.number("employee_count", &y, employees),
            );
            rows.push(MasterRow {
                metadata: metadata(ticker, &y, catalog::ESG_REPORT),
                metrics: esg,
            });
        }
    }
    debug_assert!(rows.iter().all(|r| r.year().parse::<i32>().is_ok()));
    MasterTable::new(rows)
}

// ---------------------------------------------------------------------------
// Rendering

const FILLER: &[&str] = &[
    "The harbour ferry schedule changes with the tides each spring.",
    "Volunteers planted a row of lime trees along the riverside path.",
    "A small choir rehearses in the old library on quiet evenings.",
    "The museum opened a gallery of hand-woven textiles from the coast.",
    "Cyclists often stop at the bakery near the northern bridge.",
    "Morning fog usually lifts from the valley before noon.",
    "The chess club meets in the community hall every week.",
    "A pair of herons nests near the reed beds by the lake.",
    "Local schools held a science fair about rainwater gardens.",
    "The hiking trail climbs gently through pine and birch woods.",
    "An old clock tower was repainted in its original colours.",
    "Street musicians gather in the square on summer weekends.",
    "The botanical garden added a glasshouse for desert plants.",
    "Fishermen mend their nets on the pier in the late afternoon.",
    "A travelling theatre troupe staged a comedy in the park.",
    "The pottery workshop teaches glazing techniques to beginners.",
];

fn filler_paragraph(rng: &mut ChaCha8Rng) -> String {
    (0..3)
        .map(|_| *FILLER.choose(rng).expect("filler"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn metric_def(name: &str) -> Result<&'static MetricDef, BenchError> {
    catalog::metric(name).ok_or_else(|| BenchError::UnknownMetric(name.to_string()))
}

fn sidecar(row: &MasterRow) -> Result<FactSidecar, BenchError> {
    row.metrics
        .iter()
        .map(|(name, value)| {
            let def = metric_def(name)?;
            Ok((
                name.clone(),
                Fact {
                    value: value.clone(),
                    statement: def.statement(row.ticker(), row.year(), value),
                },
            ))
        })
        .collect()
}

fn render_row(row: &MasterRow, filler_paragraphs: usize, rng: &mut ChaCha8Rng) -> Result<DocumentRecord, BenchError> {
    let facts = sidecar(row)?;
    // fact sentences in catalog order, filler spliced in at seeded positions
    let mut paragraphs: Vec<String> = catalog::METRICS
        .iter()
        .filter_map(|m| facts.get(m.name).map(|f| f.statement.clone()))
        .collect();
    for _ in 0..filler_paragraphs {
        let at = rng.gen_range(0..=paragraphs.len());
        paragraphs.insert(at, filler_paragraph(rng));
    }
    Ok(DocumentRecord::new(row.doc_id(), paragraphs.join("\n\n"), row.metadata.clone()).with_sidecar(facts))
}

/// One document per row, each embedding its row's fact sentences.
pub fn render_corpus(table: &MasterTable, filler_paragraphs: usize, seed: u64) -> Result<Corpus, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = table
        .rows()
        .iter()
        .map(|r| render_row(r, filler_paragraphs, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus::new(MetadataSchema::financial_filings(), docs)?)
}

// ---------------------------------------------------------------------------
// Instances

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSelection {
    pub tickers: Vec<String>,
    /// One year, or (from, to) for cross-year templates.
    pub years: Vec<String>,
}

fn change_clause(def: &MetricDef, ticker: &str, from: (&str, &str), to: (&str, &str)) -> String {
    match def.kind {
        MetricKind::Number => {
            let (a, b) = (from.1.parse::<f64>(), to.1.parse::<f64>());
            match (a, b) {
                (Ok(a), Ok(b)) => format!(
                    "{ticker}'s {} changed by {:.2}% from fiscal year {} to fiscal year {}.",
                    def.label,
                    oracles::growth_rate(a, b),
                    from.0,
                    to.0
                ),
                _ => String::new(),
            }
        }
        MetricKind::Date | MetricKind::Text if from.1 == to.1 => format!(
            "{ticker}'s {} was the same in fiscal year {} and fiscal year {}.",
            def.label, from.0, to.0
        ),
        MetricKind::Date | MetricKind::Text => format!(
            "{ticker}'s {} changed from {} in fiscal year {} to {} in fiscal year {}.",
            def.label, from.1, from.0, to.1, to.0
        ),
    }
}

fn value_of<'a>(row: &'a MasterRow, metric: &str) -> Result<&'a str, BenchError> {
    row.metrics.get(metric).map(String::as_str).ok_or_else(|| BenchError::MissingMetric {
        row: row.label(),
        metric: metric.to_string(),
    })
}

/// Builds one instance: question, documents, gold facts, oracle answer and
/// aligned rows over the selected companies and years.
pub fn instantiate(
    table: &MasterTable,
    template: &QuestionTemplate,
    selection: &DocSelection,
    id: &str,
) -> Result<BenchmarkInstance, BenchError> {
    let resolved = template.resolve(&selection.years)?;
    let doc_type = resolved.doc_type()?;
    let years = resolved.years()?;
    let mut tickers = selection.tickers.clone();
    tickers.sort();
    tickers.dedup();

    let mut rows = Vec::new();
    for t in &tickers {
        for y in &years {
            let row = table
                .find(t, y, doc_type)
                .ok_or_else(|| BenchError::MissingRow(doc_id(t, y, doc_type)))?;
            for m in &resolved.required_metrics {
                value_of(row, m)?;
            }
            rows.push(row);
        }
    }

    let mut gold_facts = Vec::new();
    if resolved.cross_year {
        let metric = resolved.metric()?;
        for pair in rows.chunks(2) {
            let (a, b) = (pair[0], pair[1]);
            let (va, vb) = (value_of(a, metric.name)?, value_of(b, metric.name)?);
            gold_facts.push(
                resolved
                    .fact_statement_template
                    .replace("{fact_from}", &metric.statement(a.ticker(), a.year(), va))
                    .replace("{fact_to}", &metric.statement(b.ticker(), b.year(), vb))
                    .replace(
                        "{change}",
                        &change_clause(metric, a.ticker(), (a.year(), va), (b.year(), vb)),
                    ),
            );
        }
    } else {
        for row in &rows {
            for m in &resolved.required_metrics {
                let def = metric_def(m)?;
                let fact = def.statement(row.ticker(), row.year(), value_of(row, m)?);
                gold_facts.push(resolved.fact_statement_template.replace("{fact}", &fact));
            }
        }
    }

    let aligned_rows = rows
        .iter()
        .map(|r| {
            Ok(AlignedRow {
                doc_id: r.doc_id(),
                metric_columns: resolved
                    .required_metrics
                    .iter()
                    .map(|m| Ok((m.clone(), value_of(r, m)?.to_string())))
                    .collect::<Result<Vec<_>, BenchError>>()?,
            })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;

    Ok(BenchmarkInstance {
        id: id.to_string(),
        question: resolved.question()?,
        doc_ids: rows.iter().map(|r| r.doc_id()).collect(),
        metadata: rows.iter().map(|r| r.metadata.clone()).collect(),
        gold_facts,
        gold_answer: oracles::compute(&resolved, &rows)?,
        aligned_rows: Some(aligned_rows),
        tier: resolved.tier,
        template_id: resolved.id.clone(),
        noise_doc_ids: Vec::new(),
    })
}

/// Year choices a template can be instantiated with.
fn year_options(template: &QuestionTemplate, years: &[String]) -> Vec<Vec<String>> {
    if template.cross_year {
        years.windows(2).map(|w| w.to_vec()).collect()
    } else {
        years.iter().map(|y| vec![y.clone()]).collect()
    }
}

/// `per_template` instances per template, cycling through year choices with
/// a seeded company subset each time.
pub fn build_instances(
    table: &MasterTable,
    templates: &[QuestionTemplate],
    cfg: &GenConfig,
) -> Result<Vec<BenchmarkInstance>, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let tickers = table.tickers();
    let years = table.years();
    let lo = cfg.min_companies.clamp(1, tickers.len());
    let hi = cfg.max_companies.clamp(lo, tickers.len());
    let mut out = Vec::new();
    for t in templates {
        let options = year_options(t, &years);
        if options.is_empty() {
            continue;
        }
        for i in 0..cfg.per_template {
            let n = rng.gen_range(lo..=hi);
            let chosen: Vec<String> = tickers.choose_multiple(&mut rng, n).cloned().collect();
            let selection = DocSelection {
                tickers: chosen,
                years: options[i % options.len()].clone(),
            };
            out.push(instantiate(table, t, &selection, &format!("{}-{:02}", t.id, i))?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Noise

/// Adds floor(ratio * |D|) off-year documents of the same companies and
/// document type. They carry full sidecars but can never pass the
/// instance's year restriction.
pub fn inject_noise(
    instance: &BenchmarkInstance,
    corpus: &Corpus,
    ratio: f64,
    seed: u64,
) -> Result<(BenchmarkInstance, Corpus), BenchError> {
    if ratio < 0.0 || ratio.is_nan() {
        return Err(BenchError::NegativeRatio(ratio));
    }
    let needed = (ratio * instance.doc_ids.len() as f64).floor() as usize;
    if needed == 0 {
        return Ok((instance.clone(), corpus.clone()));
    }
    let in_scope_years: BTreeSet<&str> = instance.metadata.iter().filter_map(|m| m.get(YEAR).map(String::as_str)).collect();
    let doc_types: BTreeSet<&str> = instance.metadata.iter().filter_map(|m| m.get(DOC_TYPE).map(String::as_str)).collect();
    let tickers: BTreeSet<&str> = instance.metadata.iter().filter_map(|m| m.get(TICKER).map(String::as_str)).collect();
    let taken: BTreeSet<(String, String, String)> = corpus
        .documents()
        .iter()
        .map(|d| {
            let f = |k: &str| d.metadata.get(k).cloned().unwrap_or_default();
            (f(TICKER), f(YEAR), f(DOC_TYPE))
        })
        .collect();

    let mut candidates = Vec::new();
    for t in &tickers {
        for year in 2010..=2019 {
            let y = year.to_string();
            if in_scope_years.contains(y.as_str()) {
                continue;
            }
            for d in &doc_types {
                let key = (t.to_string(), y.clone(), d.to_string());
                if !taken.contains(&key) && corpus.get(&doc_id(t, &y, d)).is_none() {
                    candidates.push(key);
                }
            }
        }
    }
    if candidates.len() < needed {
        return Err(BenchError::NotEnoughNoise {
            needed,
            available: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(needed);
    candidates.sort();

    let mut docs = Vec::new();
    for (t, y, d) in &candidates {
        let metrics = catalog::metrics_for(d)
            .map(|m| {
                let v = match m.kind {
                    MetricKind::Number => catalog::format_number(rng.gen_range(1.0..10000.0)),
                    MetricKind::Date => {
                        let base = NaiveDate::from_ymd_opt(y.parse::<i32>().unwrap_or(2015) + 1, 5, 1).expect("date");
                        (base + Duration::days(rng.gen_range(0..60))).format("%Y-%m-%d").to_string()
                    }
                    MetricKind::Text => FIRMS.choose(&mut rng).expect("firms").to_string(),
                };
                (m.name.to_string(), v)
            })
            .collect();
        let row = MasterRow {
            metadata: metadata(t, y, d),
            metrics,
        };
        docs.push(render_row(&row, 1, &mut rng)?);
    }
    let mut inst = instance.clone();
    inst.noise_doc_ids.extend(docs.iter().map(|d| d.doc_id.clone()));
    let corpus = corpus.extended(docs)?;
    Ok((inst, corpus))
}

// ---------------------------------------------------------------------------
// Verification probe

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contradiction {
    pub doc_id: String,
    pub metric: String,
    pub expected: String,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checked: usize,
    pub contradictions: Vec<Contradiction>,
    /// Probe errors that are not contradictions, such as gateway failures.
    pub errors: Vec<String>,
}

/// Gold value the instance's facts state for (metric, ticker, year).
fn stated_value(instance: &BenchmarkInstance, def: &MetricDef, ticker: &str, year: &str) -> Option<String> {
    instance.gold_facts.iter().find_map(|f| {
        def.parse_all(f)
            .into_iter()
            .find(|(t, y, _)| t == ticker && y == year)
            .map(|(_, _, v)| v)
    })
}

fn consistent(def: &MetricDef, ticker: &str, year: &str, expected: &str, answer: &str) -> bool {
    let parsed: Vec<_> = def
        .parse_all(answer)
        .into_iter()
        .filter(|(t, y, _)| t == ticker && y == year)
        .collect();
    if !parsed.is_empty() {
        return parsed.iter().all(|(_, _, v)| def.value_matches(expected, v));
    }
    match def.kind {
        MetricKind::Number => text_contains_number(answer, expected),
        MetricKind::Date | MetricKind::Text => answer.contains(expected),
    }
}

/// Asks one single-document question per gold fact and reports every
/// answer that disagrees with the facts.
pub fn verify_instance(
    instance: &BenchmarkInstance,
    corpus: &Corpus,
    retriever: &Retriever,
    gateway: &Gateway,
) -> VerificationReport {
    let mut report = VerificationReport::default();
    for (i, doc_id) in instance.doc_ids.iter().enumerate() {
        let Some(doc) = corpus.get(doc_id) else {
            report.errors.push(format!("{doc_id}: not in corpus"));
            continue;
        };
        let field = |k: &str| doc.metadata.get(k).map(String::as_str).unwrap_or("");
        let (ticker, year) = (field(TICKER), field(YEAR));
        for def in catalog::metrics_for(field(DOC_TYPE)) {
            let Some(expected) = stated_value(instance, def, ticker, year) else {
                continue;
            };
            report.checked += 1;
            let query = InstantiatedQuery {
                doc_id: doc_id.clone(),
                template_index: i,
                query_text: def.question(ticker, year),
            };
            let answer = match answer_subquery(doc, &query, retriever, gateway) {
                Ok(pair) => pair.answer,
                Err(e @ ExtractError::Gateway { .. }) => {
                    report.errors.push(e.to_string());
                    String::new()
                }
                Err(e) => {
                    report.errors.push(e.to_string());
                    continue;
                }
            };
            if !consistent(def, ticker, year, &expected, &answer) {
                report.contradictions.push(Contradiction {
                    doc_id: doc_id.clone(),
                    metric: def.name.to_string(),
                    expected,
                    answer,
                });
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Suites on disk

pub const MASTER_TABLE_FILE: &str = "master_table.csv";
pub const TEMPLATES_FILE: &str = "templates.json";
pub const BENCHMARK_FILE: &str = "benchmark.json";
pub const CORPUS_DIR: &str = "corpus";

#[derive(Debug, Clone)]
pub struct Suite {
    pub table: MasterTable,
    pub templates: Vec<QuestionTemplate>,
    pub corpus: Corpus,
    pub instances: Vec<BenchmarkInstance>,
}

pub fn generate_suite(cfg: &GenConfig, templates: Vec<QuestionTemplate>) -> Result<Suite, BenchError> {
    let table = generate_master_table(cfg)?;
    suite_from_table(table, templates, cfg)
}

pub fn suite_from_table(
    table: MasterTable,
    templates: Vec<QuestionTemplate>,
    cfg: &GenConfig,
) -> Result<Suite, BenchError> {
    let corpus = render_corpus(&table, cfg.filler_paragraphs, cfg.seed)?;
    let instances = build_instances(&table, &templates, cfg)?;
    Ok(Suite {
        table,
        templates,
        corpus,
        instances,
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), BenchError> {
    let body = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, body).map_err(io_err(path))
}

pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkInstance>, BenchError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&raw).map_err(|e| BenchError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

pub fn load_templates(path: &Path) -> Result<Vec<QuestionTemplate>, BenchError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&raw).map_err(|e| BenchError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

impl Suite {
    /// Writes the table, templates, corpus and benchmark under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), BenchError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.table.save(&dir.join(MASTER_TABLE_FILE))?;
        write_json(&dir.join(TEMPLATES_FILE), &self.templates)?;
        write_corpus(&self.corpus, &dir.join(CORPUS_DIR))?;
        write_json(&dir.join(BENCHMARK_FILE), &self.instances)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::RetrievalConfig;
    use crate::gateway::{OracleProvider, ScriptedProvider};

    fn small() -> MasterTable {
        generate_master_table(&GenConfig {
            companies: 4,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn table_covers_grid_and_round_trips() {
        let t = small();
        assert_eq!(t.rows().len(), 4 * 4 * 3);
        let back = MasterTable::from_csv(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
        let reserved: BTreeSet<String> = catalog::reserved_words().into_iter().collect();
        for tk in t.tickers() {
            assert!(!reserved.contains(&tk.to_lowercase()));
        }
    }

    #[test]
    fn collisions_rejected() {
        let r = small().rows()[0].clone();
        assert!(matches!(MasterTable::new(vec![r.clone(), r]), Err(BenchError::MetadataCollision(_))));
        assert!(matches!(MasterTable::new(vec![]), Err(BenchError::EmptyTable)));
    }

    #[test]
    fn render_is_bijective_and_deterministic() {
        let t = small();
        let c = render_corpus(&t, 0, 1).unwrap();
        assert_eq!(c.len(), t.rows().len());
        for (row, doc) in t.rows().iter().zip(c.documents()) {
            let sc = doc.fact_sidecar.as_ref().unwrap();
            let values: BTreeMap<String, String> = sc.iter().map(|(k, f)| (k.clone(), f.value.clone())).collect();
            assert_eq!(values, row.metrics);
            let sentences: Vec<&str> = catalog::METRICS
                .iter()
                .filter_map(|m| sc.get(m.name).map(|f| f.statement.as_str()))
                .collect();
            assert_eq!(doc.text, sentences.join("\n\n"));
        }
        assert_eq!(render_corpus(&t, 3, 9).unwrap(), render_corpus(&t, 3, 9).unwrap());
        assert_ne!(render_corpus(&t, 3, 9).unwrap(), render_corpus(&t, 3, 10).unwrap());
    }

    fn hand_table() -> MasterTable {
        let row = |t: &str, y: &str, m: &[(&str, &str)]| MasterRow {
            metadata: metadata(t, y, catalog::ANNUAL_REPORT),
            metrics: m.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        };
        MasterTable::new(vec![
            row("AAA", "2021", &[("revenue", "100.00"), ("total_operating_cost", "10.00")]),
            row("BBB", "2021", &[("revenue", "150.00"), ("total_operating_cost", "30.00")]),
            row("CCC", "2021", &[("revenue", "120.00"), ("total_operating_cost", "25.00")]),
            row("AAA", "2022", &[("revenue", "110.00")]),
            row("BBB", "2022", &[("revenue", "180.00")]),
        ])
        .unwrap()
    }

    fn template(id: &str) -> QuestionTemplate {
        templates::default_templates().into_iter().find(|t| t.id == id).unwrap()
    }

    #[test]
    fn instantiate_examples() {
        let table = hand_table();
        let sel = DocSelection {
            tickers: vec!["CCC".into(), "AAA".into(), "BBB".into()],
            years: vec!["2021".into()],
        };
        let mut top1 = template("top3_revenue");
        top1.oracle_params.insert("k".into(), 1.into());
        let inst = instantiate(&table, &top1, &sel, "x").unwrap();
        assert_eq!(inst.gold_answer, "BBB (150.00)");
        assert_eq!(inst.doc_ids, ["AAA-2021-annual_report", "BBB-2021-annual_report", "CCC-2021-annual_report"]);

        let range = instantiate(&table, &template("range_operating_cost"), &sel, "r").unwrap();
        assert_eq!(range.gold_answer, "max 30.00; min 10.00; range 20.00");
        assert_eq!(range.gold_facts.len(), 3);
        assert_eq!(range.aligned_rows.as_ref().unwrap().len(), 3);
        assert!(!range.non_atomic_risk());

        let growth = instantiate(
            &table,
            &template("growth_revenue"),
            &DocSelection {
                tickers: vec!["AAA".into(), "BBB".into()],
                years: vec!["2021".into(), "2022".into()],
            },
            "g",
        )
        .unwrap();
        assert_eq!(growth.doc_ids.len(), 4);
        assert_eq!(growth.gold_facts.len(), 2);
        assert!(growth.gold_facts[0].starts_with("AAA's revenue for fiscal year 2021 was 100.00 million. AAA's revenue for fiscal year 2022 was 110.00 million."));
        assert_eq!(growth.gold_answer, "BBB (20.00%); AAA (10.00%)");
        assert!(growth.non_atomic_risk());

        let missing = DocSelection {
            tickers: vec!["CCC".into()],
            years: vec!["2021".into(), "2022".into()],
        };
        assert!(matches!(
            instantiate(&table, &template("growth_revenue"), &missing, "m"),
            Err(BenchError::MissingRow(_))
        ));
    }

    #[test]
    fn facts_appear_verbatim() {
        let cfg = GenConfig {
            companies: 6,
            per_template: 2,
            ..GenConfig::default()
        };
        let suite = generate_suite(&cfg, templates::default_templates()).unwrap();
        for inst in &suite.instances {
            let texts: Vec<&str> = inst.doc_ids.iter().map(|d| suite.corpus.get(d).unwrap().text.as_str()).collect();
            for fact in &inst.gold_facts {
                let sentences: Vec<String> = catalog::METRICS
                    .iter()
                    .flat_map(|m| {
                        m.parse_all(fact)
                            .into_iter()
                            .map(move |(t, y, v)| m.statement(&t, &y, &v))
                    })
                    .collect();
                assert!(!sentences.is_empty(), "{fact}");
                for s in sentences {
                    assert_eq!(texts.iter().filter(|t| t.contains(&s)).count(), 1, "{s}");
                }
            }
        }
    }

    #[test]
    fn noise_counts_and_scope() {
        let suite = generate_suite(
            &GenConfig {
                companies: 7,
                per_template: 1,
                ..GenConfig::default()
            },
            templates::default_templates(),
        )
        .unwrap();
        let inst = suite.instances.iter().find(|i| i.doc_ids.len() >= 2).unwrap();
        let (same, c0) = inject_noise(inst, &suite.corpus, 0.0, 1).unwrap();
        assert_eq!(&same, inst);
        assert_eq!(c0.len(), suite.corpus.len());
        let (noisy, corpus) = inject_noise(inst, &suite.corpus, 0.5, 1).unwrap();
        assert_eq!(noisy.noise_doc_ids.len(), inst.doc_ids.len() / 2);
        assert_eq!(corpus.len(), suite.corpus.len() + inst.doc_ids.len() / 2);
        assert_eq!(noisy.gold_facts, inst.gold_facts);
        assert_eq!(noisy.gold_answer, inst.gold_answer);
        let years: Vec<String> = inst.metadata.iter().map(|m| m[YEAR].clone()).collect();
        let restriction = [(YEAR.to_string(), years)].into_iter().collect();
        let kept: BTreeSet<&str> = corpus
            .filter_by_restriction(&restriction)
            .unwrap()
            .iter()
            .map(|d| d.doc_id.as_str())
            .collect();
        assert!(noisy.noise_doc_ids.iter().all(|n| !kept.contains(n.as_str())));
        assert!(matches!(inject_noise(inst, &suite.corpus, -1.0, 1), Err(BenchError::NegativeRatio(_))));
    }

    #[test]
    fn verification_probe() {
        let suite = generate_suite(
            &GenConfig {
                companies: 5,
                per_template: 1,
                ..GenConfig::default()
            },
            templates::default_templates(),
        )
        .unwrap();
        let inst = &suite.instances[0];
        let retriever = Retriever::new(RetrievalConfig::default()).unwrap();
        let oracle = Gateway::local(OracleProvider::from_corpus(&suite.corpus));
        let ok = verify_instance(inst, &suite.corpus, &retriever, &oracle);
        assert_eq!(ok.checked, inst.gold_facts.len());
        assert!(ok.contradictions.is_empty(), "{ok:?}");

        let blank = Gateway::local(ScriptedProvider::new(vec![]).with_fallback("not found"));
        let all = verify_instance(inst, &suite.corpus, &retriever, &blank);
        assert_eq!(all.contradictions.len(), all.checked);
    }
}
