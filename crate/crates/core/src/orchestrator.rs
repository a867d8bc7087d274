//! End-to-end runs. Each run owns a directory; every phase writes its
//! artifact there before the next starts, which is what resume reads.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analyst::{self, AnalysisProgram, AnalystConfig, ExecutionResult, FinalAnswer};
use crate::benchgen::{self, BenchError};
use crate::corpus::{Corpus, CorpusError};
use crate::evaluator::{
    aggregate, flags, judge_cells, judge_final, judge_rag_coverage, BenchmarkInstance, Judgment, MetricReport,
    ProcessMode, ProcessScore, ScoredInstance,
};
use crate::extractor::{extract_all, flat_rag, BaselineAnswer, ExtractionOutcome, RetrievalConfig, Retriever, TranscriptRecord};
use crate::gateway::{
    AgentRole, ChatProvider, Gateway, GatewayLimits, HttpProvider, OracleProvider, ProviderConfig, ScriptFixture,
    ScriptedProvider,
};
use crate::normalizer::{normalize_all, to_pretty_json, NormalizeConfig, RecordSet, RECORDS_FILE};
use crate::planner::{self, Plan, SubQueryTemplate};
use crate::reference::ReferenceAgent;
use crate::sandbox::{LocalPythonSandbox, SandboxRunner, WorkerSandbox};

pub const CONFIG_FILE: &str = "config.json";
pub const STATUS_FILE: &str = "status.json";
pub const PLAN_FILE: &str = "plan.json";
pub const EXTRACTION_FILE: &str = "extraction.json";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const CODE_FILE: &str = "analysis_code.py";
pub const FINAL_FILE: &str = "final_answer.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plan,
    Extract,
    Normalize,
    Analyze,
    Synthesize,
    Baseline,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Plan => "plan",
            Phase::Extract => "extract",
            Phase::Normalize => "normalize",
            Phase::Analyze => "analyze",
            Phase::Synthesize => "synthesize",
            Phase::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("phase {phase} failed: {message}")]
    Phase { phase: Phase, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

impl RunError {
    /// Process exit status for the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Corpus(_) | RunError::Bench(_) => 2,
            RunError::Phase { .. } | RunError::Io { .. } => 3,
        }
    }

    fn phase(phase: Phase, e: impl fmt::Display) -> Self {
        RunError::Phase {
            phase,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), RunError> {
    fs::write(path, body).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&raw).map_err(|e| RunError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

// ---------------------------------------------------------------------------
// Configuration

/// Where an agent role's replies come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    /// Chat-completions endpoint; the bearer token is read from the
    /// environment variable named in `auth_env_var`.
    Http(ProviderConfig),
    /// Matcher/reply fixture file.
    Scripted { fixture: PathBuf },
    /// Answers reader sub-queries from the corpus fact sidecars.
    Oracle,
    /// Rule-based normalizer, synthesizer and judge.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SandboxSpec {
    Local {
        #[serde(default)]
        python: Option<PathBuf>,
    },
    /// External worker speaking one JSON line each way.
    Worker { program: PathBuf, #[serde(default)] args: Vec<String> },
}

impl Default for SandboxSpec {
    fn default() -> Self {
        SandboxSpec::Local { python: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Workflow,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Chunk budget as a multiple of the collection size, rounded up.
    pub budget_multiplier: f64,
    pub metadata_in_prompt: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            budget_multiplier: 1.0,
            metadata_in_prompt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub providers: BTreeMap<AgentRole, ProviderSpec>,
    pub retrieval: RetrievalConfig,
    pub normalize: NormalizeConfig,
    pub analyst: AnalystConfig,
    pub sandbox: SandboxSpec,
    /// Concurrent reader calls during extraction and judge calls during
    /// evaluation.
    pub parallelism: usize,
    pub mode: Mode,
    pub baseline: BaselineConfig,
    pub noise_ratio: f64,
    pub noise_seed: u64,
    pub judge_retries: u32,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            providers: BTreeMap::new(),
            retrieval: RetrievalConfig::default(),
            normalize: NormalizeConfig::default(),
            analyst: AnalystConfig::default(),
            sandbox: SandboxSpec::default(),
            parallelism: 4,
            mode: Mode::Workflow,
            baseline: BaselineConfig::default(),
            noise_ratio: 0.0,
            noise_seed: 0,
            judge_retries: 1,
            run_dir: PathBuf::from("runs"),
        }
    }
}

const SECRET_KEYS: &[&str] = &["api_key", "apikey", "token", "secret", "password", "authorization", "bearer"];

/// Config keys that look like inline credentials.
fn find_secret(v: &Value, path: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let here = format!("{path}.{k}");
                let lower = k.to_lowercase();
                if child.is_string() && SECRET_KEYS.iter().any(|s| lower == *s || lower.ends_with(&format!("_{s}"))) {
                    out.push(here.trim_start_matches('.').to_string());
                }
                find_secret(child, &here, out);
            }
        }
        Value::Array(items) => items.iter().for_each(|i| find_secret(i, path, out)),
        _ => {}
    }
}

impl RunConfig {
    /// Parses TOML or JSON by extension. Relative fixture paths resolve
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let raw = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let value: Value = if path.extension().is_some_and(|e| e == "toml") {
            let t: toml::Value = toml::from_str(&raw).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t).map_err(|e| RunError::Config(e.to_string()))?
        } else {
            serde_json::from_str(&raw).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?
        };
        let mut cfg = Self::parse(value)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for spec in cfg.providers.values_mut() {
            if let ProviderSpec::Scripted { fixture } = spec {
                if fixture.is_relative() {
                    *fixture = base.join(&*fixture);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: Value) -> Result<Self, RunError> {
        let cfg = Self::parse(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse(value: Value) -> Result<Self, RunError> {
        let mut secrets = Vec::new();
        find_secret(&value, "", &mut secrets);
        if !secrets.is_empty() {
            return Err(RunError::Config(format!(
                "credentials are not accepted in config files ({}); put the token in an environment variable and name it in auth_env_var",
                secrets.join(", ")
            )));
        }
        serde_json::from_value(value).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.normalize.validate().map_err(|e| RunError::Config(e.to_string()))?;
        if self.retrieval.top_k == 0 {
            return Err(RunError::Config("retrieval.top_k must be positive".into()));
        }
        if self.parallelism == 0 {
            return Err(RunError::Config("parallelism must be positive".into()));
        }
        let m = self.baseline.budget_multiplier;
        if !(m.is_finite() && m > 0.0) {
            return Err(RunError::Config(format!("baseline.budget_multiplier must be positive, got {m}")));
        }
        if !(self.noise_ratio.is_finite() && self.noise_ratio >= 0.0) {
            return Err(RunError::Config(format!("noise_ratio must be non-negative, got {}", self.noise_ratio)));
        }
        for spec in self.providers.values() {
            if let ProviderSpec::Scripted { fixture } = spec {
                if !fixture.is_file() {
                    return Err(RunError::Config(format!("fixture {} not found", fixture.display())));
                }
            }
        }
        if let SandboxSpec::Worker { program, .. } = &self.sandbox {
            if program.as_os_str().is_empty() {
                return Err(RunError::Config("sandbox worker program is empty".into()));
            }
        }
        Ok(())
    }

    /// Chunk budget for the flat baseline over `n_docs` documents.
    pub fn baseline_budget(&self, n_docs: usize) -> Result<usize, RunError> {
        let m = self.baseline.budget_multiplier;
        if !(m.is_finite() && m > 0.0) {
            return Err(RunError::Config(format!("baseline.budget_multiplier must be positive, got {m}")));
        }
        Ok(((m * n_docs as f64).ceil() as usize).max(1))
    }

    /// The same config with machine-specific paths removed, as stored in
    /// a run directory.
    pub fn snapshot(&self) -> Self {
        Self {
            run_dir: PathBuf::new(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Runtime wiring

/// Gateways per role and the sandbox, built from a config.
pub struct Runtime {
    gateways: BTreeMap<AgentRole, Arc<Gateway>>,
    runner: Arc<dyn SandboxRunner>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime").field("gateways", &self.gateways).finish()
    }
}

/// Gateway for one configured role. `corpus` is only needed by the oracle.
pub fn build_gateway(cfg: &RunConfig, role: AgentRole, corpus: Option<&Corpus>) -> Result<Gateway, RunError> {
    let spec = cfg
        .providers
        .get(&role)
        .ok_or_else(|| RunError::Config(format!("no provider configured for the {role} role")))?;
    let provider: Arc<dyn ChatProvider> = match spec {
        ProviderSpec::Http(pc) => Arc::new(HttpProvider::new(pc.clone()).map_err(|e| RunError::Config(e.to_string()))?),
        ProviderSpec::Scripted { fixture } => {
            let f = ScriptFixture::load(fixture).map_err(|e| RunError::Config(format!("fixture {}: {e}", fixture.display())))?;
            Arc::new(ScriptedProvider::from_fixture(f).with_id(format!("scripted:{role}")))
        }
        ProviderSpec::Oracle => {
            let corpus = corpus.ok_or_else(|| RunError::Config(format!("the oracle cannot serve the {role} role here")))?;
            Arc::new(OracleProvider::from_corpus(corpus))
        }
        ProviderSpec::Reference => Arc::new(ReferenceAgent),
    };
    let limits = match spec {
        ProviderSpec::Http(pc) => GatewayLimits::from(pc),
        _ => GatewayLimits {
            backoff_base_ms: 0,
            parallelism_limit: cfg.parallelism,
            ..GatewayLimits::default()
        },
    };
    Ok(Gateway::new(provider, limits))
}

impl Runtime {
    /// The oracle reads sidecars from `corpus`.
    pub fn from_config(cfg: &RunConfig, corpus: &Corpus) -> Result<Self, RunError> {
        let mut gateways = BTreeMap::new();
        for role in cfg.providers.keys() {
            gateways.insert(*role, Arc::new(build_gateway(cfg, *role, Some(corpus))?));
        }
        let runner: Arc<dyn SandboxRunner> = match &cfg.sandbox {
            SandboxSpec::Local { python } => {
                let mut s = LocalPythonSandbox::new();
                if let Some(p) = python {
                    s = s.with_python(p);
                }
                Arc::new(s)
            }
            SandboxSpec::Worker { program, args } => Arc::new(WorkerSandbox::new(program, args.clone())),
        };
        Ok(Self { gateways, runner })
    }

    pub fn with_runner(mut self, runner: Arc<dyn SandboxRunner>) -> Self {
        self.runner = runner;
        self
    }

    pub fn with_gateway(mut self, role: AgentRole, gateway: Arc<Gateway>) -> Self {
        self.gateways.insert(role, gateway);
        self
    }

    pub fn gateway(&self, role: AgentRole) -> Result<&Gateway, RunError> {
        self.gateways
            .get(&role)
            .map(|g| g.as_ref())
            .ok_or_else(|| RunError::Config(format!("no provider configured for the {role} role")))
    }

    pub fn runner(&self) -> &dyn SandboxRunner {
        self.runner.as_ref()
    }
}

// ---------------------------------------------------------------------------
// Run records

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStatus {
    pub phase: Phase,
    /// "done" or "failed".
    pub state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub question: String,
    pub mode: Mode,
    pub phases: Vec<PhaseStatus>,
    pub completed: bool,
}

impl RunStatus {
    pub fn done(&self, phase: Phase) -> bool {
        self.phases.iter().any(|p| p.phase == phase && p.state == "done")
    }

    pub fn load(run_dir: &Path) -> Option<Self> {
        read_json(&run_dir.join(STATUS_FILE)).ok()
    }
}

pub fn run_id(question: &str) -> String {
    hex::encode(Sha256::digest(question.as_bytes()))[..16].to_string()
}

/// One executed analysis program as persisted. Wall time is left out so
/// replays compare byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisAttempt {
    pub code: String,
    pub source_reply: String,
    pub exit_code: i32,
    pub timed_out: bool,
    pub stdout: String,
    pub stderr: String,
}

struct RunDir<'a> {
    dir: &'a Path,
    status: RunStatus,
}

impl RunDir<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn save_status(&self) -> Result<(), RunError> {
        write_file(&self.path(STATUS_FILE), &to_pretty_json(&self.status))
    }

    fn mark(&mut self, phase: Phase, error: Option<String>) -> Result<(), RunError> {
        self.status.phases.retain(|p| p.phase != phase);
        self.status.phases.push(PhaseStatus {
            phase,
            state: if error.is_some() { "failed" } else { "done" }.into(),
            error,
        });
        self.save_status()
    }

    /// Records the failure and hands back the error.
    fn fail(&mut self, phase: Phase, e: impl fmt::Display) -> RunError {
        let err = RunError::phase(phase, e);
        if let Err(io) = self.mark(phase, Some(err.to_string())) {
            log::error!("could not record failure: {io}");
        }
        err
    }
}

fn open_run_dir<'a>(dir: &'a Path, question: &str, mode: Mode, cfg: &RunConfig, resume: bool) -> Result<RunDir<'a>, RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let previous = RunStatus::load(dir).filter(|s| resume && s.question == question && s.mode == mode);
    let status = previous.unwrap_or_else(|| RunStatus {
        run_id: run_id(question),
        question: question.to_string(),
        mode,
        phases: Vec::new(),
        completed: false,
    });
    let rd = RunDir { dir, status };
    write_file(&rd.path(CONFIG_FILE), &to_pretty_json(&cfg.snapshot()))?;
    rd.save_status()?;
    Ok(rd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_answer: FinalAnswer,
    pub status: RunStatus,
    /// Phases executed in this invocation, in order.
    pub executed: Vec<Phase>,
}

/// Runs plan, extract, normalize, analyze and synthesize, persisting each
/// artifact before the next phase. With `resume`, phases already marked
/// done in the run directory are loaded instead of re-executed.
pub fn run_workflow(
    question: &str,
    corpus: &Corpus,
    cfg: &RunConfig,
    rt: &Runtime,
    run_dir: &Path,
    resume: bool,
) -> Result<RunOutcome, RunError> {
    let mut rd = open_run_dir(run_dir, question, Mode::Workflow, cfg, resume)?;
    let mut executed = Vec::new();
    let run_id = rd.status.run_id.clone();

    // plan
    let plan = if rd.status.done(Phase::Plan) {
        let templates: Vec<SubQueryTemplate> = read_json(&rd.path(PLAN_FILE))?;
        Plan {
            question: question.to_string(),
            templates,
            warnings: Vec::new(),
        }
    } else {
        executed.push(Phase::Plan);
        let gw = rt.gateway(AgentRole::Planner)?;
        let plan = planner::plan(question, corpus.schema(), gw, cfg.normalize.repair_retries).map_err(|e| rd.fail(Phase::Plan, e))?;
        write_file(&rd.path(PLAN_FILE), &plan.to_json())?;
        rd.mark(Phase::Plan, None)?;
        plan
    };

    // extract
    let extraction = if rd.status.done(Phase::Extract) {
        let transcript: Vec<TranscriptRecord> = read_json(&rd.path(EXTRACTION_FILE))?;
        ExtractionOutcome::from_transcript(&transcript)
    } else {
        executed.push(Phase::Extract);
        let retriever = Retriever::new(cfg.retrieval.clone()).map_err(|e| RunError::Config(e.to_string()))?;
        let gw = rt.gateway(AgentRole::Reader)?;
        let outcome = extract_all(corpus, &plan, &retriever, gw, cfg.parallelism).map_err(|e| rd.fail(Phase::Extract, e))?;
        write_file(&rd.path(EXTRACTION_FILE), &to_pretty_json(&outcome.transcript(corpus)))?;
        if outcome.pairs.is_empty() {
            return Err(rd.fail(Phase::Extract, "empty extraction"));
        }
        rd.mark(Phase::Extract, None)?;
        outcome
    };

    // normalize
    let records = if rd.status.done(Phase::Normalize) {
        RecordSet::load(rd.dir).map_err(|e| RunError::phase(Phase::Normalize, e))?
    } else {
        executed.push(Phase::Normalize);
        let gw = rt.gateway(AgentRole::Normalizer)?;
        let set = normalize_all(&extraction.pairs, question, &cfg.normalize, gw).map_err(|e| rd.fail(Phase::Normalize, e))?;
        set.save(rd.dir).map_err(|e| rd.fail(Phase::Normalize, e))?;
        if set.records.is_empty() {
            return Err(rd.fail(Phase::Normalize, "no records"));
        }
        rd.mark(Phase::Normalize, None)?;
        set
    };
    let data_path = rd.path(RECORDS_FILE);
    let data_path = data_path.canonicalize().unwrap_or(data_path);

    // analyze
    let attempts: Vec<AnalysisAttempt> = if rd.status.done(Phase::Analyze) {
        read_json(&rd.path(ANALYSIS_FILE))?
    } else {
        executed.push(Phase::Analyze);
        let gw = rt.gateway(AgentRole::Coder)?;
        let runs = analyst::analyze(question, &records, &data_path, &cfg.analyst, gw, rt.runner())
            .map_err(|e| rd.fail(Phase::Analyze, e))?;
        let attempts: Vec<AnalysisAttempt> = runs
            .iter()
            .map(|(p, r)| AnalysisAttempt {
                code: p.code.clone(),
                source_reply: p.source_reply.clone(),
                exit_code: r.exit_code,
                timed_out: r.timed_out,
                stdout: r.stdout.clone(),
                stderr: r.stderr.clone(),
            })
            .collect();
        write_file(&rd.path(ANALYSIS_FILE), &to_pretty_json(&attempts))?;
        if let Some(last) = attempts.last() {
            write_file(&rd.path(CODE_FILE), &last.code)?;
        }
        rd.mark(Phase::Analyze, None)?;
        attempts
    };
    let last = attempts
        .last()
        .ok_or_else(|| RunError::phase(Phase::Analyze, "no analysis attempt recorded"))?;

    // synthesize
    let final_answer = if rd.status.done(Phase::Synthesize) {
        read_json(&rd.path(FINAL_FILE))?
    } else {
        executed.push(Phase::Synthesize);
        let program = AnalysisProgram {
            code: last.code.clone(),
            source_reply: last.source_reply.clone(),
            data_path: data_path.to_string_lossy().into_owned(),
        };
        let result = ExecutionResult {
            stdout: last.stdout.clone(),
            stderr: last.stderr.clone(),
            exit_code: last.exit_code,
            wall_ms: 0,
            timed_out: last.timed_out,
        };
        let gw = rt.gateway(AgentRole::Synthesizer)?;
        let demo = analyst::demo_records(&records, cfg.analyst.demo_size);
        let answer = analyst::synthesize(question, &program, &result, &demo, &records.schema, &run_id, gw)
            .map_err(|e| rd.fail(Phase::Synthesize, e))?;
        write_file(&rd.path(FINAL_FILE), &to_pretty_json(&answer))?;
        rd.mark(Phase::Synthesize, None)?;
        answer
    };
    rd.status.completed = true;
    rd.save_status()?;
    Ok(RunOutcome {
        final_answer,
        status: rd.status,
        executed,
    })
}

/// One flat retrieval call over the whole collection with a budget of
/// ceil(multiplier * |D|) chunks.
pub fn run_baseline(
    question: &str,
    corpus: &Corpus,
    cfg: &RunConfig,
    rt: &Runtime,
    run_dir: &Path,
) -> Result<BaselineAnswer, RunError> {
    let budget = cfg.baseline_budget(corpus.len())?;
    let mut rd = open_run_dir(run_dir, question, Mode::Baseline, cfg, false)?;
    let retriever = Retriever::new(cfg.retrieval.clone()).map_err(|e| RunError::Config(e.to_string()))?;
    let gw = rt.gateway(AgentRole::Reader)?;
    let answer = flat_rag(question, corpus, budget, cfg.baseline.metadata_in_prompt, &retriever, gw)
        .map_err(|e| rd.fail(Phase::Baseline, e))?;
    write_file(&rd.path(BASELINE_FILE), &to_pretty_json(&answer))?;
    let final_answer = FinalAnswer {
        text: answer.answer.clone(),
        question: question.to_string(),
        run_id: rd.status.run_id.clone(),
        flags: Vec::new(),
    };
    write_file(&rd.path(FINAL_FILE), &to_pretty_json(&final_answer))?;
    rd.mark(Phase::Baseline, None)?;
    rd.status.completed = true;
    rd.save_status()?;
    Ok(answer)
}

// ---------------------------------------------------------------------------
// Benchmarks

/// The collection an instance is asked over: its documents plus any noise.
pub fn instance_corpus(instance: &BenchmarkInstance, corpus: &Corpus) -> Result<Corpus, RunError> {
    let ids: Vec<&String> = instance.doc_ids.iter().chain(&instance.noise_doc_ids).collect();
    Ok(corpus.subset(&ids)?)
}

pub fn instance_dir(runs_dir: &Path, instance: &BenchmarkInstance) -> PathBuf {
    let safe: String = instance
        .id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    runs_dir.join(safe)
}

#[derive(Debug)]
pub struct InstanceRun {
    pub instance_id: String,
    pub result: Result<String, RunError>,
}

/// Runs every instance in the configured mode, one run directory each.
/// Noise is injected first when `noise_ratio` is positive and the instance
/// carries none.
pub fn run_benchmark(
    instances: &[BenchmarkInstance],
    corpus: &Corpus,
    cfg: &RunConfig,
    runs_dir: &Path,
    resume: bool,
) -> Result<Vec<InstanceRun>, RunError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for inst in instances {
        let (inst, full) = if cfg.noise_ratio > 0.0 && inst.noise_doc_ids.is_empty() {
            benchgen::inject_noise(inst, corpus, cfg.noise_ratio, cfg.noise_seed)?
        } else {
            (inst.clone(), corpus.clone())
        };
        let docs = instance_corpus(&inst, &full)?;
        let rt = Runtime::from_config(cfg, &docs)?;
        let dir = instance_dir(runs_dir, &inst);
        let result = match cfg.mode {
            Mode::Workflow => run_workflow(&inst.question, &docs, cfg, &rt, &dir, resume).map(|o| o.final_answer.text),
            Mode::Baseline => run_baseline(&inst.question, &docs, cfg, &rt, &dir).map(|b| b.answer),
        };
        if let Err(e) = &result {
            log::warn!("instance {}: {e}", inst.id);
        }
        out.push(InstanceRun {
            instance_id: inst.id.clone(),
            result,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub scores: Vec<ScoredInstance>,
    /// Instances without a completed run.
    pub missing: Vec<String>,
}

impl EvalOutcome {
    pub fn complete(&self) -> bool {
        self.missing.is_empty()
    }
}

fn score_instance(inst: &BenchmarkInstance, runs_dir: &Path, judge: &Gateway, retries: u32) -> ScoredInstance {
    let dir = instance_dir(runs_dir, inst);
    let status = RunStatus::load(&dir).filter(|s| s.completed && s.question == inst.question);
    let mut extra = Vec::new();
    if inst.non_atomic_risk() {
        extra.push(flags::NON_ATOMIC_RISK.to_string());
    }
    let missing = |mode: ProcessMode, mut extra: Vec<String>| {
        extra.insert(0, flags::MISSING_RUN.to_string());
        ScoredInstance {
            instance_id: inst.id.clone(),
            tier: inst.tier,
            process: ProcessScore::zero(mode),
            judgment: Judgment::incorrect(flags::MISSING_RUN),
            flags: extra,
        }
    };
    let Some(status) = status else {
        return missing(ProcessMode::CellWise, extra);
    };
    let final_text = read_json::<FinalAnswer>(&dir.join(FINAL_FILE)).map(|f| f.text);
    let Ok(final_text) = final_text else {
        return missing(mode_of(status.mode), extra);
    };
    let judgment = judge_final(inst, &final_text, judge, retries);
    let process = match status.mode {
        Mode::Workflow => match read_json::<Vec<TranscriptRecord>>(&dir.join(EXTRACTION_FILE)) {
            Ok(transcript) => match judge_cells(inst, &transcript, judge, retries) {
                Ok(cov) => {
                    extra.extend(cov.flags);
                    ProcessScore::cell(cov.c_cell)
                }
                Err(e) => {
                    extra.push(e.to_string());
                    ProcessScore::zero(ProcessMode::CellWise)
                }
            },
            Err(_) => {
                extra.push(flags::MISSING_TRANSCRIPT.to_string());
                ProcessScore::zero(ProcessMode::CellWise)
            }
        },
        Mode::Baseline => match read_json::<BaselineAnswer>(&dir.join(BASELINE_FILE)) {
            Ok(b) => {
                let chunks: Vec<String> = b.retrieved.into_iter().map(|c| c.text).collect();
                match judge_rag_coverage(inst, &chunks, judge, retries) {
                    Ok(cov) => {
                        extra.extend(cov.flags);
                        ProcessScore::rag(cov.c_i, cov.e_i)
                    }
                    Err(e) => {
                        extra.push(e.to_string());
                        ProcessScore::zero(ProcessMode::RagDoubleCheck)
                    }
                }
            }
            Err(_) => {
                extra.push(flags::MISSING_TRANSCRIPT.to_string());
                ProcessScore::zero(ProcessMode::RagDoubleCheck)
            }
        },
    };
    let mut all = judgment.flags.clone();
    all.extend(extra);
    ScoredInstance {
        instance_id: inst.id.clone(),
        tier: inst.tier,
        process,
        judgment,
        flags: all,
    }
}

fn mode_of(mode: Mode) -> ProcessMode {
    match mode {
        Mode::Workflow => ProcessMode::CellWise,
        Mode::Baseline => ProcessMode::RagDoubleCheck,
    }
}

/// Judges every instance against its run directory, in parallel up to
/// `parallelism`, and writes `report.json` into `runs_dir`.
pub fn run_eval(
    instances: &[BenchmarkInstance],
    runs_dir: &Path,
    judge: &Gateway,
    retries: u32,
    parallelism: usize,
) -> Result<EvalOutcome, RunError> {
    let mut scores: Vec<Option<ScoredInstance>> = vec![None; instances.len()];
    let workers = parallelism.max(1);
    std::thread::scope(|s| {
        let chunk = instances.len().div_ceil(workers).max(1);
        for (slot, batch) in scores.chunks_mut(chunk).zip(instances.chunks(chunk)) {
            s.spawn(move || {
                for (out, inst) in slot.iter_mut().zip(batch) {
                    *out = Some(score_instance(inst, runs_dir, judge, retries));
                }
            });
        }
    });
    let scores: Vec<ScoredInstance> = scores.into_iter().map(|s| s.expect("scored")).collect();
    let report = aggregate(&scores).map_err(|e| RunError::Config(e.to_string()))?;
    let missing = scores
        .iter()
        .filter(|s| s.flags.iter().any(|f| f == flags::MISSING_RUN))
        .map(|s| s.instance_id.clone())
        .collect();
    let outcome = EvalOutcome { report, scores, missing };
    fs::create_dir_all(runs_dir).map_err(io_err(runs_dir))?;
    write_file(&runs_dir.join(REPORT_FILE), &to_pretty_json(&outcome))?;
    Ok(outcome)
}

/// Human-readable report: the accuracy table, then every flag.
pub fn render_report(outcome: &EvalOutcome) -> String {
    let mut out = outcome.report.to_table();
    let flagged: Vec<&ScoredInstance> = outcome.scores.iter().filter(|s| !s.flags.is_empty()).collect();
    if !flagged.is_empty() {
        out.push_str("\nflags:\n");
        for s in flagged {
            out.push_str(&format!("  {}: {}\n", s.instance_id, s.flags.join("; ")));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn budget_rounds_up_and_rejects_zero() {
        let mut cfg = RunConfig::default();
        cfg.baseline.budget_multiplier = 1.5;
        assert_eq!(cfg.baseline_budget(4).unwrap(), 6);
        cfg.baseline.budget_multiplier = 0.0;
        assert!(matches!(cfg.baseline_budget(4), Err(RunError::Config(_))));
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
    }

    #[test]
    fn inline_secrets_rejected() {
        let v = json!({"providers": {"planner": {"kind": "http", "endpoint": "http://x", "model_name": "m", "api_key": "sk-1"}}});
        let err = RunConfig::from_value(v).unwrap_err();
        assert!(err.to_string().contains("providers.planner.api_key"), "{err}");
        let ok = json!({"providers": {"planner": {"kind": "http", "endpoint": "http://x", "model_name": "m", "auth_env_var": "LLM_TOKEN"}}});
        let cfg = RunConfig::from_value(ok).unwrap();
        assert!(matches!(cfg.providers[&AgentRole::Planner], ProviderSpec::Http(_)));
    }

    #[test]
    fn toml_config() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("planner.json"), r#"{"entries": []}"#).unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            r#"
mode = "baseline"
parallelism = 2

[providers.planner]
kind = "scripted"
fixture = "planner.json"

[providers.reader]
kind = "oracle"

[baseline]
budget_multiplier = 1.5
metadata_in_prompt = true
"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.mode, Mode::Baseline);
        assert!(cfg.baseline.metadata_in_prompt);
        match &cfg.providers[&AgentRole::Planner] {
            ProviderSpec::Scripted { fixture } => assert_eq!(fixture, &dir.path().join("planner.json")),
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.snapshot().run_dir, PathBuf::new());
    }

    #[test]
    fn run_ids_are_stable() {
        assert_eq!(run_id("q"), run_id("q"));
        assert_ne!(run_id("q"), run_id("r"));
        assert_eq!(run_id("q").len(), 16);
    }
}
