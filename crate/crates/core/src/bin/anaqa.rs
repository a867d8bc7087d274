use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use anaqa::benchgen::{self, GenConfig, BENCHMARK_FILE, CORPUS_DIR, TEMPLATES_FILE};
use anaqa::corpus::{self, Corpus};
use anaqa::evaluator::BenchmarkInstance;
use anaqa::gateway::{AgentRole, ProviderConfig};
use anaqa::orchestrator::{
    self, build_gateway, render_report, EvalOutcome, Mode, ProviderSpec, RunConfig, RunError, Runtime, SandboxSpec,
    REPORT_FILE,
};
use anaqa::reference::build_fixtures;
use anaqa::sandbox::{serve, LocalPythonSandbox};

const EVAL_INCOMPLETE: u8 = 4;

#[derive(Parser)]
#[command(name = "anaqa", version, about = "Analytical QA over metadata-rich document collections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark suite with reference fixtures
    Gen(GenArgs),
    /// Validate a corpus manifest
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Answer a question (or every benchmark question) with the workflow
    Ask(AskArgs),
    /// Answer with a single flat retrieval call
    Baseline(AskArgs),
    /// Judge run directories against a benchmark
    Eval(EvalArgs),
    /// Print a stored evaluation report
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Sandbox worker: one JSON request on stdin, one reply on stdout
    Worker {
        /// Only accept data files under this directory
        #[arg(long)]
        confine: Option<PathBuf>,
        #[arg(long)]
        python: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = GenConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = GenConfig::default().companies)]
    companies: usize,
    #[arg(long, default_value_t = GenConfig::default().first_year)]
    first_year: i32,
    #[arg(long, default_value_t = GenConfig::default().last_year)]
    last_year: i32,
    #[arg(long, default_value_t = GenConfig::default().per_template)]
    per_template: usize,
    #[arg(long, default_value_t = GenConfig::default().filler_paragraphs)]
    filler: usize,
    #[arg(long, default_value_t = GenConfig::default().min_companies)]
    min_companies: usize,
    #[arg(long, default_value_t = GenConfig::default().max_companies)]
    max_companies: usize,
    /// Off-year documents added per instance, as a fraction of its size
    #[arg(long, default_value_t = 0.0)]
    noise_ratio: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

#[derive(Args)]
struct AskArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, conflicts_with = "benchmark", required_unless_present = "benchmark")]
    question: Option<String>,
    /// Run every instance of a benchmark file, one run directory each
    #[arg(long)]
    benchmark: Option<PathBuf>,
    /// Skip phases already completed in the run directory
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long)]
    runs: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

/// Every RunConfig field, as overrides on top of an optional config file.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML or JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// ROLE=KIND, where KIND is oracle, reference, scripted:PATH or
    /// http:MODEL@ENDPOINT. ROLE may be `all`.
    #[arg(long = "provider", value_name = "ROLE=KIND")]
    providers: Vec<String>,
    /// Environment variable holding the bearer token for http providers
    #[arg(long, default_value = "ANAQA_API_KEY")]
    auth_env_var: String,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    repair_retries: Option<u32>,
    #[arg(long)]
    demo_size: Option<usize>,
    #[arg(long)]
    repair_rounds: Option<u32>,
    #[arg(long)]
    wall_ms: Option<u64>,
    #[arg(long)]
    memory_mb: Option<u64>,
    /// Python interpreter for the local sandbox
    #[arg(long, conflicts_with = "worker")]
    python: Option<PathBuf>,
    /// External sandbox worker command
    #[arg(long, num_args = 1.., value_name = "PROGRAM [ARGS]")]
    worker: Option<Vec<String>>,
    #[arg(long)]
    noise_ratio: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    budget_multiplier: Option<f64>,
    #[arg(long)]
    metadata_in_prompt: bool,
    #[arg(long)]
    judge_retries: Option<u32>,
}

fn parse_role(s: &str) -> Result<Vec<AgentRole>, RunError> {
    if s == "all" {
        return Ok(AgentRole::ALL.to_vec());
    }
    AgentRole::ALL
        .iter()
        .find(|r| r.to_string() == s)
        .map(|r| vec![*r])
        .ok_or_else(|| RunError::Config(format!("unknown role {s:?}")))
}

fn parse_provider(kind: &str, auth_env_var: &str) -> Result<ProviderSpec, RunError> {
    match kind.split_once(':') {
        None if kind == "oracle" => Ok(ProviderSpec::Oracle),
        None if kind == "reference" => Ok(ProviderSpec::Reference),
        Some(("scripted", path)) => Ok(ProviderSpec::Scripted { fixture: path.into() }),
        Some(("http", rest)) => {
            let (model, endpoint) = rest
                .split_once('@')
                .ok_or_else(|| RunError::Config(format!("expected http:MODEL@ENDPOINT, got {kind:?}")))?;
            let mut pc: ProviderConfig = serde_json::from_value(serde_json::json!({
                "endpoint": endpoint,
                "model_name": model,
            }))
            .map_err(|e| RunError::Config(e.to_string()))?;
            pc.auth_env_var = auth_env_var.to_string();
            Ok(ProviderSpec::Http(pc))
        }
        _ => Err(RunError::Config(format!("unknown provider kind {kind:?}"))),
    }
}

impl RunArgs {
    fn into_config(self, mode: Mode) -> Result<RunConfig, RunError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.mode = mode;
        for p in &self.providers {
            let (role, kind) = p
                .split_once('=')
                .ok_or_else(|| RunError::Config(format!("expected ROLE=KIND, got {p:?}")))?;
            let spec = parse_provider(kind, &self.auth_env_var)?;
            for r in parse_role(role)? {
                cfg.providers.insert(r, spec.clone());
            }
        }
        if let Some(v) = self.run_dir {
            cfg.run_dir = v;
        }
        if let Some(v) = self.parallelism {
            cfg.parallelism = v;
        }
        if let Some(v) = self.top_k {
            cfg.retrieval.top_k = v;
        }
        if let Some(v) = self.batch_size {
            cfg.normalize.batch_size = v;
        }
        if let Some(v) = self.sample_size {
            cfg.normalize.sample_size = v;
        }
        if let Some(v) = self.repair_retries {
            cfg.normalize.repair_retries = v;
        }
        if let Some(v) = self.demo_size {
            cfg.analyst.demo_size = v;
        }
        if let Some(v) = self.repair_rounds {
            cfg.analyst.repair_rounds = v;
        }
        if let Some(v) = self.wall_ms {
            cfg.analyst.limits.wall_ms = v;
        }
        if let Some(v) = self.memory_mb {
            cfg.analyst.limits.memory_mb = v;
        }
        if let Some(p) = self.python {
            cfg.sandbox = SandboxSpec::Local { python: Some(p) };
        }
        if let Some(mut w) = self.worker {
            let program = PathBuf::from(w.remove(0));
            cfg.sandbox = SandboxSpec::Worker { program, args: w };
        }
        if let Some(v) = self.noise_ratio {
            cfg.noise_ratio = v;
        }
        if let Some(v) = self.noise_seed {
            cfg.noise_seed = v;
        }
        if let Some(v) = self.budget_multiplier {
            cfg.baseline.budget_multiplier = v;
        }
        if self.metadata_in_prompt {
            cfg.baseline.metadata_in_prompt = true;
        }
        if let Some(v) = self.judge_retries {
            cfg.judge_retries = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gen(args: GenArgs) -> Result<(), RunError> {
    let cfg = GenConfig {
        seed: args.seed,
        companies: args.companies,
        first_year: args.first_year,
        last_year: args.last_year,
        per_template: args.per_template,
        filler_paragraphs: args.filler,
        min_companies: args.min_companies,
        max_companies: args.max_companies,
    };
    let mut suite = benchgen::generate_suite(&cfg, benchgen::templates::default_templates())?;
    if args.noise_ratio > 0.0 {
        let mut noisy = Vec::with_capacity(suite.instances.len());
        let mut corpus = suite.corpus.clone();
        for inst in &suite.instances {
            let (inst, extended) = benchgen::inject_noise(inst, &suite.corpus, args.noise_ratio, args.noise_seed)?;
            let known: BTreeSet<&str> = corpus.documents().iter().map(|d| d.doc_id.as_str()).collect();
            let extra: Vec<_> = extended
                .documents()
                .iter()
                .filter(|d| !known.contains(d.doc_id.as_str()))
                .cloned()
                .collect();
            corpus = corpus.extended(extra)?;
            noisy.push(inst);
        }
        suite.corpus = corpus;
        suite.instances = noisy;
    }
    suite.save(&args.out)?;
    let fixtures = build_fixtures(&suite.instances, &suite.templates)?;
    let dir = args.out.join("fixtures");
    fs::create_dir_all(&dir).map_err(|source| RunError::Io { path: dir.clone(), source })?;
    for (name, f) in [("planner.json", &fixtures.planner), ("coder.json", &fixtures.coder)] {
        let p = dir.join(name);
        f.save(&p).map_err(|source| RunError::Io { path: p, source })?;
    }
    println!(
        "{} documents, {} instances written to {}",
        suite.corpus.len(),
        suite.instances.len(),
        args.out.display()
    );
    println!(
        "manifest: {}\nbenchmark: {}\ntemplates: {}",
        args.out.join(CORPUS_DIR).join("manifest.json").display(),
        args.out.join(BENCHMARK_FILE).display(),
        args.out.join(TEMPLATES_FILE).display()
    );
    Ok(())
}

fn load_instances(path: &Path) -> Result<Vec<BenchmarkInstance>, RunError> {
    Ok(benchgen::load_benchmark(path)?)
}

fn ask(args: AskArgs, mode: Mode) -> Result<(), RunError> {
    let corpus = corpus::load_manifest(&args.manifest)?;
    let cfg = args.run.into_config(mode)?;
    if let Some(bench) = &args.benchmark {
        let instances = load_instances(bench)?;
        let runs = orchestrator::run_benchmark(&instances, &corpus, &cfg, &cfg.run_dir, args.resume)?;
        let failed: Vec<_> = runs.iter().filter(|r| r.result.is_err()).collect();
        println!("{} of {} runs completed in {}", runs.len() - failed.len(), runs.len(), cfg.run_dir.display());
        if let Some(first) = failed.first() {
            let err = first.result.as_ref().unwrap_err();
            return Err(RunError::Phase {
                phase: match err {
                    RunError::Phase { phase, .. } => *phase,
                    _ => orchestrator::Phase::Plan,
                },
                message: format!("{} runs failed, first {}: {err}", failed.len(), first.instance_id),
            });
        }
        return Ok(());
    }
    let question = args.question.expect("clap enforces --question or --benchmark");
    let rt = Runtime::from_config(&cfg, &corpus)?;
    match mode {
        Mode::Workflow => {
            let out = orchestrator::run_workflow(&question, &corpus, &cfg, &rt, &cfg.run_dir, args.resume)?;
            println!("{}", out.final_answer.text);
        }
        Mode::Baseline => {
            let out = orchestrator::run_baseline(&question, &corpus, &cfg, &rt, &cfg.run_dir)?;
            println!("{}", out.answer);
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<EvalOutcome, RunError> {
    let instances = load_instances(&args.benchmark)?;
    let cfg = args.run.into_config(Mode::Workflow)?;
    let judge = build_gateway(&cfg, AgentRole::Judge, None)?;
    let out = orchestrator::run_eval(&instances, &args.runs, &judge, cfg.judge_retries, cfg.parallelism)?;
    print!("{}", render_report(&out));
    Ok(out)
}

fn report(runs: &Path) -> Result<EvalOutcome, RunError> {
    let p = runs.join(REPORT_FILE);
    let raw = fs::read_to_string(&p).map_err(|source| RunError::Io { path: p.clone(), source })?;
    let out: EvalOutcome = serde_json::from_str(&raw).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?;
    print!("{}", render_report(&out));
    Ok(out)
}

fn worker(confine: Option<PathBuf>, python: Option<PathBuf>) -> Result<(), RunError> {
    let mut sandbox = LocalPythonSandbox::new();
    if let Some(p) = python {
        sandbox = sandbox.with_python(p);
    }
    if let Some(dir) = confine {
        sandbox = sandbox.confined_to(dir);
    }
    serve(BufReader::new(io::stdin().lock()), io::stdout().lock(), &sandbox).map_err(|source| RunError::Io {
        path: PathBuf::from("<stdio>"),
        source,
    })
}

fn completion(out: Result<EvalOutcome, RunError>) -> Result<u8, RunError> {
    let out = out?;
    if out.complete() {
        Ok(0)
    } else {
        eprintln!("evaluation incomplete: {} instances have no run", out.missing.len());
        Ok(EVAL_INCOMPLETE)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => gen(args).map(|_| 0),
        Command::Ingest { manifest } => corpus::load_manifest(&manifest).map_err(RunError::from).map(|c: Corpus| {
            println!("{} documents; fields: {}", c.len(), c.schema().field_names().collect::<Vec<_>>().join(", "));
            0
        }),
        Command::Ask(args) => ask(args, Mode::Workflow).map(|_| 0),
        Command::Baseline(args) => ask(args, Mode::Baseline).map(|_| 0),
        Command::Eval(args) => completion(eval(args)),
        Command::Report { runs } => completion(report(&runs)),
        Command::Worker { confine, python } => worker(confine, python).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
