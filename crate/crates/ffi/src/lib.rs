//! C ABI over anaqa-core.
//!
//! Every fallible call returns an [`AnaqaStatus`]; on failure the message is
//! available from [`anaqa_last_error`] on the same thread. Strings handed out
//! by this library are owned by the caller and released with
//! [`anaqa_string_free`]. Handles are opaque and released with their own
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use anaqa::benchgen;
use anaqa::corpus::{self, Corpus};
use anaqa::evaluator::{self, numeric};
use anaqa::gateway::AgentRole;
use anaqa::orchestrator::{self, RunConfig, RunError, Runtime};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnaqaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Phase = 4,
    Io = 5,
    EvalIncomplete = 6,
    Panic = 7,
}

/// Loaded document collection.
pub struct AnaqaCorpus(Corpus);

/// Validated run configuration.
pub struct AnaqaConfig(RunConfig);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(AnaqaStatus, String);

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let status = match e {
            RunError::Phase { .. } => AnaqaStatus::Phase,
            RunError::Io { .. } => AnaqaStatus::Io,
            _ => AnaqaStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AnaqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AnaqaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside anaqa");
            AnaqaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(AnaqaStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AnaqaStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(AnaqaStatus::NullArgument, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(AnaqaStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn anaqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn anaqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn anaqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a corpus manifest and all referenced documents.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn anaqa_corpus_load(manifest_path: *const c_char, out: *mut *mut AnaqaCorpus) -> AnaqaStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(manifest_path, "manifest_path")?;
        let corpus = corpus::load_manifest(Path::new(path)).map_err(RunError::from)?;
        *out = Box::into_raw(Box::new(AnaqaCorpus(corpus)));
        Ok(())
    })
}

/// Number of documents, or 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn anaqa_corpus_len(corpus: *const AnaqaCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `corpus` must be null or a handle from [`anaqa_corpus_load`].
#[no_mangle]
pub unsafe extern "C" fn anaqa_corpus_free(corpus: *mut AnaqaCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Parses and validates a JSON run configuration. Credentials inside the
/// JSON are rejected; http providers read them from the environment
/// variable they name.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn anaqa_config_from_json(json: *const c_char, out: *mut *mut AnaqaConfig) -> AnaqaStatus {
    guard(|| {
        out_arg(out, "out")?;
        let raw = str_arg(json, "json")?;
        let value = serde_json::from_str(raw).map_err(|e| Failure(AnaqaStatus::Config, e.to_string()))?;
        let cfg = RunConfig::from_value(value)?;
        *out = Box::into_raw(Box::new(AnaqaConfig(cfg)));
        Ok(())
    })
}

/// Loads a TOML or JSON run configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn anaqa_config_load(path: *const c_char, out: *mut *mut AnaqaConfig) -> AnaqaStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let cfg = RunConfig::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(AnaqaConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn anaqa_config_free(config: *mut AnaqaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the full workflow into `run_dir` and returns the final answer text
/// in `answer_out`.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `answer_out` writable.
#[no_mangle]
pub unsafe extern "C" fn anaqa_run_workflow(
    config: *const AnaqaConfig,
    corpus: *const AnaqaCorpus,
    question: *const c_char,
    run_dir: *const c_char,
    resume: bool,
    answer_out: *mut *mut c_char,
) -> AnaqaStatus {
    guard(|| {
        out_arg(answer_out, "answer_out")?;
        let cfg = &ref_arg(config, "config")?.0;
        let corpus = &ref_arg(corpus, "corpus")?.0;
        let question = str_arg(question, "question")?;
        let dir = PathBuf::from(str_arg(run_dir, "run_dir")?);
        let rt = Runtime::from_config(cfg, corpus)?;
        let out = orchestrator::run_workflow(question, corpus, cfg, &rt, &dir, resume)?;
        *answer_out = owned_string(out.final_answer.text);
        Ok(())
    })
}

/// Flat retrieval baseline into `run_dir`; the answer text goes to
/// `answer_out`.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `answer_out` writable.
#[no_mangle]
pub unsafe extern "C" fn anaqa_run_baseline(
    config: *const AnaqaConfig,
    corpus: *const AnaqaCorpus,
    question: *const c_char,
    run_dir: *const c_char,
    answer_out: *mut *mut c_char,
) -> AnaqaStatus {
    guard(|| {
        out_arg(answer_out, "answer_out")?;
        let cfg = &ref_arg(config, "config")?.0;
        let corpus = &ref_arg(corpus, "corpus")?.0;
        let question = str_arg(question, "question")?;
        let dir = PathBuf::from(str_arg(run_dir, "run_dir")?);
        let rt = Runtime::from_config(cfg, corpus)?;
        let out = orchestrator::run_baseline(question, corpus, cfg, &rt, &dir)?;
        *answer_out = owned_string(out.answer);
        Ok(())
    })
}

/// Judges `runs_dir` against a benchmark file with the configured judge and
/// writes the report JSON to `report_out`. Returns `EvalIncomplete` (with
/// the report still written) when some instances have no run.
///
/// # Safety
/// `config` must be live; strings NUL-terminated; `report_out` writable.
#[no_mangle]
pub unsafe extern "C" fn anaqa_evaluate(
    config: *const AnaqaConfig,
    benchmark_path: *const c_char,
    runs_dir: *const c_char,
    report_out: *mut *mut c_char,
) -> AnaqaStatus {
    let mut incomplete = false;
    let status = guard(|| {
        out_arg(report_out, "report_out")?;
        let cfg = &ref_arg(config, "config")?.0;
        let bench = str_arg(benchmark_path, "benchmark_path")?;
        let runs = str_arg(runs_dir, "runs_dir")?;
        let instances = benchgen::load_benchmark(Path::new(bench)).map_err(RunError::from)?;
        let judge = orchestrator::build_gateway(cfg, AgentRole::Judge, None)?;
        let out = orchestrator::run_eval(&instances, Path::new(runs), &judge, cfg.judge_retries, cfg.parallelism)?;
        incomplete = !out.complete();
        *report_out = owned_string(serde_json::to_string(&out).expect("report serializes"));
        Ok(())
    });
    if status == AnaqaStatus::Ok && incomplete {
        set_error("evaluation incomplete: some instances have no run");
        return AnaqaStatus::EvalIncomplete;
    }
    status
}

/// 1 when `predicted` matches the number `gold` on integer digits and the
/// first decimal, 0 when not, -1 on bad arguments.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn anaqa_numeric_match(gold: *const c_char, predicted: *const c_char) -> i32 {
    let (Ok(g), Ok(p)) = (str_arg(gold, "gold"), str_arg(predicted, "predicted")) else {
        set_error("gold and predicted must be non-null UTF-8");
        return -1;
    };
    i32::from(numeric::numeric_match(g, p))
}

/// Coverage discounted by the error rate: min(c, 1 - e).
#[no_mangle]
pub extern "C" fn anaqa_conservative_coverage(c: f64, e: f64) -> f64 {
    evaluator::conservative_coverage(c, e)
}
