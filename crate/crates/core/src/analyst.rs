//! Analysis program generation, sandboxed execution and answer synthesis.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{AgentRole, ChatRequest, Gateway, GatewayError};
use crate::normalizer::{to_pretty_json, FlatRecord, RecordSchema, RecordSet, RECORDS_FILE};
use crate::prompts;
use crate::sandbox::{SandboxError, SandboxLimits, SandboxReply, SandboxRequest, SandboxRunner, OUTPUT_CAP_BYTES};
use crate::text::last_tag_block;

#[derive(Debug, Error)]
pub enum AnalystError {
    #[error("record set is empty")]
    EmptyRecords,
    #[error("no <execute> block in the coder reply after {attempts} attempts")]
    NoProgram { attempts: u32 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type ExecutionResult = SandboxReply;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisProgram {
    pub code: String,
    pub source_reply: String,
    pub data_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    pub question: String,
    pub run_id: String,
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalystConfig {
    pub demo_size: usize,
    pub repair_rounds: u32,
    pub format_retries: u32,
    #[serde(default)]
    pub limits: SandboxLimits,
}

impl Default for AnalystConfig {
    fn default() -> Self {
        Self {
            demo_size: 3,
            repair_rounds: 1,
            format_retries: 1,
            limits: SandboxLimits::default(),
        }
    }
}

pub fn write_records_file(records: &RecordSet, run_dir: &Path) -> Result<PathBuf, AnalystError> {
    if records.records.is_empty() {
        return Err(AnalystError::EmptyRecords);
    }
    std::fs::create_dir_all(run_dir)?;
    let path = run_dir.join(RECORDS_FILE);
    std::fs::write(&path, to_pretty_json(&records.records))?;
    Ok(path)
}

pub fn demo_records(records: &RecordSet, demo_size: usize) -> Vec<FlatRecord> {
    records.records.iter().take(demo_size).cloned().collect()
}

pub fn describe_schema(schema: &RecordSchema) -> String {
    format!("{}\nfields: {}", schema.description, schema.field_names.join(", "))
}

fn extract_code(reply: &str) -> Option<String> {
    last_tag_block(reply, "execute")
        .map(|c| c.trim_matches('\n').to_string())
        .filter(|c| !c.trim().is_empty())
}

fn request_program(
    gateway: &Gateway,
    system: &str,
    user: &str,
    data_path: &Path,
    format_retries: u32,
) -> Result<AnalysisProgram, AnalystError> {
    let mut prompt = user.to_string();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let reply = gateway.complete(&ChatRequest::new(AgentRole::Coder, system, &prompt))?;
        if let Some(code) = extract_code(&reply.text) {
            return Ok(AnalysisProgram {
                code,
                source_reply: reply.text,
                data_path: data_path.to_string_lossy().into_owned(),
            });
        }
        if attempts > format_retries {
            return Err(AnalystError::NoProgram { attempts });
        }
        prompt = user.to_string() + prompts::CODE_FORMAT_REPAIR;
    }
}

fn code_prompt(question: &str, demo: &[FlatRecord], schema: &RecordSchema, data_path: &Path) -> (String, String) {
    prompts::code(
        question,
        &serde_json::to_string_pretty(demo).expect("serializable"),
        &data_path.to_string_lossy(),
        &describe_schema(schema),
    )
}

/// The coder only ever sees the demo records, never the full file.
pub fn generate_program(
    question: &str,
    demo: &[FlatRecord],
    schema: &RecordSchema,
    data_path: &Path,
    gateway: &Gateway,
    format_retries: u32,
) -> Result<AnalysisProgram, AnalystError> {
    let (system, user) = code_prompt(question, demo, schema, data_path);
    request_program(gateway, &system, &user, data_path, format_retries)
}

/// Re-prompts the coder with the failed program and its error output.
pub fn repair_program(
    question: &str,
    demo: &[FlatRecord],
    schema: &RecordSchema,
    failed: &AnalysisProgram,
    result: &ExecutionResult,
    gateway: &Gateway,
    format_retries: u32,
) -> Result<AnalysisProgram, AnalystError> {
    let data_path = Path::new(&failed.data_path);
    let (system, user) = code_prompt(question, demo, schema, data_path);
    let user = user
        + &prompts::CODE_REPAIR
            .replace("{code}", &failed.code)
            .replace("{exit_code}", &result.exit_code.to_string())
            .replace("{stderr}", &truncate(&result.stderr, OUTPUT_CAP_BYTES));
    request_program(gateway, &system, &user, data_path, format_retries)
}

pub fn run_program(
    program: &AnalysisProgram,
    limits: SandboxLimits,
    runner: &dyn SandboxRunner,
) -> Result<ExecutionResult, AnalystError> {
    Ok(runner.execute(&SandboxRequest {
        code: program.code.clone(),
        data_path: program.data_path.clone(),
        wall_ms: limits.wall_ms,
        memory_mb: limits.memory_mb,
    })?)
}

/// Byte-bounded prefix on a char boundary.
pub fn truncate(s: &str, max_bytes: usize) -> String {
    if s.len() <= max_bytes {
        return s.to_string();
    }
    let mut end = max_bytes;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    s[..end].to_string()
}

/// The `[code_resp]` body: stdout, plus the error surface when the run
/// failed.
pub fn code_response(result: &ExecutionResult) -> String {
    let stdout = truncate(&result.stdout, OUTPUT_CAP_BYTES);
    if result.exit_code == 0 {
        return stdout;
    }
    let mut out = stdout;
    if !out.is_empty() && !out.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(&format!(
        "[execution failed with exit code {}{}]\n{}",
        result.exit_code,
        if result.timed_out { ", timed out" } else { "" },
        truncate(&result.stderr, OUTPUT_CAP_BYTES)
    ));
    out
}

pub fn synthesize(
    question: &str,
    program: &AnalysisProgram,
    result: &ExecutionResult,
    demo: &[FlatRecord],
    schema: &RecordSchema,
    run_id: &str,
    gateway: &Gateway,
) -> Result<FinalAnswer, AnalystError> {
    let mut flags = Vec::new();
    if result.exit_code != 0 {
        flags.push("degraded: analysis program failed".to_string());
    } else if result.stdout.trim().is_empty() {
        flags.push("empty analysis output".to_string());
    }
    let data = format!(
        "{}\nsample records:\n{}",
        describe_schema(schema),
        serde_json::to_string_pretty(demo).expect("serializable")
    );
    let (system, user) = prompts::final_answer(question, &data, &program.code, &code_response(result));
    let reply = gateway.complete(&ChatRequest::new(AgentRole::Synthesizer, system, user))?;
    let text = match reply.text.trim() {
        "" => {
            flags.push("empty final answer".to_string());
            String::new()
        }
        t => t.to_string(),
    };
    Ok(FinalAnswer {
        text,
        question: question.to_string(),
        run_id: run_id.to_string(),
        flags,
    })
}

/// Generation, execution and up to `repair_rounds` repairs on nonzero exit.
/// Returns every attempted (program, result) in order.
pub fn analyze(
    question: &str,
    records: &RecordSet,
    data_path: &Path,
    cfg: &AnalystConfig,
    gateway: &Gateway,
    runner: &dyn SandboxRunner,
) -> Result<Vec<(AnalysisProgram, ExecutionResult)>, AnalystError> {
    let demo = demo_records(records, cfg.demo_size);
    let mut program = generate_program(question, &demo, &records.schema, data_path, gateway, cfg.format_retries)?;
    let mut attempts = Vec::new();
    for round in 0..=cfg.repair_rounds {
        let result = run_program(&program, cfg.limits, runner)?;
        let failed = result.exit_code != 0;
        attempts.push((program.clone(), result.clone()));
        if !failed || round == cfg.repair_rounds {
            break;
        }
        log::warn!("analysis program exited with {}; requesting a repair", result.exit_code);
        program = repair_program(question, &demo, &records.schema, &program, &result, gateway, cfg.format_retries)?;
    }
    Ok(attempts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FnProvider, ScriptEntry, ScriptedProvider};
    use crate::normalizer::Source;
    use crate::sandbox::LocalPythonSandbox;
    use serde_json::Value;
    use std::sync::{Arc, Mutex};

    fn recordset(n: usize) -> RecordSet {
        let records: Vec<FlatRecord> = (0..n)
            .map(|i| {
                let mut r = FlatRecord::new();
                r.insert("ticker".into(), Value::from(format!("T{i}")));
                r.insert("note".into(), Value::from("营业成本 ✓"));
                r.insert("cost".into(), Value::from(i as f64 + 0.5));
                r
            })
            .collect();
        RecordSet {
            schema: RecordSchema {
                description: "costs".into(),
                field_names: vec!["ticker".into(), "note".into(), "cost".into()],
            },
            provenance: (0..n)
                .map(|i| {
                    vec![Source {
                        doc_id: format!("d{i}"),
                        template_index: 0,
                    }]
                })
                .collect(),
            records,
            failed_batches: vec![],
            warnings: vec![],
        }
    }

    #[test]
    fn records_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = recordset(5);
        let path = write_records_file(&set, dir.path()).unwrap();
        let back: Vec<FlatRecord> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back, set.records);
        assert!(matches!(write_records_file(&recordset(0), dir.path()), Err(AnalystError::EmptyRecords)));
    }

    #[test]
    fn last_execute_block_wins() {
        let gw = Gateway::local(ScriptedProvider::new(vec![ScriptEntry::new(
            "",
            "a <execute>print(1)</execute> then <execute>\nprint(2)\n</execute>",
        )]));
        let set = recordset(3);
        let p = generate_program("q", &set.records, &set.schema, Path::new("/x.json"), &gw, 0).unwrap();
        assert_eq!(p.code, "print(2)");
        let none = Gateway::local(ScriptedProvider::new(vec![ScriptEntry::new("", "no code")]));
        assert!(matches!(
            generate_program("q", &set.records, &set.schema, Path::new("/x.json"), &none, 1),
            Err(AnalystError::NoProgram { attempts: 2 })
        ));
    }

    #[test]
    fn coder_prompt_independent_of_record_count() {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = seen.clone();
        let gw = Gateway::local(FnProvider::new("cap", move |req: &ChatRequest| {
            s.lock().unwrap().push(req.user_prompt.len());
            Ok("<execute>print(1)</execute>".to_string())
        }));
        for n in [3, 300] {
            let set = recordset(n);
            let demo = demo_records(&set, 3);
            generate_program("q", &demo, &set.schema, Path::new("/x.json"), &gw, 0).unwrap();
        }
        let lens = seen.lock().unwrap();
        assert_eq!(lens[0], lens[1]);
    }

    #[test]
    fn repair_round_after_failure() {
        let dir = tempfile::tempdir().unwrap();
        let set = recordset(4);
        let path = write_records_file(&set, dir.path()).unwrap();
        let gw = Gateway::local(ScriptedProvider::new(vec![
            ScriptEntry::new(
                "The previous program failed",
                "<execute>import json, sys\nprint(len(json.load(open(sys.argv[1]))))</execute>",
            ),
            ScriptEntry::new("", "<execute>import json\nprint(json.load(open('wrong.json')))</execute>"),
        ]));
        let attempts = analyze("q", &set, &path, &AnalystConfig::default(), &gw, &LocalPythonSandbox::new()).unwrap();
        assert_eq!(attempts.len(), 2);
        assert_ne!(attempts[0].1.exit_code, 0);
        assert_eq!(attempts[1].1.stdout, "4\n");
    }

    #[test]
    fn synthesis_flags() {
        let set = recordset(3);
        let program = AnalysisProgram {
            code: "print(1)".into(),
            source_reply: String::new(),
            data_path: "/x".into(),
        };
        let seen = Arc::new(Mutex::new(String::new()));
        let s = seen.clone();
        let gw = Gateway::local(FnProvider::new("cap", move |req: &ChatRequest| {
            *s.lock().unwrap() = req.user_prompt.clone();
            Ok("top company: ACME (42.0)".to_string())
        }));
        let ok = SandboxReply {
            stdout: "top company: ACME (42.0)\n".into(),
            stderr: String::new(),
            exit_code: 0,
            wall_ms: 1,
            timed_out: false,
        };
        let a = synthesize("q", &program, &ok, &set.records, &set.schema, "r", &gw).unwrap();
        assert!(a.text.contains("ACME"));
        assert!(a.flags.is_empty());

        let failed = SandboxReply {
            stdout: String::new(),
            stderr: "Traceback: boom".into(),
            exit_code: 1,
            ..ok.clone()
        };
        let a = synthesize("q", &program, &failed, &set.records, &set.schema, "r", &gw).unwrap();
        assert!(a.flags[0].starts_with("degraded"));
        assert!(seen.lock().unwrap().contains("Traceback: boom"));

        let empty = SandboxReply {
            stdout: String::new(),
            ..ok
        };
        let a = synthesize("q", &program, &empty, &set.records, &set.schema, "r", &gw).unwrap();
        assert_eq!(a.flags, ["empty analysis output"]);
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate("ab✓", 3), "ab");
        assert_eq!(truncate("abc", 10), "abc");
    }
}
