use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use anaqa::sandbox::{SandboxReply, SandboxRequest, SandboxRunner, WorkerSandbox, PROTOCOL_EXIT, TIMEOUT_EXIT};

const BIN: &str = env!("CARGO_BIN_EXE_anaqa");

fn anaqa(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).env("RUST_LOG", "error").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const PROVIDERS: &[&str] = &[
    "--provider",
    "planner=scripted:suite/fixtures/planner.json",
    "--provider",
    "coder=scripted:suite/fixtures/coder.json",
    "--provider",
    "reader=oracle",
    "--provider",
    "normalizer=reference",
    "--provider",
    "synthesizer=reference",
];

#[test]
fn gen_ask_eval_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let g = anaqa(
        &["gen", "--out", "suite", "--companies", "6", "--per-template", "1", "--min-companies", "4", "--max-companies", "5"],
        cwd,
    );
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    assert!(cwd.join("suite/fixtures/planner.json").is_file());
    assert_eq!(code(&anaqa(&["ingest", "--manifest", "suite/corpus/manifest.json"], cwd)), 0);
    assert_eq!(code(&anaqa(&["ingest", "--manifest", "suite/nope.json"], cwd)), 2);

    let mut args = vec!["ask", "--manifest", "suite/corpus/manifest.json", "--benchmark", "suite/benchmark.json", "--run-dir", "runs"];
    args.extend_from_slice(PROVIDERS);
    let a = anaqa(&args, cwd);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));

    let e = anaqa(&["eval", "--benchmark", "suite/benchmark.json", "--runs", "runs", "--provider", "judge=reference"], cwd);
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    assert!(stdout(&e).contains("overall"));
    assert!(stdout(&e).contains("1.0000"));
    let r = anaqa(&["report", "--runs", "runs"], cwd);
    assert_eq!(code(&r), 0);
    assert_eq!(stdout(&r), stdout(&e));

    // one run gone: evaluation is incomplete
    let first = std::fs::read_dir(cwd.join("runs")).unwrap().map(|e| e.unwrap().path()).find(|p| p.is_dir()).unwrap();
    std::fs::remove_dir_all(first).unwrap();
    let e = anaqa(&["eval", "--benchmark", "suite/benchmark.json", "--runs", "runs", "--provider", "judge=reference"], cwd);
    assert_eq!(code(&e), 4);
    assert!(stdout(&e).contains("missing_run"));

    // a credential in a config file is a config error
    std::fs::write(cwd.join("bad.toml"), "[providers.judge]\nkind = \"http\"\nendpoint = \"http://localhost:1\"\nmodel_name = \"m\"\napi_key = \"sk-123\"\n").unwrap();
    let b = anaqa(&["eval", "--config", "bad.toml", "--benchmark", "suite/benchmark.json", "--runs", "runs"], cwd);
    assert_eq!(code(&b), 2);
    assert!(String::from_utf8_lossy(&b.stderr).contains("auth_env_var"));

    // a question the planner fixture does not know fails in the plan phase
    let mut args = vec!["ask", "--manifest", "suite/corpus/manifest.json", "--question", "What is the meaning of it all?", "--run-dir", "lost"];
    args.extend_from_slice(PROVIDERS);
    let p = anaqa(&args, cwd);
    assert_eq!(code(&p), 3, "{}", String::from_utf8_lossy(&p.stderr));
    assert!(String::from_utf8_lossy(&p.stderr).contains("phase plan"));

    let z = anaqa(
        &["baseline", "--manifest", "suite/corpus/manifest.json", "--question", "q", "--provider", "reader=oracle", "--budget-multiplier", "0"],
        cwd,
    );
    assert_eq!(code(&z), 2);
}

fn raw_worker(line: &str) -> SandboxReply {
    let mut child = Command::new(BIN)
        .arg("worker")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(line.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn worker_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("records.json");
    std::fs::write(&data, "[{\"ticker_symbol\": \"AAA\"}]\n").unwrap();

    let bad = raw_worker("{not json}\n");
    assert_eq!(bad.exit_code, PROTOCOL_EXIT);

    let worker = WorkerSandbox::new(BIN, vec!["worker".into()]);
    let echo = worker
        .execute(&SandboxRequest {
            code: "import sys\nprint(open(sys.argv[1]).read()[:20])\n".into(),
            data_path: data.to_string_lossy().into_owned(),
            wall_ms: 10_000,
            memory_mb: 256,
        })
        .unwrap();
    assert_eq!(echo.exit_code, 0, "{}", echo.stderr);
    assert_eq!(echo.stdout.trim_end(), "[{\"ticker_symbol\": \"");

    let slow = worker
        .execute(&SandboxRequest {
            code: "while True:\n    pass\n".into(),
            data_path: data.to_string_lossy().into_owned(),
            wall_ms: 300,
            memory_mb: 256,
        })
        .unwrap();
    assert_eq!(slow.exit_code, TIMEOUT_EXIT);
    assert!(slow.timed_out);
}
