//! Execution of generated analysis programs.
//!
//! [`LocalPythonSandbox`] runs a program in-process-tree with a guard
//! preamble and OS resource limits. [`WorkerSandbox`] speaks the one-line
//! request/reply protocol to an external worker command. [`serve`] is the
//! worker side of that protocol.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TIMEOUT_EXIT: i32 = 124;
pub const PROTOCOL_EXIT: i32 = 125;
pub const DATA_PATH_ENV: &str = "MUDA_DATA_PATH";
pub const OUTPUT_CAP_BYTES: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox unavailable: {0}")]
    Unavailable(String),
    #[error("sandbox protocol violation: {0}")]
    Protocol(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxRequest {
    pub code: String,
    pub data_path: String,
    pub wall_ms: u64,
    pub memory_mb: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxReply {
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
    pub wall_ms: u64,
    pub timed_out: bool,
}

impl SandboxReply {
    pub fn protocol_error(message: impl Into<String>) -> Self {
        Self {
            stdout: String::new(),
            stderr: format!("protocol error: {}", message.into()),
            exit_code: PROTOCOL_EXIT,
            wall_ms: 0,
            timed_out: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxLimits {
    pub wall_ms: u64,
    pub memory_mb: u64,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self {
            wall_ms: 30_000,
            memory_mb: 512,
        }
    }
}

pub trait SandboxRunner: Send + Sync {
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxReply, SandboxError>;
}

const GUARD: &str = r#"import os, sys

def _anaqa_guard():
    workdir = os.path.realpath(os.getcwd())
    data_arg = sys.argv[1]
    data = os.path.realpath(data_arg)
    with open(sys.argv[2], encoding="utf-8") as f:
        src = f.read()
    roots = {workdir, data, "/dev/null", "/dev/urandom", "/usr/share/zoneinfo", "/etc/localtime",
             "/sys/devices/system/cpu", os.path.realpath("/proc/self")}
    for p in [sys.prefix, sys.base_prefix, sys.exec_prefix, sys.base_exec_prefix] + sys.path:
        if p:
            roots.add(os.path.realpath(p))
    write_flags = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_TRUNC | os.O_APPEND
    mutating = {
        "os.remove": (0,), "os.rmdir": (0,), "os.mkdir": (0,), "os.rename": (0, 1),
        "os.symlink": (1,), "os.link": (1,), "os.chmod": (0,), "os.chown": (0,),
        "os.truncate": (0,), "os.utime": (0,), "os.setxattr": (0,), "os.removexattr": (0,),
        "shutil.copyfile": (1,), "shutil.copytree": (1,), "shutil.rmtree": (0,),
        "shutil.move": (0, 1), "shutil.make_archive": (0,),
    }
    blocked = ("subprocess.", "os.exec", "os.spawn", "os.posix_spawn", "os.fork", "os.forkpty",
               "os.system", "pty.", "sys._current_frames",
               "gc.get_", "sys.setprofile", "sys.settrace")
    busy = [False]

    def inside(p, root):
        return p == root or p.startswith(root.rstrip("/") + "/")

    def resolve(p):
        if isinstance(p, int) or p is None:
            return None
        return os.path.realpath(os.fsdecode(os.fspath(p)))

    def hook(event, args):
        if busy[0]:
            return
        busy[0] = True
        try:
            if event == "open":
                path, mode, flags = args
                p = resolve(path)
                if p is None:
                    return
                if isinstance(mode, str):
                    writing = any(c in mode for c in "wax+")
                else:
                    writing = bool((flags or 0) & write_flags)
                if writing:
                    if not inside(p, workdir):
                        raise PermissionError("write outside the working directory denied: " + p)
                elif not any(inside(p, r) for r in roots):
                    raise PermissionError("read denied: " + p)
            elif event in mutating:
                for i in mutating[event]:
                    p = resolve(args[i]) if i < len(args) else None
                    if p is not None and not inside(p, workdir):
                        raise PermissionError(event + " outside the working directory denied: " + p)
            elif event == "ctypes.dlopen":
                p = resolve(args[0]) if args and args[0] and os.sep in str(args[0]) else None
                if p is not None and not any(inside(p, r) for r in roots):
                    raise PermissionError("ctypes.dlopen denied: " + p)
            elif event.startswith("socket."):
                raise PermissionError("network access denied")
            elif event.startswith(blocked):
                raise PermissionError(event + " denied")
        finally:
            busy[0] = False

    sys.argv = ["main.py", data_arg]
    code = compile(src, "main.py", "exec")
    sys.addaudithook(hook)
    return code

_anaqa_code = _anaqa_guard()
del _anaqa_guard
exec(_anaqa_code, {"__name__": "__main__", "__file__": "main.py", "__builtins__": __builtins__})
"#;

/// Resolves the data path, confined to `root` when given.
pub fn check_request(request: &SandboxRequest, root: Option<&Path>) -> Result<PathBuf, String> {
    if request.wall_ms == 0 || request.memory_mb == 0 {
        return Err("wall_ms and memory_mb must be positive".into());
    }
    let data = Path::new(&request.data_path)
        .canonicalize()
        .map_err(|e| format!("data_path {}: {e}", request.data_path))?;
    if !data.is_file() {
        return Err(format!("data_path {} is not a file", request.data_path));
    }
    if let Some(root) = root {
        let root = root.canonicalize().map_err(|e| format!("run dir {}: {e}", root.display()))?;
        if !data.starts_with(&root) {
            return Err(format!("data_path {} is outside the run directory", data.display()));
        }
    }
    Ok(data)
}

fn read_capped(mut r: impl Read, cap: usize) -> String {
    let mut kept = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        match r.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    String::from_utf8_lossy(&kept).into_owned()
}

/// Runs programs with the local `python3` under a guard preamble that denies
/// sockets, process spawning and file access outside the working directory,
/// plus an address-space rlimit and a wall-clock kill of the process group.
#[derive(Debug, Clone)]
pub struct LocalPythonSandbox {
    python: PathBuf,
    confine_to: Option<PathBuf>,
    output_cap: usize,
}

impl Default for LocalPythonSandbox {
    fn default() -> Self {
        Self {
            python: PathBuf::from("python3"),
            confine_to: None,
            output_cap: OUTPUT_CAP_BYTES,
        }
    }
}

impl LocalPythonSandbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_python(mut self, python: impl Into<PathBuf>) -> Self {
        self.python = python.into();
        self
    }

    /// Rejects requests whose data file lies outside `dir`.
    pub fn confined_to(mut self, dir: impl Into<PathBuf>) -> Self {
        self.confine_to = Some(dir.into());
        self
    }

    pub fn with_output_cap(mut self, bytes: usize) -> Self {
        self.output_cap = bytes;
        self
    }
}

impl SandboxRunner for LocalPythonSandbox {
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxReply, SandboxError> {
        use std::os::unix::process::CommandExt;

        let data = match check_request(request, self.confine_to.as_deref()) {
            Ok(d) => d,
            Err(msg) => return Ok(SandboxReply::protocol_error(msg)),
        };
        let workdir = tempfile::Builder::new().prefix("anaqa-sbx-").tempdir()?;
        let guard_path = workdir.path().join(".anaqa_guard.py");
        let code_path = workdir.path().join("main.py");
        std::fs::write(&guard_path, GUARD)?;
        std::fs::write(&code_path, &request.code)?;

        let memory_bytes = request.memory_mb.saturating_mul(1024 * 1024) as libc::rlim_t;
        let cpu_secs = (request.wall_ms / 1000 + 2) as libc::rlim_t;
        let mut cmd = Command::new(&self.python);
        cmd.arg("-I")
            .arg("-B")
            .arg("-X")
            .arg("utf8")
            .arg(&guard_path)
            .arg(&data)
            .arg(&code_path)
            .current_dir(workdir.path())
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", workdir.path())
            .env("LANG", "C.UTF-8")
            .env("OPENBLAS_NUM_THREADS", "1")
            .env("OMP_NUM_THREADS", "1")
            .env(DATA_PATH_ENV, &data)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        // SAFETY: only async-signal-safe libc calls run between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                libc::setsid();
                let set = |res, v: libc::rlim_t| {
                    let lim = libc::rlimit {
                        rlim_cur: v,
                        rlim_max: v,
                    };
                    libc::setrlimit(res, &lim)
                };
                if set(libc::RLIMIT_AS, memory_bytes) != 0 || set(libc::RLIMIT_CPU, cpu_secs) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                set(libc::RLIMIT_CORE, 0);
                Ok(())
            });
        }
        let start = Instant::now();
        let mut child = cmd
            .spawn()
            .map_err(|e| SandboxError::Unavailable(format!("{}: {e}", self.python.display())))?;
        let pid = child.id() as libc::pid_t;
        let cap = self.output_cap;
        let out = child.stdout.take().expect("piped");
        let err = child.stderr.take().expect("piped");
        let out_t = std::thread::spawn(move || read_capped(out, cap));
        let err_t = std::thread::spawn(move || read_capped(err, cap));

        let deadline = Duration::from_millis(request.wall_ms);
        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() >= deadline {
                timed_out = true;
                // SAFETY: plain syscall on the child's own process group.
                unsafe {
                    libc::killpg(pid, libc::SIGKILL);
                }
                break child.wait()?;
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        // Descendants cannot outlive the run: the guard forbids spawning and
        // the group is killed here regardless.
        // SAFETY: as above.
        unsafe {
            libc::killpg(pid, libc::SIGKILL);
        }
        let wall_ms = start.elapsed().as_millis() as u64;
        let stdout = out_t.join().unwrap_or_default();
        let mut stderr = err_t.join().unwrap_or_default();
        let exit_code = if timed_out {
            stderr.push_str(&format!("\nwall-clock limit of {} ms exceeded\n", request.wall_ms));
            TIMEOUT_EXIT
        } else {
            use std::os::unix::process::ExitStatusExt;
            status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
        };
        Ok(SandboxReply {
            stdout,
            stderr,
            exit_code,
            wall_ms,
            timed_out,
        })
    }
}

/// Primary-side stand-in that answers from a closure and executes nothing.
pub struct StubSandbox<F> {
    reply: F,
}

impl<F> StubSandbox<F>
where
    F: Fn(&SandboxRequest) -> SandboxReply + Send + Sync,
{
    pub fn new(reply: F) -> Self {
        Self { reply }
    }
}

impl<F> SandboxRunner for StubSandbox<F>
where
    F: Fn(&SandboxRequest) -> SandboxReply + Send + Sync,
{
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxReply, SandboxError> {
        Ok((self.reply)(request))
    }
}

impl SandboxReply {
    /// Successful run printing `stdout`.
    pub fn success(stdout: impl Into<String>) -> Self {
        Self {
            stdout: stdout.into(),
            stderr: String::new(),
            exit_code: 0,
            wall_ms: 0,
            timed_out: false,
        }
    }
}

/// Client for an external worker: one JSON request line on stdin, one JSON
/// reply line on stdout, then the worker exits.
#[derive(Debug, Clone)]
pub struct WorkerSandbox {
    program: PathBuf,
    args: Vec<String>,
    grace: Duration,
}

impl WorkerSandbox {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            grace: Duration::from_secs(5),
        }
    }

    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }
}

pub fn parse_reply(raw: &str) -> Result<SandboxReply, SandboxError> {
    let line = raw
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| SandboxError::Protocol("worker sent no reply".into()))?;
    let reply: SandboxReply =
        serde_json::from_str(line).map_err(|e| SandboxError::Protocol(format!("bad reply line: {e}")))?;
    if reply.timed_out && reply.exit_code == 0 {
        return Err(SandboxError::Protocol("timed_out reply with exit code 0".into()));
    }
    Ok(reply)
}

impl SandboxRunner for WorkerSandbox {
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxReply, SandboxError> {
        let start = Instant::now();
        use std::os::unix::process::CommandExt;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .process_group(0)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| SandboxError::Unavailable(format!("{}: {e}", self.program.display())))?;
        let mut line = serde_json::to_string(request).expect("serializable");
        line.push('\n');
        {
            let mut stdin = child.stdin.take().expect("piped");
            stdin.write_all(line.as_bytes())?;
        }
        let out = child.stdout.take().expect("piped");
        let reader = std::thread::spawn(move || read_capped(out, 4 * OUTPUT_CAP_BYTES + 4096));
        let deadline = Duration::from_millis(request.wall_ms) + self.grace;
        loop {
            if child.try_wait()?.is_some() {
                break;
            }
            if start.elapsed() >= deadline {
                // SAFETY: plain syscall on the worker's own process group.
                unsafe {
                    libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
                }
                let _ = child.wait();
                drop(reader);
                return Ok(SandboxReply {
                    stdout: String::new(),
                    stderr: "worker exceeded its wall-clock budget and was killed".into(),
                    exit_code: TIMEOUT_EXIT,
                    wall_ms: start.elapsed().as_millis() as u64,
                    timed_out: true,
                });
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        let raw = reader.join().unwrap_or_default();
        parse_reply(&raw)
    }
}

/// Worker side: reads one request line, runs it, writes one reply line.
/// Malformed requests get a protocol-error reply and nothing runs.
pub fn serve(input: impl BufRead, mut output: impl Write, runner: &dyn SandboxRunner) -> std::io::Result<()> {
    let mut line = String::new();
    let mut input = input;
    input.read_line(&mut line)?;
    let reply = match serde_json::from_str::<SandboxRequest>(line.trim()) {
        Err(e) => SandboxReply::protocol_error(format!("malformed request: {e}")),
        Ok(req) => runner
            .execute(&req)
            .unwrap_or_else(|e| SandboxReply::protocol_error(e.to_string())),
    };
    writeln!(output, "{}", serde_json::to_string(&reply).expect("serializable"))?;
    output.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(dir: &Path, code: &str, wall_ms: u64) -> SandboxRequest {
        let data = dir.join("records.json");
        if !data.exists() {
            std::fs::write(&data, r#"[{"t": "ACME", "v": 1}]"#).unwrap();
        }
        SandboxRequest {
            code: code.into(),
            data_path: data.to_string_lossy().into_owned(),
            wall_ms,
            memory_mb: 256,
        }
    }

    #[test]
    fn reads_data_via_argv_and_env() {
        let dir = tempfile::tempdir().unwrap();
        let code = "import os, sys\nprint(open(sys.argv[1]).read()[:4])\nprint(os.environ['MUDA_DATA_PATH'] == sys.argv[1])";
        let r = LocalPythonSandbox::new().execute(&request(dir.path(), code, 10_000)).unwrap();
        assert_eq!(r.exit_code, 0, "{}", r.stderr);
        assert_eq!(r.stdout, "[{\"t\nTrue\n");
    }

    #[test]
    fn exception_surfaces() {
        let dir = tempfile::tempdir().unwrap();
        let r = LocalPythonSandbox::new()
            .execute(&request(dir.path(), "raise ValueError('bad')", 10_000))
            .unwrap();
        assert_ne!(r.exit_code, 0);
        assert!(r.stderr.contains("ValueError: bad"), "{}", r.stderr);
    }

    #[test]
    fn wall_limit() {
        let dir = tempfile::tempdir().unwrap();
        let r = LocalPythonSandbox::new()
            .execute(&request(dir.path(), "while True:\n    pass", 500))
            .unwrap();
        assert!(r.timed_out);
        assert_eq!(r.exit_code, TIMEOUT_EXIT);
        assert!(r.wall_ms < 1000, "{}", r.wall_ms);
    }

    #[test]
    fn memory_limit() {
        let dir = tempfile::tempdir().unwrap();
        let code = "x = []\nwhile True:\n    x.append(bytearray(10_000_000))";
        let mut req = request(dir.path(), code, 20_000);
        req.memory_mb = 128;
        let r = LocalPythonSandbox::new().execute(&req).unwrap();
        assert!(!r.timed_out);
        assert_ne!(r.exit_code, 0);
        assert!(r.stderr.contains("MemoryError"), "{}", r.stderr);
    }

    #[test]
    fn denials() {
        let dir = tempfile::tempdir().unwrap();
        let sbx = LocalPythonSandbox::new();
        let cases = [
            ("import socket\nsocket.socket()", "network access denied"),
            ("import subprocess\nsubprocess.run(['true'])", "denied"),
            ("import os\nos.system('true')", "denied"),
            ("open('/etc/passwd').read()", "read denied"),
        ];
        for (code, needle) in cases {
            let r = sbx.execute(&request(dir.path(), code, 10_000)).unwrap();
            assert_ne!(r.exit_code, 0, "{code}");
            assert!(r.stderr.contains(needle), "{code}: {}", r.stderr);
        }
        let target = dir.path().join("escaped.txt");
        let code = format!("open({:?}, 'w').write('x')", target.to_str().unwrap());
        let r = sbx.execute(&request(dir.path(), &code, 10_000)).unwrap();
        assert_ne!(r.exit_code, 0);
        assert!(!target.exists());
        let r = sbx
            .execute(&request(dir.path(), "open('local.txt', 'w').write('ok')\nprint(open('local.txt').read())", 10_000))
            .unwrap();
        assert_eq!(r.stdout, "ok\n", "{}", r.stderr);
    }

    #[test]
    fn confinement_and_bad_requests() {
        let run = tempfile::tempdir().unwrap();
        let other = tempfile::tempdir().unwrap();
        let sbx = LocalPythonSandbox::new().confined_to(run.path());
        let r = sbx.execute(&request(other.path(), "print(1)", 1000)).unwrap();
        assert_eq!(r.exit_code, PROTOCOL_EXIT);
        assert!(r.stdout.is_empty());
        let mut req = request(run.path(), "print(1)", 1000);
        req.wall_ms = 0;
        assert_eq!(sbx.execute(&req).unwrap().exit_code, PROTOCOL_EXIT);
    }

    #[test]
    fn output_is_capped() {
        let dir = tempfile::tempdir().unwrap();
        let r = LocalPythonSandbox::new()
            .with_output_cap(1000)
            .execute(&request(dir.path(), "print('x' * 100000)", 10_000))
            .unwrap();
        assert_eq!(r.stdout.len(), 1000);
    }

    #[test]
    fn serve_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path(), "print('hi')", 10_000);
        let line = serde_json::to_string(&req).unwrap() + "\n";
        let mut out = Vec::new();
        serve(line.as_bytes(), &mut out, &LocalPythonSandbox::new()).unwrap();
        let reply = parse_reply(std::str::from_utf8(&out).unwrap()).unwrap();
        assert_eq!(reply.stdout, "hi\n");

        let mut out = Vec::new();
        serve("{not json\n".as_bytes(), &mut out, &LocalPythonSandbox::new()).unwrap();
        assert_eq!(parse_reply(std::str::from_utf8(&out).unwrap()).unwrap().exit_code, PROTOCOL_EXIT);
    }

    #[test]
    fn reply_parsing() {
        assert!(parse_reply("").is_err());
        assert!(parse_reply("garbage").is_err());
        assert!(parse_reply(r#"{"stdout":"","stderr":"","exit_code":0,"wall_ms":1,"timed_out":true}"#).is_err());
    }

    #[test]
    fn worker_client_with_shell_stub() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("worker.sh");
        std::fs::write(
            &script,
            "#!/bin/sh\nread line\necho '{\"stdout\":\"[{\\\"t\",\"stderr\":\"\",\"exit_code\":0,\"wall_ms\":3,\"timed_out\":false}'\n",
        )
        .unwrap();
        let w = WorkerSandbox::new("sh", vec![script.to_string_lossy().into_owned()]);
        let r = w.execute(&request(dir.path(), "x", 1000)).unwrap();
        assert_eq!(r.stdout, "[{\"t");

        let dead = WorkerSandbox::new("sh", vec!["-c".into(), "exit 3".into()]);
        assert!(matches!(dead.execute(&request(dir.path(), "x", 1000)), Err(SandboxError::Protocol(_))));

        let hang = WorkerSandbox::new("sh", vec!["-c".into(), "sleep 30".into()]).with_grace(Duration::from_millis(100));
        let r = hang.execute(&request(dir.path(), "x", 100)).unwrap();
        assert!(r.timed_out);
        assert_eq!(r.exit_code, TIMEOUT_EXIT);

        let missing = WorkerSandbox::new("/nonexistent/worker", vec![]);
        assert!(matches!(missing.execute(&request(dir.path(), "x", 100)), Err(SandboxError::Unavailable(_))));
    }
}
