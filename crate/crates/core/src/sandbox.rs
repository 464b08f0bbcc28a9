//! Subprocess execution with a scrubbed environment, wall-clock timeout,
//! capped output capture, and write containment.
//!
//! Containment has two layers. Before spawning, [`scan_write_escapes`]
//! rejects command or script text whose obvious write targets leave the
//! workspace. On Linux the child additionally restricts itself with
//! Landlock so that writes outside the workspace (and a few device files)
//! fail at the kernel; on kernels without Landlock the static scan is the
//! only guard.

use std::io::Read;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_OUTPUT_CAP: usize = 1 << 20;
pub const ENV_ALLOWLIST: &[&str] = &["PATH", "HOME", "LANG"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxConfig {
    pub timeout: Duration,
    pub output_cap: usize,
    pub env_allowlist: Vec<String>,
    /// Kernel-level write restriction where available.
    pub restrict_writes: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            timeout: DEFAULT_TIMEOUT,
            output_cap: DEFAULT_OUTPUT_CAP,
            env_allowlist: ENV_ALLOWLIST.iter().map(|s| s.to_string()).collect(),
            restrict_writes: true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SandboxError {
    #[error("could not start process: {0}")]
    Spawn(String),
    #[error("write target escapes the workspace: {0}")]
    PathEscape(String),
    #[error("workspace is not usable: {0}")]
    Workspace(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub timed_out: bool,
    pub duration_ms: u64,
    /// `landlock` when the kernel enforced write containment, else `static`.
    pub containment: String,
}

impl ExecOutcome {
    pub fn success(&self) -> bool {
        !self.timed_out && self.exit_code == Some(0)
    }
}

/// Interpreter argv for a script, from its extension or shebang. `None`
/// means the file is executed directly.
pub fn interpreter_for(path: &str, text: &str) -> Option<Vec<String>> {
    let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase());
    let by_ext = match ext.as_deref() {
        Some("py") => Some("python3"),
        Some("sh") | Some("bash") => Some("bash"),
        Some("js") | Some("mjs") | Some("cjs") => Some("node"),
        Some("rb") => Some("ruby"),
        Some("pl") => Some("perl"),
        _ => None,
    };
    if let Some(i) = by_ext {
        return Some(vec![i.to_string()]);
    }
    let first = text.lines().next()?.strip_prefix("#!")?;
    let mut parts: Vec<String> = first.split_whitespace().map(str::to_string).collect();
    if parts.first().is_some_and(|p| p.ends_with("/env")) {
        parts.remove(0);
        if parts.first().is_some_and(|p| p == "-S") {
            parts.remove(0);
        }
    }
    (!parts.is_empty()).then_some(parts)
}

const DEVICE_TARGETS: &[&str] = &["/dev/null", "/dev/stdout", "/dev/stderr", "/dev/tty"];

/// True when `target` (as written in a command) would land outside the
/// workspace.
pub fn escapes_workspace(target: &str) -> bool {
    let t = target.trim_matches(|c| c == '"' || c == '\'');
    if t.is_empty() || DEVICE_TARGETS.contains(&t) || t.starts_with('$') || t.starts_with('&') {
        return false;
    }
    if t.starts_with('/') || t.starts_with('~') {
        return true;
    }
    let mut depth: i64 = 0;
    for c in Path::new(t).components() {
        match c {
            Component::ParentDir => depth -= 1,
            Component::Normal(_) => depth += 1,
            _ => {}
        }
        if depth < 0 {
            return true;
        }
    }
    false
}

fn quoted_literals(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let q = bytes[i];
        if q == b'"' || q == b'\'' {
            if let Some(rel) = text[i + 1..].find(q as char) {
                out.push(&text[i + 1..i + 1 + rel]);
                i += rel + 2;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Finds an obvious write target outside the workspace: shell redirects,
/// `tee`/`touch`/`mkdir`/`cp`/`mv` arguments, and path literals passed to
/// write-mode `open(...)` or `Path(...).write_*`.
pub fn scan_write_escapes(text: &str) -> Option<String> {
    for line in text.lines() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        for (k, tok) in tokens.iter().enumerate() {
            let redirect = tok.trim_start_matches(|c: char| c.is_ascii_digit());
            if let Some(rest) = redirect.strip_prefix(">>").or_else(|| redirect.strip_prefix('>')) {
                if rest.starts_with('&') || rest.starts_with('=') {
                    continue;
                }
                let target = if rest.is_empty() { tokens.get(k + 1).copied() } else { Some(rest) };
                if let Some(t) = target.filter(|t| escapes_workspace(t)) {
                    return Some(t.to_string());
                }
            }
            let base = tok.rsplit('/').next().unwrap_or(tok);
            if matches!(base, "tee" | "touch" | "mkdir") {
                if let Some(t) = tokens[k + 1..]
                    .iter()
                    .take_while(|t| !matches!(**t, "|" | ";" | "&&" | "||"))
                    .find(|t| !t.starts_with('-') && escapes_workspace(t))
                {
                    return Some(t.to_string());
                }
            }
            if matches!(base, "cp" | "mv") && k == 0 {
                let args: Vec<&&str> = tokens[1..]
                    .iter()
                    .take_while(|t| !matches!(**t, "|" | ";" | "&&" | "||"))
                    .filter(|t| !t.starts_with('-'))
                    .collect();
                if let Some(dest) = args.last().filter(|t| args.len() >= 2 && escapes_workspace(t)) {
                    return Some(dest.to_string());
                }
            }
        }
        let writes_py = (line.contains("open(")
            && ["'w", "\"w", "'a", "\"a", "'x", "\"x", "mode="].iter().any(|m| line.contains(m)))
            || line.contains(".write_text(")
            || line.contains(".write_bytes(")
            || line.contains("writeFile");
        if writes_py {
            if let Some(t) = quoted_literals(line)
                .into_iter()
                .find(|l| (l.contains('/') || l.starts_with("..")) && escapes_workspace(l))
            {
                return Some(t.to_string());
            }
        }
    }
    None
}

fn capture<R: Read + Send + 'static>(mut r: R, cap: usize) -> thread::JoinHandle<(Vec<u8>, bool)> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        loop {
            match r.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    if n > room {
                        truncated = true;
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        (kept, truncated)
    })
}

#[cfg(target_os = "linux")]
mod contain {
    use std::path::Path;
    use std::sync::Mutex;

    use landlock::{
        path_beneath_rules, AccessFs, Ruleset, RulesetAttr, RulesetCreated,
        RulesetCreatedAttr, ABI,
    };

    /// Builds the ruleset in the parent; the child only calls
    /// `restrict_self`.
    pub fn prepare(workspace: &Path) -> Option<Mutex<Option<RulesetCreated>>> {
        let abi = ABI::V5;
        let write = AccessFs::from_write(abi);
        let ruleset = Ruleset::default()
            .handle_access(write)
            .ok()?
            .create()
            .ok()?
            .add_rules(path_beneath_rules(
                [workspace, Path::new("/dev/null")],
                write,
            ))
            .ok()?;
        Some(Mutex::new(Some(ruleset)))
    }

    pub fn supported() -> bool {
        probe_abi() > 0
    }

    fn probe_abi() -> i64 {
        // landlock_create_ruleset(NULL, 0, LANDLOCK_CREATE_RULESET_VERSION)
        unsafe { libc::syscall(libc::SYS_landlock_create_ruleset, std::ptr::null::<u8>(), 0usize, 1u32) }
    }
}

/// Runs `argv` with working directory `workspace`.
pub fn run(argv: &[String], workspace: &Path, cfg: &SandboxConfig) -> Result<ExecOutcome, SandboxError> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| SandboxError::Spawn("empty command".to_string()))?;
    let workspace: PathBuf = workspace
        .canonicalize()
        .map_err(|e| SandboxError::Workspace(format!("{}: {e}", workspace.display())))?;

    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(&workspace)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    for key in &cfg.env_allowlist {
        if let Ok(v) = std::env::var(key) {
            cmd.env(key, v);
        }
    }
    let tmp = workspace.join(".skillc_tmp");
    if std::fs::create_dir_all(&tmp).is_ok() {
        cmd.env("TMPDIR", &tmp);
    }

    let mut containment = "static";
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
        #[cfg(target_os = "linux")]
        if cfg.restrict_writes && contain::supported() {
            if let Some(slot) = contain::prepare(&workspace) {
                containment = "landlock";
                unsafe {
                    cmd.pre_exec(move || {
                        let taken = slot.lock().ok().and_then(|mut g| g.take());
                        match taken {
                            Some(rs) => rs
                                .restrict_self()
                                .map(|_| ())
                                .map_err(|_| std::io::Error::from_raw_os_error(libc::EPERM)),
                            None => Err(std::io::Error::from_raw_os_error(libc::EPERM)),
                        }
                    });
                }
            }
        }
    }

    let started = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| SandboxError::Spawn(format!("{program}: {e}")))?;
    let out = capture(child.stdout.take().expect("piped stdout"), cfg.output_cap);
    let err = capture(child.stderr.take().expect("piped stderr"), cfg.output_cap);

    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(s)) => break Some(s),
            Ok(None) if started.elapsed() >= cfg.timeout => {
                timed_out = true;
                #[cfg(unix)]
                unsafe {
                    libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
                }
                let _ = child.kill();
                break child.wait().ok();
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(_) => break None,
        }
    };
    let (stdout, stdout_truncated) = out.join().unwrap_or_default();
    let (stderr, stderr_truncated) = err.join().unwrap_or_default();
    Ok(ExecOutcome {
        exit_code: status.and_then(|s| s.code()),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
        stdout_truncated,
        stderr_truncated,
        timed_out,
        duration_ms: started.elapsed().as_millis() as u64,
        containment: containment.to_string(),
    })
}

/// Runs a shell command line via `sh -c`.
pub fn run_shell(command: &str, workspace: &Path, cfg: &SandboxConfig) -> Result<ExecOutcome, SandboxError> {
    if let Some(t) = scan_write_escapes(command) {
        return Err(SandboxError::PathEscape(t));
    }
    run(&["sh".to_string(), "-c".to_string(), command.to_string()], workspace, cfg)
}
