//! Validation evidence: syntax checks, package self-tests and external
//! attestations.

use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Binding, BoundaryContract, ValidationEvidence, ValidationLevel};
use crate::package::{decode_text, SkillPackage};
use crate::sandbox::{self, interpreter_for, SandboxConfig};

pub const SELF_TEST_TIMEOUT: Duration = Duration::from_secs(20);
const SYNTAX_TIMEOUT: Duration = Duration::from_secs(10);

/// Evidence supplied from outside the package (a verifier or a regression
/// suite run by the caller).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attestation {
    pub operator: String,
    pub level: ValidationLevel,
    pub description: String,
}

fn checker(interpreter: &str) -> Option<Vec<&'static str>> {
    let base = interpreter.rsplit('/').next().unwrap_or(interpreter);
    Some(match base {
        b if b.starts_with("python") => vec!["python3", "-c", "import ast,sys; ast.parse(open(sys.argv[1],'rb').read())"],
        "bash" => vec!["bash", "-n"],
        "sh" | "dash" => vec!["sh", "-n"],
        "node" => vec!["node", "--check"],
        "ruby" => vec!["ruby", "-c"],
        "perl" => vec!["perl", "-c"],
        _ => return None,
    })
}

/// Parses a script with its language's own checker. `None` when no
/// checker applies or the checker is not installed.
pub fn script_syntax_check(path: &str, text: &str) -> Option<Result<(), String>> {
    let interp = interpreter_for(path, text)?;
    let argv = checker(interp.first()?)?;
    let ws = tempfile::tempdir().ok()?;
    let file = ws.path().join("script");
    fs::write(&file, text).ok()?;
    let mut full: Vec<String> = argv.iter().map(|s| s.to_string()).collect();
    full.push(file.to_string_lossy().into_owned());
    let cfg = SandboxConfig { timeout: SYNTAX_TIMEOUT, ..SandboxConfig::default() };
    let out = sandbox::run(&full, ws.path(), &cfg).ok()?;
    if out.success() {
        Some(Ok(()))
    } else if out.exit_code == Some(127) || out.stderr.contains("not found") && out.exit_code.is_none() {
        None
    } else {
        Some(Err(out.stderr.lines().next().unwrap_or("syntax error").to_string()))
    }
}

fn stem(path: &str) -> &str {
    let file = path.rsplit('/').next().unwrap_or(path);
    file.split_once('.').map(|(s, _)| s).unwrap_or(file)
}

/// Script assets that look like tests for `script`.
fn self_tests<'a>(package: &'a SkillPackage, script: &str) -> Vec<&'a str> {
    let s = stem(script);
    package
        .assets
        .iter()
        .map(|a| a.path.as_str())
        .filter(|p| *p != script)
        .filter(|p| {
            let t = stem(p);
            t == format!("test_{s}") || t == format!("{s}_test")
        })
        .collect()
}

fn materialize(package: &SkillPackage, dir: &Path) -> bool {
    for record in &package.assets {
        let Ok(bytes) = package.read_asset(record) else { return false };
        let dest = dir.join(&record.path);
        if let Some(parent) = dest.parent() {
            if fs::create_dir_all(parent).is_err() {
                return false;
            }
        }
        if fs::write(&dest, bytes).is_err() {
            return false;
        }
    }
    true
}

fn run_self_test(package: &SkillPackage, test: &str) -> bool {
    let Some(record) = package.asset(test) else { return false };
    let Some(text) = package.read_asset(record).ok().and_then(|b| decode_text(&b)) else {
        return false;
    };
    let Ok(ws) = tempfile::tempdir() else { return false };
    if !materialize(package, ws.path()) {
        return false;
    }
    let mut argv = interpreter_for(test, &text).unwrap_or_default();
    argv.push(test.to_string());
    let cfg = SandboxConfig { timeout: SELF_TEST_TIMEOUT, ..SandboxConfig::default() };
    sandbox::run(&argv, ws.path(), &cfg).is_ok_and(|o| o.success())
}

/// Records evidence on every operator, then recomputes the contract level.
/// Returns attestations that named no operator.
pub fn attach_evidence(
    contract: &mut BoundaryContract,
    package: &SkillPackage,
    attestations: &[Attestation],
) -> Vec<Attestation> {
    for op in &mut contract.operators {
        match &op.binding {
            Binding::Script { asset_path, .. } => {
                let text = package
                    .asset(asset_path)
                    .and_then(|r| package.read_asset(r).ok())
                    .and_then(|b| decode_text(&b));
                if let Some(text) = text {
                    if let Some(Ok(())) = script_syntax_check(asset_path, &text) {
                        op.evidence.push(ValidationEvidence::new(
                            ValidationLevel::Syntactic,
                            format!("{asset_path} parses"),
                        ));
                    }
                }
                for test in self_tests(package, asset_path) {
                    if run_self_test(package, test) {
                        op.evidence.push(ValidationEvidence::new(
                            ValidationLevel::ExecutableTest,
                            format!("self-test {test} passed"),
                        ));
                    }
                }
            }
            Binding::Command { template } => {
                let cfg = SandboxConfig { timeout: SYNTAX_TIMEOUT, ..SandboxConfig::default() };
                let ok = tempfile::tempdir().ok().and_then(|ws| {
                    let argv = vec!["sh".to_string(), "-n".to_string(), "-c".to_string(), template.clone()];
                    sandbox::run(&argv, ws.path(), &cfg).ok()
                });
                if ok.is_some_and(|o| o.success()) {
                    op.evidence.push(ValidationEvidence::new(ValidationLevel::Syntactic, "command parses"));
                }
            }
            _ => {}
        }
    }
    let mut unmatched = Vec::new();
    for a in attestations {
        match contract.operators.iter_mut().find(|o| o.name == a.operator) {
            Some(op) => op.evidence.push(ValidationEvidence::new(a.level, a.description.clone())),
            None => unmatched.push(a.clone()),
        }
    }
    contract.refresh_validation_level();
    unmatched
}
