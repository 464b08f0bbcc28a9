//! Per-invocation runtime: select an operator, check policy, then execute
//! or degrade. Every path ends in an [`Envelope`].

mod deopt;
mod workflow;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use deopt::{get_skill_asset, list_skill_assets, search_skill_docs};
pub use workflow::{run_workflow, state_path, CachedOutput, ExecutionState, NodeStatus, RunContext};

use crate::contract::{
    ArgvPart, Binding, BoundaryContract, DeoptOperation, FallbackCapsule, OperatorKind, OperatorSpec, Outcome,
};
use crate::digest::Digest;
use crate::lowering::{placeholder_spans, LoweringOutput};
use crate::provenance::SourceRef;
use crate::sandbox::{self, interpreter_for, ExecOutcome, SandboxConfig, SandboxError};
use crate::store::CompiledArtifact;
use crate::terms::terms;

/// Handle-stage budget in estimated tokens.
pub const HANDLE_TOKEN_BUDGET: usize = 300;
pub const STATE_DIR: &str = ".skillc_state";
pub const ASSET_DIR: &str = ".skillc_assets";
const LOCK_FILE: &str = "workspace.lock";
const GUIDANCE_CHUNKS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("unknown operator: {0}")]
    UnknownOperator(String),
}

/// `ceil(bytes / 4)`.
pub fn estimate_tokens(text: &[u8]) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DisclosureStage {
    #[default]
    Handle,
    Summary,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationRequest {
    pub intent_text: String,
    pub named_arguments: BTreeMap<String, String>,
    pub requested_operator: Option<String>,
    pub workspace: PathBuf,
    pub disclosure_stage: DisclosureStage,
    /// Manual or model-assisted workflow steps the caller reports as done.
    #[serde(default)]
    pub completed_steps: Vec<String>,
}

impl InvocationRequest {
    pub fn new(workspace: impl Into<PathBuf>) -> Self {
        InvocationRequest {
            intent_text: String::new(),
            named_arguments: BTreeMap::new(),
            requested_operator: None,
            workspace: workspace.into(),
            disclosure_stage: DisclosureStage::Handle,
            completed_steps: Vec::new(),
        }
    }

    pub fn operator(mut self, name: &str) -> Self {
        self.requested_operator = Some(name.to_string());
        self
    }

    pub fn intent(mut self, text: &str) -> Self {
        self.intent_text = text.to_string();
        self
    }

    pub fn arg(mut self, name: &str, value: &str) -> Self {
        self.named_arguments.insert(name.to_string(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeoptHint {
    pub operator: String,
    pub arguments: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub outcome: Outcome,
    pub reason: String,
    pub deopt_hints: Vec<DeoptHint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Blocked,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contribution {
    Executed,
    Guidance,
    Fallback,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub event: String,
    pub step_id: Option<String>,
    /// RFC 3339.
    pub timestamp: String,
    pub provenance: Vec<SourceRef>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl TraceEvent {
    pub fn new(event: &str, detail: impl Into<String>) -> Self {
        TraceEvent {
            event: event.to_string(),
            step_id: None,
            timestamp: now(),
            provenance: Vec::new(),
            detail: detail.into(),
        }
    }

    pub fn step(mut self, id: &str) -> Self {
        self.step_id = Some(id.to_string());
        self
    }

    pub fn refs(mut self, refs: &[SourceRef]) -> Self {
        self.provenance = refs.to_vec();
        self
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub status: Status,
    pub contribution_type: Contribution,
    pub selected_operator: Option<String>,
    pub output: Value,
    pub trace: Vec<TraceEvent>,
    pub continuation_required: bool,
}

impl Envelope {
    fn new(status: Status, contribution: Contribution, op: Option<&str>, output: Value, trace: Vec<TraceEvent>) -> Self {
        let continuation_required = status != Status::Ok
            || matches!(contribution, Contribution::Guidance | Contribution::Partial | Contribution::Fallback);
        Envelope {
            status,
            contribution_type: contribution,
            selected_operator: op.map(str::to_string),
            output,
            trace,
            continuation_required,
        }
    }

    fn error(op: Option<&str>, contribution: Contribution, message: String, mut trace: Vec<TraceEvent>) -> Self {
        trace.push(TraceEvent::new("error", message.clone()));
        Envelope::new(Status::Error, contribution, op, json!({ "error": message }), trace)
    }

    /// The type-level invariants every envelope must satisfy.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.status == Status::Blocked && !self.continuation_required {
            return Err("blocked without continuation".into());
        }
        if self.contribution_type == Contribution::Guidance && !self.continuation_required {
            return Err("guidance without continuation".into());
        }
        if self.trace.is_empty() {
            return Err("empty trace".into());
        }
        for e in &self.trace {
            if chrono::DateTime::parse_from_rfc3339(&e.timestamp).is_err() {
                return Err(format!("bad timestamp {}", e.timestamp));
            }
        }
        let v = serde_json::to_value(self).map_err(|e| e.to_string())?;
        let keys: BTreeSet<&str> = v.as_object().map(|o| o.keys().map(String::as_str).collect()).unwrap_or_default();
        let want = BTreeSet::from([
            "status",
            "contribution_type",
            "selected_operator",
            "output",
            "trace",
            "continuation_required",
        ]);
        if keys != want {
            return Err(format!("envelope fields {keys:?}"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- disclosure

fn render_handle(artifact: &CompiledArtifact) -> String {
    format!("{}: {}\n", artifact.summary.handle, artifact.summary.one_line)
}

fn render_summary(artifact: &CompiledArtifact) -> String {
    let s = &artifact.summary;
    let risks: Vec<&str> = s.risk_flags.iter().map(|r| r.as_str()).collect();
    format!(
        "{}boundary: {}\noperators: {}\nrisks: {}\nvalidation: {}\n",
        render_handle(artifact),
        s.boundary_type,
        s.operator_names.join(", "),
        if risks.is_empty() { "none".to_string() } else { risks.join(", ") },
        s.validation_level,
    )
}

fn render_operator(op: &OperatorSpec, out: &mut String) {
    let args: Vec<String> = op
        .argument_schema
        .iter()
        .map(|a| format!("{}:{}{}", a.name, a.tag.as_str(), if a.required { "" } else { "?" }))
        .collect();
    let outputs: Vec<String> = op.output_schema.iter().map(|f| format!("{}:{}", f.name, f.tag.as_str())).collect();
    out.push_str(&format!("- {} [{}] ({}) -> ({})", op.name, op.kind.as_str(), args.join(", "), outputs.join(", ")));
    if !op.risk.is_empty() {
        let r: Vec<&str> = op.risk.iter().map(|r| r.as_str()).collect();
        out.push_str(&format!(" risk={}", r.join("+")));
    }
    if op.is_executable() {
        out.push_str(&format!(" evidence={}", op.evidence_level()));
    }
    out.push('\n');
    if !op.description.is_empty() {
        out.push_str(&format!("  {}\n", op.description));
    }
}

fn render_full(artifact: &CompiledArtifact) -> String {
    let c = &artifact.contract;
    let mut out = render_summary(artifact);
    out.push_str("operator schemas:\n");
    for op in &c.operators {
        render_operator(op, &mut out);
    }
    let p = &c.action_policy;
    let set = |s: &BTreeSet<crate::risk::RiskFlag>| s.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(", ");
    out.push_str(&format!(
        "policy: default={} deny=[{}] guidance=[{}] min_validation={}\n",
        p.default_outcome.as_str(),
        set(&p.deny_risks),
        set(&p.guidance_risks),
        p.min_validation_for_execute
    ));
    let mut by_op: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for h in &c.selection_policy.keyword_hints {
        by_op.entry(h.operator.as_str()).or_default().push(format!("{}({})", h.keyword, h.weight));
    }
    if !by_op.is_empty() {
        out.push_str("hints:\n");
        for (op, ks) in by_op {
            out.push_str(&format!("  {op}: {}\n", ks.join(" ")));
        }
    }
    if let Some(d) = &c.selection_policy.default_operator {
        out.push_str(&format!("default operator: {d}\n"));
    }
    out.push_str(&format!(
        "fallback: {} via {}\n",
        c.fallback.capsule_id.short(12),
        c.fallback.deopt_operators.join(", ")
    ));
    out
}

/// Staged disclosure: each stage extends the previous one.
pub fn disclose(artifact: &CompiledArtifact, stage: DisclosureStage) -> String {
    match stage {
        DisclosureStage::Handle => render_handle(artifact),
        DisclosureStage::Summary => render_summary(artifact),
        DisclosureStage::Full => render_full(artifact),
    }
}

// ----------------------------------------------------------------- selection

/// Explicit request first, then keyword-hint weight against the intent
/// (ties lexicographic), then the contract default.
pub fn select_operator(
    contract: &BoundaryContract,
    request: &InvocationRequest,
) -> Result<Option<String>, RuntimeError> {
    if let Some(name) = &request.requested_operator {
        return match contract.operator(name) {
            Some(op) => Ok(Some(op.name.clone())),
            None => Err(RuntimeError::UnknownOperator(name.clone())),
        };
    }
    let intent: BTreeSet<String> = terms(&request.intent_text).collect();
    let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
    for h in &contract.selection_policy.keyword_hints {
        if intent.contains(&h.keyword) && contract.operator(&h.operator).is_some() {
            *totals.entry(h.operator.as_str()).or_default() += h.weight;
        }
    }
    // BTreeMap iterates names ascending, so strict `>` keeps the smallest
    // name among equal weights.
    let mut best: Option<(&str, f64)> = None;
    for (name, w) in totals {
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((name, w));
        }
    }
    if let Some((name, _)) = best {
        return Ok(Some(name.to_string()));
    }
    Ok(contract
        .selection_policy
        .default_operator
        .as_ref()
        .filter(|d| contract.operator(d).is_some())
        .cloned())
}

// -------------------------------------------------------------------- policy

fn deopt_hints(op: &OperatorSpec) -> Vec<DeoptHint> {
    let mut hints = vec![DeoptHint { operator: "list_skill_assets".into(), arguments: BTreeMap::new() }];
    let path = match &op.binding {
        Binding::Script { asset_path, .. } => Some(asset_path.clone()),
        _ => op.source_refs.iter().find_map(|r| match &r.asset_path {
            crate::provenance::SourceDoc::Asset(p) => Some(p.clone()),
            crate::provenance::SourceDoc::Entry => None,
        }),
    };
    let mut get_args = BTreeMap::new();
    if let Some(p) = path {
        get_args.insert("path".to_string(), p);
    }
    hints.push(DeoptHint { operator: "get_skill_asset".into(), arguments: get_args });
    hints.push(DeoptHint {
        operator: "search_skill_docs".into(),
        arguments: BTreeMap::from([("query".to_string(), op.name.replace('_', " "))]),
    });
    hints
}

/// The guarded decision for one operator.
pub fn check_policy(contract: &BoundaryContract, op: &OperatorSpec) -> PolicyOutcome {
    let policy = &contract.action_policy;
    let outcome = |outcome: Outcome, reason: String| PolicyOutcome {
        outcome,
        deopt_hints: if outcome == Outcome::Blocked { deopt_hints(op) } else { Vec::new() },
        reason,
    };
    if op.kind == OperatorKind::Deopt {
        return outcome(Outcome::Execute, "deoptimization operators always execute".into());
    }
    let denied: Vec<&str> = op.risk.intersection(&policy.deny_risks).map(|r| r.as_str()).collect();
    if !denied.is_empty() {
        return outcome(Outcome::Blocked, format!("risk denied by policy: {}", denied.join(", ")));
    }
    let guided: Vec<&str> = op.risk.intersection(&policy.guidance_risks).map(|r| r.as_str()).collect();
    if !guided.is_empty() {
        return outcome(Outcome::Guidance, format!("risk requires agent judgment: {}", guided.join(", ")));
    }
    if op.kind == OperatorKind::Guidance {
        return outcome(Outcome::Guidance, "operator is guidance-only".into());
    }
    let level = op.evidence_level();
    if level < policy.min_validation_for_execute {
        return outcome(
            Outcome::Guidance,
            format!("evidence {level} is below the required {}", policy.min_validation_for_execute),
        );
    }
    match policy.default_outcome {
        Outcome::Execute => outcome(Outcome::Execute, "allowed by policy".into()),
        other => outcome(other, format!("policy default is {}", other.as_str())),
    }
}

// ------------------------------------------------------------------ workspace

/// Exclusive per-workspace lock, released on drop.
struct WorkspaceLock(PathBuf);

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn pid_alive(pid: i32) -> bool {
    #[cfg(unix)]
    unsafe {
        libc::kill(pid, 0) == 0 || std::io::Error::last_os_error().raw_os_error() != Some(libc::ESRCH)
    }
    #[cfg(not(unix))]
    {
        let _ = pid;
        true
    }
}

fn lock_workspace(ws: &Path) -> Result<WorkspaceLock, String> {
    let dir = ws.join(STATE_DIR);
    fs::create_dir_all(&dir).map_err(|e| format!("workspace not writable: {e}"))?;
    let path = dir.join(LOCK_FILE);
    for _ in 0..2 {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = write!(f, "{}", std::process::id());
                return Ok(WorkspaceLock(path));
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<i32>().ok());
                match holder {
                    Some(pid) if pid_alive(pid) => return Err(format!("workspace busy (held by process {pid})")),
                    _ => {
                        let _ = fs::remove_file(&path);
                    }
                }
            }
            Err(e) => return Err(format!("workspace not writable: {e}")),
        }
    }
    Err("workspace busy".into())
}

/// Writes a capsule script into `<ws>/.skillc_assets/`, verifying digests.
pub(crate) fn materialize_script(capsule: &FallbackCapsule, ws: &Path, path: &str) -> Result<(PathBuf, String), String> {
    let bytes = capsule.read_asset(path).map_err(|e| e.to_string())?;
    let rel = format!("{ASSET_DIR}/{path}");
    let dest = ws.join(&rel);
    let current = fs::read(&dest).ok();
    if current.as_deref() != Some(bytes.as_slice()) {
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        fs::write(&dest, &bytes).map_err(|e| e.to_string())?;
    }
    if Digest::of(&fs::read(&dest).map_err(|e| e.to_string())?) != Digest::of(&bytes) {
        return Err(format!("{rel}: digest mismatch after materialization"));
    }
    Ok((PathBuf::from(rel), String::from_utf8_lossy(&bytes).into_owned()))
}

// ----------------------------------------------------------------- arguments

fn check_arguments(op: &OperatorSpec, args: &BTreeMap<String, String>) -> Result<(), String> {
    for spec in &op.argument_schema {
        match args.get(&spec.name) {
            None if spec.required => return Err(format!("missing required argument `{}`", spec.name)),
            Some(v) if !spec.tag.accepts(v) => {
                return Err(format!("argument `{}` is not a valid {}", spec.name, spec.tag.as_str()))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Replaces `{name}` placeholders that have a value; `quote` renders each
/// value. Placeholders without a value are left as written.
pub(crate) fn fill_placeholders(template: &str, args: &BTreeMap<String, String>, quote: impl Fn(&str) -> String) -> String {
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for (start, end, name) in placeholder_spans(template) {
        if let Some(v) = args.get(name) {
            out.push_str(&template[last..start]);
            out.push_str(&quote(v));
            last = end;
        }
    }
    out.push_str(&template[last..]);
    out
}

pub(crate) fn shell_quote(v: &str) -> String {
    if !v.is_empty() && v.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=:,+@%".contains(c)) {
        v.to_string()
    } else {
        format!("'{}'", v.replace('\'', "'\\''"))
    }
}

fn truthy(v: &str) -> bool {
    matches!(v.trim().to_ascii_lowercase().as_str(), "" | "true" | "1" | "yes")
}

fn render_argv(parts: &[ArgvPart], args: &BTreeMap<String, String>) -> Vec<String> {
    let mut out = Vec::new();
    for p in parts {
        match p {
            ArgvPart::Literal { text } => out.push(fill_placeholders(text, args, str::to_string)),
            ArgvPart::Positional { name } => out.extend(args.get(name).cloned()),
            ArgvPart::Option { flag, name } => {
                if let Some(v) = args.get(name) {
                    out.push(flag.clone());
                    out.push(v.clone());
                }
            }
            ArgvPart::Switch { flag, name } => {
                if args.get(name).is_some_and(|v| truthy(v)) {
                    out.push(flag.clone());
                }
            }
            ArgvPart::Rest { name } => {
                if let Some(v) = args.get(name) {
                    out.extend(v.split_whitespace().map(str::to_string));
                }
            }
        }
    }
    out
}

// ----------------------------------------------------------------- execution

fn process_record(op: &OperatorSpec, out: &ExecOutcome, ws: &Path) -> Value {
    let mut record = serde_json::Map::new();
    for f in &op.output_schema {
        let v = if f.name == "stdout" {
            Value::String(out.stdout.clone())
        } else {
            let p = ws.join(&f.name);
            match fs::read(&p) {
                Ok(bytes) => json!({ "path": f.name, "digest": Digest::of(&bytes).as_str() }),
                Err(_) => Value::Null,
            }
        };
        record.insert(f.name.clone(), v);
    }
    json!({
        "record": record,
        "process": {
            "exit_code": out.exit_code,
            "stdout": out.stdout,
            "stderr": out.stderr,
            "stdout_truncated": out.stdout_truncated,
            "stderr_truncated": out.stderr_truncated,
            "timed_out": out.timed_out,
            "duration_ms": out.duration_ms,
            "containment": out.containment,
        },
        "evidence_level": op.evidence_level().as_str(),
    })
}

fn finish_process(op: &OperatorSpec, result: Result<ExecOutcome, SandboxError>, ws: &Path, mut trace: Vec<TraceEvent>) -> Envelope {
    let name = Some(op.name.as_str());
    match result {
        Err(e) => Envelope::error(name, Contribution::Partial, format!("sandbox: {e}"), trace),
        Ok(out) => {
            let detail = format!(
                "exit {:?} in {} ms, containment {}, evidence {}",
                out.exit_code,
                out.duration_ms,
                out.containment,
                op.evidence_level()
            );
            trace.push(TraceEvent::new("executed", detail).refs(&op.source_refs));
            let output = process_record(op, &out, ws);
            if out.success() {
                Envelope::new(Status::Ok, Contribution::Executed, name, output, trace)
            } else {
                let why = if out.timed_out { "timed out".to_string() } else { format!("exited with {:?}", out.exit_code) };
                trace.push(TraceEvent::new("error", why));
                Envelope::new(Status::Error, Contribution::Partial, name, output, trace)
            }
        }
    }
}

fn run_deopt(capsule: &FallbackCapsule, op: DeoptOperation, args: &BTreeMap<String, String>) -> Result<Value, String> {
    match op {
        DeoptOperation::ListSkillAssets => Ok(json!({ "assets": list_skill_assets(capsule) })),
        DeoptOperation::GetSkillAsset => {
            let path = args.get("path").ok_or("missing required argument `path`")?;
            let bytes = get_skill_asset(capsule, path).map_err(|e| e.to_string())?;
            let digest = Digest::of(&bytes);
            let mut v = json!({ "path": path, "size": bytes.len(), "digest": digest.as_str() });
            match String::from_utf8(bytes) {
                Ok(text) => v["text"] = Value::String(text),
                Err(e) => v["hex"] = Value::String(hex::encode(e.as_bytes())),
            }
            Ok(v)
        }
        DeoptOperation::SearchSkillDocs => {
            let query = args.get("query").ok_or("missing required argument `query`")?;
            let limit = match args.get("limit") {
                Some(l) => l.trim().parse::<usize>().map_err(|_| format!("limit `{l}` is not a count"))?,
                None => GUIDANCE_CHUNKS,
            };
            Ok(json!({ "hits": search_skill_docs(capsule, query, limit) }))
        }
    }
}

fn guidance_output(artifact: &CompiledArtifact, query: &str, op: Option<&OperatorSpec>, reason: &str) -> Value {
    let index = &artifact.capsule.text_index;
    let mut chunks: Vec<Value> = Vec::new();
    if let Some(Binding::Guidance { chunk_ids, .. }) = op.map(|o| &o.binding) {
        for id in chunk_ids {
            if let Some(c) = index.chunk(id) {
                chunks.push(json!({ "chunk_id": c.chunk_id, "text": c.text, "asset": c.asset_path.to_string() }));
            }
        }
    }
    for hit in index.search(query, GUIDANCE_CHUNKS) {
        if !chunks.iter().any(|c| c["chunk_id"] == hit.chunk_id.as_str()) {
            chunks.push(json!({ "chunk_id": hit.chunk_id, "text": hit.text, "asset": hit.provenance.asset_path.to_string() }));
        }
    }
    if chunks.is_empty() {
        for c in index.chunks.iter().take(GUIDANCE_CHUNKS.min(3)) {
            chunks.push(json!({ "chunk_id": c.chunk_id, "text": c.text, "asset": c.asset_path.to_string() }));
        }
    }
    let mut v = json!({ "reason": reason, "chunks": chunks });
    if let Some(op) = op {
        v["operator"] = json!({ "name": op.name, "description": op.description });
        if let Binding::Guidance { text, .. } = &op.binding {
            v["guidance"] = Value::String(text.clone());
        }
    }
    v
}

/// select → policy → execute or degrade.
pub fn invoke(artifact: &CompiledArtifact, request: &InvocationRequest, cfg: &SandboxConfig) -> Envelope {
    let mut trace = vec![TraceEvent::new("invoked", format!("stage {:?}", request.disclosure_stage).to_lowercase())];
    let ws = match request.workspace.canonicalize() {
        Ok(p) if p.is_dir() => p,
        _ => {
            return Envelope::error(
                None,
                Contribution::Fallback,
                format!("workspace {} is not a directory", request.workspace.display()),
                trace,
            )
        }
    };
    let _lock = match lock_workspace(&ws) {
        Ok(l) => l,
        Err(e) => return Envelope::error(None, Contribution::Fallback, e, trace),
    };
    let contract = &artifact.contract;

    let selected = match select_operator(contract, request) {
        Ok(s) => s,
        Err(e) => {
            trace.push(TraceEvent::new("selection_failed", e.to_string()));
            let mut env = Envelope::error(None, Contribution::Fallback, e.to_string(), trace);
            env.output["available_operators"] = json!(contract.operator_names());
            return env;
        }
    };
    let Some(name) = selected else {
        trace.push(TraceEvent::new("no_operator", "falling back to indexed guidance"));
        let out = guidance_output(artifact, &request.intent_text, None, "no operator matched the request");
        return Envelope::new(Status::Ok, Contribution::Guidance, None, out, trace);
    };
    let op = contract.operator(&name).expect("selected operators are contract members");
    trace.push(TraceEvent::new("selected", op.kind.as_str()).refs(&op.source_refs));

    let decision = check_policy(contract, op);
    trace.push(TraceEvent::new("policy", format!("{}: {}", decision.outcome.as_str(), decision.reason)));
    match decision.outcome {
        Outcome::Blocked => {
            let out = json!({ "reason": decision.reason, "deopt_hints": decision.deopt_hints });
            return Envelope::new(Status::Blocked, Contribution::Fallback, Some(&name), out, trace);
        }
        Outcome::Guidance => {
            let query = format!("{} {}", request.intent_text, op.name.replace('_', " "));
            let out = guidance_output(artifact, &query, Some(op), &decision.reason);
            return Envelope::new(Status::Ok, Contribution::Guidance, Some(&name), out, trace);
        }
        Outcome::Execute => {}
    }

    // Execution gate: denied risks never reach a process.
    if op.kind != OperatorKind::Deopt && !op.risk.is_disjoint(&contract.action_policy.deny_risks) {
        return Envelope::error(Some(&name), Contribution::Fallback, "denied risk reached the execution gate".into(), trace);
    }
    if let Err(e) = check_arguments(op, &request.named_arguments) {
        return Envelope::error(Some(&name), Contribution::Partial, e, trace);
    }
    let args = &request.named_arguments;

    match &op.binding {
        Binding::Deopt { operation } => match run_deopt(&artifact.capsule, *operation, args) {
            Ok(out) => {
                trace.push(TraceEvent::new("deopt", operation.name()));
                Envelope::new(Status::Ok, Contribution::Fallback, Some(&name), out, trace)
            }
            Err(e) => Envelope::error(Some(&name), Contribution::Fallback, e, trace),
        },
        Binding::Script { asset_path, interpreter, argv } => {
            let (rel, text) = match materialize_script(&artifact.capsule, &ws, asset_path) {
                Ok(m) => m,
                Err(e) => return Envelope::error(Some(&name), Contribution::Partial, e, trace),
            };
            trace.push(TraceEvent::new("materialized", rel.display().to_string()));
            let rest = render_argv(argv, args);
            let mut full = interpreter.clone().or_else(|| interpreter_for(asset_path, &text)).unwrap_or_default();
            full.push(rel.to_string_lossy().into_owned());
            full.extend(rest);
            if full.len() == 1 {
                full[0] = format!("./{}", full[0]);
            }
            finish_process(op, sandbox::run(&full, &ws, cfg), &ws, trace)
        }
        Binding::Command { template } => {
            let line = fill_placeholders(template, args, shell_quote);
            finish_process(op, sandbox::run_shell(&line, &ws, cfg), &ws, trace)
        }
        Binding::Workflow { step_ids } => {
            let LoweringOutput::Workflow { graph, .. } = &artifact.lowering_payload else {
                return Envelope::error(Some(&name), Contribution::Partial, "artifact has no workflow graph".into(), trace);
            };
            let state = ExecutionState::load(&ws, &artifact.package_hash);
            let ctx = workflow::RunContext {
                capsule: &artifact.capsule,
                policy: &contract.action_policy,
                hash: &artifact.package_hash,
                workspace: &ws,
                operator: &name,
            };
            let (mut env, _state) = run_workflow(graph, step_ids, state, request, cfg, &ctx);
            let mut all = trace;
            all.append(&mut env.trace);
            env.trace = all;
            env
        }
        Binding::Guidance { .. } => {
            let out = guidance_output(artifact, &request.intent_text, Some(op), "operator is guidance-only");
            Envelope::new(Status::Ok, Contribution::Guidance, Some(&name), out, trace)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::{ActionPolicy, ArgSpec, FallbackCapsuleRef, IoContract, KeywordHint, SelectionPolicy, SemanticType, ValidationLevel};
    use crate::risk::{RiskFlag, RiskSet};

    fn op(name: &str, kind: OperatorKind, binding: Binding) -> OperatorSpec {
        OperatorSpec {
            name: name.into(),
            kind,
            description: String::new(),
            argument_schema: vec![],
            output_schema: vec![],
            binding,
            source_refs: vec![],
            risk: RiskSet::new(),
            evidence: vec![],
        }
    }

    fn contract(ops: Vec<OperatorSpec>, hints: Vec<(&str, &str, f64)>) -> BoundaryContract {
        let mut ops = ops;
        ops.extend(crate::contract::deopt_operators());
        BoundaryContract {
            boundary_type: crate::contract::BoundaryType::TypedOperator,
            operators: ops,
            io_contract: IoContract::default(),
            risk_flags: RiskSet::new(),
            validation_level: ValidationLevel::Syntactic,
            action_policy: ActionPolicy::default(),
            selection_policy: SelectionPolicy {
                keyword_hints: hints
                    .into_iter()
                    .map(|(k, o, w)| KeywordHint { keyword: k.into(), operator: o.into(), weight: w })
                    .collect(),
                default_operator: None,
            },
            fallback: FallbackCapsuleRef { capsule_id: Digest::of(b""), deopt_operators: vec![] },
        }
    }

    fn cmd(t: &str) -> Binding {
        Binding::Command { template: t.into() }
    }

    #[test]
    fn token_estimate() {
        assert_eq!(estimate_tokens(b""), 0);
        assert_eq!(estimate_tokens(b"abcd"), 1);
        assert_eq!(estimate_tokens(b"abcdefghi"), 3);
    }

    #[test]
    fn selection_rules() {
        let c = contract(
            vec![
                op("convert", OperatorKind::Command, cmd("true")),
                op("merge_op", OperatorKind::Command, cmd("true")),
                op("alpha", OperatorKind::Command, cmd("true")),
                op("beta", OperatorKind::Command, cmd("true")),
            ],
            vec![("merge", "merge_op", 1.0), ("tie", "beta", 0.5), ("tie", "alpha", 0.5)],
        );
        let r = InvocationRequest::new(".");
        assert_eq!(select_operator(&c, &r.clone().operator("convert")).unwrap().as_deref(), Some("convert"));
        assert_eq!(
            select_operator(&c, &r.clone().operator("nope")),
            Err(RuntimeError::UnknownOperator("nope".into()))
        );
        assert_eq!(select_operator(&c, &r.clone().intent("merge the decks")).unwrap().as_deref(), Some("merge_op"));
        assert_eq!(select_operator(&c, &r.clone().intent("a tie here")).unwrap().as_deref(), Some("alpha"));
        assert_eq!(select_operator(&c, &r.clone().intent("nothing")).unwrap(), None);
    }

    #[test]
    fn policy_rules() {
        let mut wipe = op("wipe", OperatorKind::Script, Binding::Script { asset_path: "wipe.sh".into(), interpreter: None, argv: vec![] });
        wipe.risk.insert(RiskFlag::Destructive);
        let mut fetch = op("fetch", OperatorKind::Command, cmd("curl x"));
        fetch.risk.insert(RiskFlag::Network);
        let guide = op("guide", OperatorKind::Guidance, Binding::Guidance { chunk_ids: vec![], text: "t".into() });
        let typed = op("typed", OperatorKind::Typed, Binding::Workflow { step_ids: vec![] });
        let mut c = contract(vec![wipe.clone(), fetch.clone(), guide.clone(), typed.clone()], vec![]);

        let b = check_policy(&c, &wipe);
        assert_eq!(b.outcome, Outcome::Blocked);
        assert!(b.deopt_hints.iter().any(|h| h.operator == "get_skill_asset" && h.arguments["path"] == "wipe.sh"));
        assert_eq!(check_policy(&c, &fetch).outcome, Outcome::Guidance);
        assert_eq!(check_policy(&c, &guide).outcome, Outcome::Guidance);
        assert_eq!(check_policy(&c, &typed).outcome, Outcome::Execute);
        let list = c.operator("list_skill_assets").unwrap().clone();
        assert_eq!(check_policy(&c, &list).outcome, Outcome::Execute);

        c.action_policy.min_validation_for_execute = ValidationLevel::ExecutableTest;
        let g = check_policy(&c, &typed);
        assert_eq!(g.outcome, Outcome::Guidance);
        assert!(g.reason.contains("below"));
        c.action_policy.min_validation_for_execute = ValidationLevel::Syntactic;
        c.action_policy.default_outcome = Outcome::Blocked;
        let d = check_policy(&c, &typed);
        assert_eq!(d.outcome, Outcome::Blocked);
        assert!(!d.deopt_hints.is_empty());
    }

    #[test]
    fn placeholders_and_argv() {
        let args = BTreeMap::from([("x".to_string(), "hi there".to_string()), ("n".to_string(), "3".to_string())]);
        assert_eq!(fill_placeholders("echo {x} {n}", &args, shell_quote), "echo 'hi there' 3");
        assert_eq!(fill_placeholders("awk '{print}' {n}", &args, shell_quote), "awk '{print}' 3");
        assert_eq!(fill_placeholders("echo {missing} {}", &args, shell_quote), "echo {missing} {}");
        assert_eq!(shell_quote("it's"), "'it'\\''s'");
        let parts = vec![
            ArgvPart::Positional { name: "n".into() },
            ArgvPart::Option { flag: "--x".into(), name: "x".into() },
            ArgvPart::Switch { flag: "-v".into(), name: "verbose".into() },
            ArgvPart::Rest { name: "x".into() },
        ];
        assert_eq!(render_argv(&parts, &args), vec!["3", "--x", "hi there", "hi", "there"]);
    }

    #[test]
    fn argument_tags() {
        let mut o = op("o", OperatorKind::Command, cmd("true"));
        o.argument_schema = vec![
            ArgSpec { name: "n".into(), tag: SemanticType::Number, required: true },
            ArgSpec { name: "f".into(), tag: SemanticType::Flag, required: false },
        ];
        let ok = BTreeMap::from([("n".to_string(), "2.5".to_string())]);
        assert!(check_arguments(&o, &ok).is_ok());
        assert!(check_arguments(&o, &BTreeMap::new()).is_err());
        let bad = BTreeMap::from([("n".to_string(), "two".to_string())]);
        assert!(check_arguments(&o, &bad).is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let ws = tempfile::tempdir().unwrap();
        let l = lock_workspace(ws.path()).unwrap();
        assert!(lock_workspace(ws.path()).is_err());
        drop(l);
        assert!(lock_workspace(ws.path()).is_ok());
        fs::write(ws.path().join(STATE_DIR).join(LOCK_FILE), "999999999").unwrap();
        assert!(lock_workspace(ws.path()).is_ok());
    }
}
