//! Sequential workflow execution with persisted state and resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    fill_placeholders, materialize_script, now, shell_quote, Contribution, Envelope, InvocationRequest, Status,
    TraceEvent, STATE_DIR,
};
use crate::contract::{ActionPolicy, FallbackCapsule};
use crate::digest::{Digest, DigestWriter};
use crate::lowering::{ExecutionSpec, StepType, WorkflowGraph, WorkflowNode};
use crate::package::is_safe_relative_path;
use crate::sandbox::{self, interpreter_for, SandboxConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    #[default]
    Pending,
    Running,
    Succeeded,
    Failed,
    /// Completed outside the runtime (a manual step the caller reported).
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedOutput {
    pub spec_digest: Digest,
    /// Digest of each declared input file at execution time (`None`: absent).
    pub input_digests: BTreeMap<String, Option<Digest>>,
    pub output_digests: BTreeMap<String, Option<Digest>>,
    pub stdout: String,
    pub recorded_at: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionState {
    pub statuses: BTreeMap<String, NodeStatus>,
    pub cached_outputs: BTreeMap<String, CachedOutput>,
    pub failure_point: Option<String>,
}

pub fn state_path(workspace: &Path, hash: &Digest) -> PathBuf {
    workspace.join(STATE_DIR).join(format!("{hash}.json"))
}

impl ExecutionState {
    /// Prior state for this artifact, or a fresh one when absent or unreadable.
    pub fn load(workspace: &Path, hash: &Digest) -> Self {
        fs::read(state_path(workspace, hash))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, workspace: &Path, hash: &Digest) -> std::io::Result<()> {
        let path = state_path(workspace, hash);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self).expect("state serializes"))?;
        fs::rename(tmp, path)
    }

    pub fn status(&self, id: &str) -> NodeStatus {
        self.statuses.get(id).copied().unwrap_or_default()
    }

    fn set(&mut self, id: &str, status: NodeStatus) {
        self.statuses.insert(id.to_string(), status);
        if status != NodeStatus::Succeeded {
            self.cached_outputs.remove(id);
        }
    }
}

pub struct RunContext<'a> {
    pub capsule: &'a FallbackCapsule,
    pub policy: &'a ActionPolicy,
    pub hash: &'a Digest,
    pub workspace: &'a Path,
    pub operator: &'a str,
}

enum Prepared {
    Argv(Vec<String>),
    Shell(String),
}

fn natural(id: &str) -> (usize, &str) {
    (id.len(), id)
}

/// Members in topological order, smallest id first among ready nodes.
fn topo_order(graph: &WorkflowGraph, members: &BTreeSet<&str>) -> Vec<String> {
    let mut indeg: BTreeMap<&str, usize> = members.iter().map(|m| (*m, 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in graph.nodes.iter().filter(|n| members.contains(n.step_id.as_str())) {
        for d in n.dependencies.iter().filter(|d| members.contains(d.as_str())) {
            *indeg.get_mut(n.step_id.as_str()).expect("member") += 1;
            succ.entry(d.as_str()).or_default().push(n.step_id.as_str());
        }
    }
    let mut ready: BTreeSet<(usize, &str)> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| natural(k)).collect();
    let mut order = Vec::new();
    while let Some(first) = ready.iter().next().copied() {
        ready.remove(&first);
        order.push(first.1.to_string());
        for s in succ.get(first.1).into_iter().flatten() {
            let d = indeg.get_mut(s).expect("member");
            *d -= 1;
            if *d == 0 {
                ready.insert(natural(s));
            }
        }
    }
    // Cycles cannot pass validation; keep any leftovers deterministic anyway.
    let mut rest: Vec<&str> = members.iter().copied().filter(|m| !order.iter().any(|o| o == m)).collect();
    rest.sort_by_key(|m| natural(m));
    order.extend(rest.into_iter().map(str::to_string));
    order
}

fn file_digests<'a>(ws: &Path, names: impl Iterator<Item = &'a String>) -> BTreeMap<String, Option<Digest>> {
    names
        .filter(|n| is_safe_relative_path(n))
        .map(|n| (n.clone(), fs::read(ws.join(n)).ok().map(|b| Digest::of(&b))))
        .collect()
}

fn prepare(node: &WorkflowNode, ctx: &RunContext<'_>, args: &BTreeMap<String, String>) -> Result<(Prepared, Digest), String> {
    let mut d = DigestWriter::new();
    match &node.execution_spec {
        ExecutionSpec::Command { template } => {
            let line = fill_placeholders(template, args, shell_quote);
            d.update(b"command\0");
            d.update(line.as_bytes());
            Ok((Prepared::Shell(line), d.finish()))
        }
        ExecutionSpec::Script { asset_path, args: script_args } => {
            let (rel, text) = materialize_script(ctx.capsule, ctx.workspace, asset_path)?;
            let mut argv = interpreter_for(asset_path, &text).unwrap_or_default();
            let rel = rel.to_string_lossy().into_owned();
            argv.push(if argv.is_empty() { format!("./{rel}") } else { rel });
            for a in script_args {
                argv.push(fill_placeholders(a, args, str::to_string));
            }
            d.update(b"script\0");
            d.update(Digest::of(text.as_bytes()).as_str().as_bytes());
            for a in &argv {
                d.update(b"\0");
                d.update(a.as_bytes());
            }
            Ok((Prepared::Argv(argv), d.finish()))
        }
        ExecutionSpec::Guidance { .. } => Err("step has no runnable specification".into()),
    }
}

fn needs_caller(node: &WorkflowNode) -> bool {
    matches!(node.step_type, StepType::Manual | StepType::ModelAssist | StepType::Other(_))
        || !node.execution_spec.is_runnable()
}

/// Runs the `step_ids` component of `graph`, resuming from `state`.
/// Nodes run one at a time; a failure leaves its descendants pending while
/// independent nodes still run. State is persisted after every transition.
pub fn run_workflow(
    graph: &WorkflowGraph,
    step_ids: &[String],
    mut state: ExecutionState,
    request: &InvocationRequest,
    cfg: &SandboxConfig,
    ctx: &RunContext<'_>,
) -> (Envelope, ExecutionState) {
    let ws = ctx.workspace;
    let members: BTreeSet<&str> = step_ids.iter().map(String::as_str).filter(|id| graph.node(id).is_some()).collect();
    let mut trace = Vec::new();
    let mut executed: Vec<String> = Vec::new();
    let mut cached: Vec<String> = Vec::new();
    let mut halted: Vec<Value> = Vec::new();
    let mut failed: Option<String> = None;
    let mut reran: BTreeSet<String> = BTreeSet::new();
    let mut last_stdout = String::new();
    let save = |state: &ExecutionState, trace: &mut Vec<TraceEvent>| {
        if let Err(e) = state.save(ws, ctx.hash) {
            trace.push(TraceEvent::new("state_write_failed", e.to_string()));
        }
    };

    for id in topo_order(graph, &members) {
        let node = graph.node(&id).expect("member node");
        let deps: Vec<&String> = node.dependencies.iter().filter(|d| members.contains(d.as_str())).collect();
        if deps.iter().any(|d| !matches!(state.status(d), NodeStatus::Succeeded | NodeStatus::Skipped)) {
            state.set(&id, NodeStatus::Pending);
            continue;
        }
        if needs_caller(node) {
            if request.completed_steps.contains(&id) {
                state.set(&id, NodeStatus::Skipped);
                trace.push(TraceEvent::new("completed_by_caller", "").step(&id).refs(&node.provenance));
                save(&state, &mut trace);
            } else {
                state.set(&id, NodeStatus::Pending);
                let guidance = match &node.execution_spec {
                    ExecutionSpec::Guidance { text } => text.clone(),
                    _ => node.name.clone(),
                };
                trace.push(TraceEvent::new("halted", node.step_type.as_str()).step(&id).refs(&node.provenance));
                halted.push(json!({ "step_id": id, "step_type": node.step_type.as_str(), "guidance": guidance }));
            }
            continue;
        }
        let denied: Vec<&str> = node.risk.intersection(&ctx.policy.deny_risks).map(|r| r.as_str()).collect();
        if !denied.is_empty() {
            state.set(&id, NodeStatus::Failed);
            state.failure_point = Some(id.clone());
            failed.get_or_insert(id.clone());
            trace.push(TraceEvent::new("blocked", format!("risk denied: {}", denied.join(", "))).step(&id));
            save(&state, &mut trace);
            continue;
        }
        let (prepared, spec_digest) = match prepare(node, ctx, &request.named_arguments) {
            Ok(p) => p,
            Err(e) => {
                state.set(&id, NodeStatus::Failed);
                state.failure_point = Some(id.clone());
                failed.get_or_insert(id.clone());
                trace.push(TraceEvent::new("failed", e).step(&id).refs(&node.provenance));
                save(&state, &mut trace);
                continue;
            }
        };
        let input_names = node.inputs.iter().filter(|i| !i.invocation_supplied).map(|i| &i.name);
        let inputs = file_digests(ws, input_names);
        let outputs_now = file_digests(ws, node.outputs.iter().map(|o| &o.name));

        let reusable = state.status(&id) == NodeStatus::Succeeded
            && deps.iter().all(|d| !reran.contains(*d))
            && state.cached_outputs.get(&id).is_some_and(|c| {
                c.spec_digest == spec_digest && c.input_digests == inputs && c.output_digests == outputs_now
            });
        if reusable {
            cached.push(id.clone());
            last_stdout = state.cached_outputs[&id].stdout.clone();
            trace.push(TraceEvent::new("cache_hit", "").step(&id).refs(&node.provenance));
            continue;
        }

        state.set(&id, NodeStatus::Running);
        save(&state, &mut trace);
        trace.push(TraceEvent::new("node_started", node.step_type.as_str()).step(&id).refs(&node.provenance));
        let result = match &prepared {
            Prepared::Shell(line) => sandbox::run_shell(line, ws, cfg),
            Prepared::Argv(argv) => sandbox::run(argv, ws, cfg),
        };
        executed.push(id.clone());
        reran.insert(id.clone());
        match result {
            Ok(out) if out.success() => {
                state.set(&id, NodeStatus::Succeeded);
                state.cached_outputs.insert(
                    id.clone(),
                    CachedOutput {
                        spec_digest,
                        input_digests: inputs,
                        output_digests: file_digests(ws, node.outputs.iter().map(|o| &o.name)),
                        stdout: out.stdout.clone(),
                        recorded_at: now(),
                    },
                );
                last_stdout = out.stdout;
                trace.push(TraceEvent::new("node_succeeded", format!("{} ms", out.duration_ms)).step(&id));
            }
            Ok(out) => {
                state.set(&id, NodeStatus::Failed);
                state.failure_point = Some(id.clone());
                failed.get_or_insert(id.clone());
                let why = if out.timed_out {
                    "timed out".to_string()
                } else if node.step_type == StepType::Verify {
                    format!("verification failed (exit {:?})", out.exit_code)
                } else {
                    format!("exit {:?}: {}", out.exit_code, out.stderr.lines().last().unwrap_or(""))
                };
                trace.push(TraceEvent::new("node_failed", why).step(&id).refs(&node.provenance));
            }
            Err(e) => {
                state.set(&id, NodeStatus::Failed);
                state.failure_point = Some(id.clone());
                failed.get_or_insert(id.clone());
                trace.push(TraceEvent::new("node_failed", format!("sandbox: {e}")).step(&id).refs(&node.provenance));
            }
        }
        save(&state, &mut trace);
    }
    if failed.is_none() {
        state.failure_point = None;
    }
    save(&state, &mut trace);

    let statuses: BTreeMap<&str, NodeStatus> = members.iter().map(|m| (*m, state.status(m))).collect();
    let output = json!({
        "executed_steps": executed,
        "cached_steps": cached,
        "halted_steps": halted,
        "failed_step": failed,
        "statuses": statuses,
        "record": { "stdout": last_stdout },
    });
    if trace.is_empty() {
        trace.push(TraceEvent::new("workflow_empty", ""));
    }
    let op = Some(ctx.operator);
    let env = if failed.is_some() {
        Envelope::new(Status::Error, Contribution::Partial, op, output, trace)
    } else if !halted.is_empty() || statuses.values().any(|s| *s == NodeStatus::Pending) {
        Envelope::new(Status::Ok, Contribution::Partial, op, output, trace)
    } else {
        Envelope::new(Status::Ok, Contribution::Executed, op, output, trace)
    };
    (env, state)
}
