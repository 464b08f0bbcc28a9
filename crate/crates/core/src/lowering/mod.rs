//! Shape-specific lowerings: workflow graph, dispatcher registry, reference
//! index, or an insufficiency diagnostic.

mod dispatcher;
mod graph;
mod reference;
mod workflow;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dispatcher::{lower_dispatcher, parse_script_arguments, DispatcherCapabilities};
pub use graph::{normalize_graph, validate_graph, ValidationContext};
pub use reference::{chunk_document, lower_reference, Chunk, ReferenceIndex, SearchHit, CHUNK_BUDGET};
pub use workflow::{extract_workflow, lower_workflow, IMPERATIVE_VERBS};

use crate::provenance::SourceRef;
use crate::risk::RiskSet;
use crate::shape::EvidenceRecord;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoweringError {
    #[error("lowering failed: {0}")]
    LoweringFailed(String),
}

/// `{name}` placeholders as (start, end, name), skipping single-quoted
/// shell text such as `awk '{print}'`.
pub fn placeholder_spans(s: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let mut quoted = false;
    let mut i = 0;
    let bytes = s.as_bytes();
    while i < bytes.len() {
        match bytes[i] {
            b'\'' => quoted = !quoted,
            b'{' if !quoted => {
                let len = s[i + 1..]
                    .bytes()
                    .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_')
                    .count();
                if len > 0 && bytes.get(i + 1 + len) == Some(&b'}') {
                    out.push((i, i + len + 2, &s[i + 1..i + 1 + len]));
                    i += len + 2;
                    continue;
                }
            }
            _ => {}
        }
        i += 1;
    }
    out
}

/// Canonical step types plus a carrier for unnormalized names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StepType {
    Command,
    Script,
    ModelAssist,
    Verify,
    Manual,
    Other(String),
}

impl StepType {
    /// Exact canonical name, or `Other` for anything else.
    pub fn from_name(name: &str) -> StepType {
        match name {
            "command" => StepType::Command,
            "script" => StepType::Script,
            "model_assist" => StepType::ModelAssist,
            "verify" => StepType::Verify,
            "manual" => StepType::Manual,
            other => StepType::Other(other.to_string()),
        }
    }

    /// Maps aliases to canonical types; unknown names become `manual`.
    pub fn canonical(&self) -> StepType {
        let StepType::Other(name) = self else {
            return self.clone();
        };
        match name.trim().to_ascii_lowercase().as_str() {
            "command" | "cmd" | "shell" => StepType::Command,
            "script" | "py" | "run" => StepType::Script,
            "verify" | "check" | "assert" => StepType::Verify,
            "model_assist" => StepType::ModelAssist,
            _ => StepType::Manual,
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            StepType::Command => "command",
            StepType::Script => "script",
            StepType::ModelAssist => "model_assist",
            StepType::Verify => "verify",
            StepType::Manual => "manual",
            StepType::Other(s) => s,
        }
    }

    pub fn is_executable(&self) -> bool {
        matches!(self, StepType::Command | StepType::Script | StepType::Verify)
    }
}

impl fmt::Display for StepType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for StepType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for StepType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(StepType::from_name(&s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecutionSpec {
    Command { template: String },
    Script { asset_path: String, args: Vec<String> },
    Guidance { text: String },
}

impl ExecutionSpec {
    /// Non-empty command, or a script path (existence is checked elsewhere).
    pub fn is_runnable(&self) -> bool {
        match self {
            ExecutionSpec::Command { template } => !template.trim().is_empty(),
            ExecutionSpec::Script { asset_path, .. } => !asset_path.trim().is_empty(),
            ExecutionSpec::Guidance { .. } => false,
        }
    }

    /// `{name}` placeholders in the command template or script arguments.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut scan = |s: &str| {
            for (_, _, name) in placeholder_spans(s) {
                if !out.iter().any(|n| n == name) {
                    out.push(name.to_string());
                }
            }
        };
        match self {
            ExecutionSpec::Command { template } => scan(template),
            ExecutionSpec::Script { args, .. } => args.iter().for_each(|a| scan(a)),
            ExecutionSpec::Guidance { .. } => {}
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IoSpec {
    pub name: String,
    pub description: String,
    pub invocation_supplied: bool,
}

impl IoSpec {
    pub fn named(name: impl Into<String>) -> Self {
        IoSpec {
            name: name.into(),
            description: String::new(),
            invocation_supplied: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowNode {
    pub step_id: String,
    pub name: String,
    pub step_type: StepType,
    pub execution_spec: ExecutionSpec,
    pub inputs: Vec<IoSpec>,
    pub outputs: Vec<IoSpec>,
    pub dependencies: Vec<String>,
    pub provenance: Vec<SourceRef>,
    pub risk: RiskSet,
    pub cacheable: bool,
    pub incomplete: bool,
}

impl WorkflowNode {
    pub fn new(step_id: impl Into<String>, name: impl Into<String>, step_type: StepType) -> Self {
        let name = name.into();
        WorkflowNode {
            step_id: step_id.into(),
            execution_spec: ExecutionSpec::Guidance { text: name.clone() },
            name,
            step_type,
            inputs: Vec::new(),
            outputs: Vec::new(),
            dependencies: Vec::new(),
            provenance: Vec::new(),
            risk: RiskSet::new(),
            cacheable: false,
            incomplete: false,
        }
    }

    /// Identity used for duplicate detection.
    fn dedupe_key(&self) -> (&str, &ExecutionSpec, &[SourceRef]) {
        (&self.name, &self.execution_spec, &self.provenance)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowGraph {
    pub nodes: Vec<WorkflowNode>,
    pub edges: Vec<(String, String)>,
}

impl WorkflowGraph {
    pub fn node(&self, id: &str) -> Option<&WorkflowNode> {
        self.nodes.iter().find(|n| n.step_id == id)
    }

    /// Step ids reachable from `id` along edges, excluding `id` itself.
    pub fn descendants(&self, id: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            for (from, to) in &self.edges {
                if *from == cur && to != id && seen.insert(to.clone()) {
                    stack.push(to.clone());
                }
            }
        }
        seen
    }

    pub fn ancestors(&self, id: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            for (from, to) in &self.edges {
                if *to == cur && from != id && seen.insert(from.clone()) {
                    stack.push(from.clone());
                }
            }
        }
        seen
    }

    /// Weakly connected components, each as step ids in node order.
    pub fn components(&self) -> Vec<Vec<String>> {
        let ids: Vec<&str> = self.nodes.iter().map(|n| n.step_id.as_str()).collect();
        let mut parent: Vec<usize> = (0..ids.len()).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            let mut c = i;
            while p[c] != r {
                let next = p[c];
                p[c] = r;
                c = next;
            }
            r
        }
        for (from, to) in &self.edges {
            let (Some(a), Some(b)) = (
                ids.iter().position(|x| x == from),
                ids.iter().position(|x| x == to),
            ) else {
                continue;
            };
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut groups: Vec<(usize, Vec<String>)> = Vec::new();
        for i in 0..ids.len() {
            let root = find(&mut parent, i);
            match groups.iter_mut().find(|(r, _)| *r == root) {
                Some((_, g)) => g.push(ids[i].to_string()),
                None => groups.push((root, vec![ids[i].to_string()])),
            }
        }
        groups.into_iter().map(|(_, g)| g).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repair {
    pub rule: String,
    pub detail: String,
}

impl Repair {
    pub fn new(rule: &str, detail: impl Into<String>) -> Self {
        Repair {
            rule: rule.to_string(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Rule {
    UniqueStepId,
    EdgeTargetExists,
    Acyclic,
    ExecutableSpec,
    InputUnproduced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    /// Step id, or `from->to` for edges.
    pub subject: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
    pub repaired: Vec<Repair>,
}

impl ValidationReport {
    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsufficiencyDiagnostic {
    pub message: String,
    pub evidence: Vec<EvidenceRecord>,
}

/// Output of lowering, stored as the artifact's lowering payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum LoweringOutput {
    Workflow {
        graph: WorkflowGraph,
        report: ValidationReport,
    },
    Dispatcher(DispatcherCapabilities),
    Reference(ReferenceIndex),
    Insufficient(InsufficiencyDiagnostic),
}
