//! Compile-time judge.
//!
//! The judge proposes a shape label with quoted evidence and may fill in
//! workflow nodes that extraction left incomplete. Whatever it returns is
//! filtered here: verdicts citing text that does not occur in the package
//! are downgraded to `abstain`, and draft completion may only touch nodes
//! marked incomplete.

mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::{parse_fill_response, parse_shape_response, RemoteJudge, RemoteJudgeConfig};

use crate::lowering::{ExecutionSpec, StepType, WorkflowGraph};
use crate::markdown;
use crate::provenance::{Grounding, SourceRef};
use crate::shape::{Predicates, Shape, ShapeThresholds, StructuralFeatures};

/// Bytes of entry text (plus heading lines) shipped to a judge.
pub const EXCERPT_BUDGET: usize = 4096;
const HEADING_BUDGET: usize = 1024;

pub const ENV_ENDPOINT: &str = "SKILLC_JUDGE_ENDPOINT";
pub const ENV_KEY: &str = "SKILLC_JUDGE_KEY";
pub const ENV_MODEL: &str = "SKILLC_JUDGE_MODEL";
pub const ENV_TIMEOUT_MS: &str = "SKILLC_JUDGE_TIMEOUT_MS";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(30_000);

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(String),
    #[error("request kind {got:?} is not valid here (expected {expected:?})")]
    WrongRequestKind {
        expected: RequestKind,
        got: RequestKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictLabel {
    Workflow,
    Dispatcher,
    Reference,
    Insufficient,
    Abstain,
}

impl VerdictLabel {
    pub fn shape(self) -> Option<Shape> {
        match self {
            VerdictLabel::Workflow => Some(Shape::Workflow),
            VerdictLabel::Dispatcher => Some(Shape::Dispatcher),
            VerdictLabel::Reference => Some(Shape::Reference),
            VerdictLabel::Insufficient => Some(Shape::Insufficient),
            VerdictLabel::Abstain => None,
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "workflow" => Some(VerdictLabel::Workflow),
            "dispatcher" => Some(VerdictLabel::Dispatcher),
            "reference" => Some(VerdictLabel::Reference),
            "insufficient" => Some(VerdictLabel::Insufficient),
            "abstain" => Some(VerdictLabel::Abstain),
            _ => None,
        }
    }
}

impl From<Shape> for VerdictLabel {
    fn from(s: Shape) -> Self {
        match s {
            Shape::Workflow => VerdictLabel::Workflow,
            Shape::Dispatcher => VerdictLabel::Dispatcher,
            Shape::Reference => VerdictLabel::Reference,
            Shape::Insufficient => VerdictLabel::Insufficient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub label: VerdictLabel,
    pub supporting_evidence: Vec<String>,
    pub confidence: f64,
}

impl JudgeVerdict {
    pub fn abstain() -> Self {
        JudgeVerdict {
            label: VerdictLabel::Abstain,
            supporting_evidence: Vec::new(),
            confidence: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    ShapeJudgment,
    WorkflowCompletion,
    OperatorDescription,
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestKind::ShapeJudgment => "shape_judgment",
            RequestKind::WorkflowCompletion => "workflow_completion",
            RequestKind::OperatorDescription => "operator_description",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub kind: RequestKind,
    pub grounded_features: StructuralFeatures,
    pub excerpt: String,
    /// Package text used to check evidence; never sent over the wire.
    #[serde(skip)]
    pub grounding: Grounding,
}

impl CompletionRequest {
    pub fn new(kind: RequestKind, features: StructuralFeatures, grounding: Grounding) -> Self {
        CompletionRequest {
            kind,
            excerpt: build_excerpt(grounding.entry()),
            grounded_features: features,
            grounding,
        }
    }

    pub fn shape_judgment(features: StructuralFeatures, grounding: Grounding) -> Self {
        Self::new(RequestKind::ShapeJudgment, features, grounding)
    }

    pub fn workflow_completion(features: StructuralFeatures, grounding: Grounding) -> Self {
        Self::new(RequestKind::WorkflowCompletion, features, grounding)
    }
}

fn floor_boundary(text: &str, mut at: usize) -> usize {
    at = at.min(text.len());
    while !text.is_char_boundary(at) {
        at -= 1;
    }
    at
}

/// Heading lines beyond the prefix (up to 1 KiB), then as much of the
/// entry's start as fits in the remaining budget.
pub fn build_excerpt(entry: &str) -> String {
    if entry.len() <= EXCERPT_BUDGET {
        return entry.to_string();
    }
    let scan = markdown::scan(entry);
    let mut headings = String::new();
    let prefix_guess = EXCERPT_BUDGET - HEADING_BUDGET;
    for (i, _, _) in scan.headings() {
        let line = &scan.lines[i];
        if line.start < prefix_guess {
            continue;
        }
        if headings.len() + line.text.len() + 1 > HEADING_BUDGET {
            break;
        }
        headings.push_str(line.text);
        headings.push('\n');
    }
    let prefix_len = floor_boundary(entry, EXCERPT_BUDGET - headings.len() - 1);
    let mut out = String::with_capacity(EXCERPT_BUDGET);
    out.push_str(&entry[..prefix_len]);
    out.push('\n');
    out.push_str(&headings);
    out
}

/// Proposed content for an incomplete workflow node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFill {
    pub step_id: String,
    pub step_type: StepType,
    pub execution_spec: ExecutionSpec,
    pub provenance: Vec<SourceRef>,
}

/// A compile-time judge. `&mut self` keeps one request in flight per
/// instance.
pub trait ShapeJudge {
    fn identity(&self) -> String;

    fn propose_shape(&mut self, request: &CompletionRequest) -> Result<JudgeVerdict, JudgeError>;

    fn propose_fills(
        &mut self,
        request: &CompletionRequest,
        draft: &WorkflowGraph,
    ) -> Result<Vec<NodeFill>, JudgeError>;
}

/// Runs the judge and enforces groundedness on its verdict.
pub fn judge_shape(
    judge: &mut dyn ShapeJudge,
    request: &CompletionRequest,
) -> Result<JudgeVerdict, JudgeError> {
    if request.kind != RequestKind::ShapeJudgment {
        return Err(JudgeError::WrongRequestKind {
            expected: RequestKind::ShapeJudgment,
            got: request.kind,
        });
    }
    let verdict = judge.propose_shape(request)?;
    Ok(ground_verdict(verdict, &request.grounding))
}

pub fn ground_verdict(mut verdict: JudgeVerdict, grounding: &Grounding) -> JudgeVerdict {
    if verdict
        .supporting_evidence
        .iter()
        .any(|span| !grounding.contains(span))
    {
        return JudgeVerdict::abstain();
    }
    verdict.confidence = verdict.confidence.clamp(0.0, 1.0);
    if verdict.confidence.is_nan() {
        verdict.confidence = 0.0;
    }
    verdict
}

/// Applies judge fills to a draft. Only incomplete nodes change; a fill
/// whose provenance cannot be verified against the package is kept as a
/// `model_assist` node.
pub fn complete_workflow_draft(
    judge: &mut dyn ShapeJudge,
    request: &CompletionRequest,
    draft: &WorkflowGraph,
) -> Result<WorkflowGraph, JudgeError> {
    if request.kind != RequestKind::WorkflowCompletion {
        return Err(JudgeError::WrongRequestKind {
            expected: RequestKind::WorkflowCompletion,
            got: request.kind,
        });
    }
    if !draft.nodes.iter().any(|n| n.incomplete) {
        return Ok(draft.clone());
    }
    let fills = judge.propose_fills(request, draft)?;
    let mut by_id: BTreeMap<&str, &NodeFill> = BTreeMap::new();
    for fill in &fills {
        by_id.entry(fill.step_id.as_str()).or_insert(fill);
    }
    let mut graph = draft.clone();
    for node in graph.nodes.iter_mut().filter(|n| n.incomplete) {
        let Some(fill) = by_id.get(node.step_id.as_str()) else {
            continue;
        };
        let grounded: Vec<SourceRef> = fill
            .provenance
            .iter()
            .filter(|r| request.grounding.verify(r))
            .cloned()
            .collect();
        node.execution_spec = fill.execution_spec.clone();
        node.incomplete = false;
        if grounded.is_empty() || fill.provenance.len() != grounded.len() {
            node.step_type = StepType::ModelAssist;
        } else {
            node.step_type = fill.step_type.clone();
            for r in grounded {
                if !node.provenance.contains(&r) {
                    node.provenance.push(r);
                }
            }
        }
    }
    Ok(graph)
}

/// Deterministic judge derived from structural features alone. It labels a
/// package only when exactly one predicate fires and abstains otherwise.
#[derive(Debug, Clone, Default)]
pub struct DeterministicJudge {
    pub thresholds: ShapeThresholds,
}

impl ShapeJudge for DeterministicJudge {
    fn identity(&self) -> String {
        "deterministic-default/1".to_string()
    }

    fn propose_shape(&mut self, request: &CompletionRequest) -> Result<JudgeVerdict, JudgeError> {
        let preds = Predicates::evaluate(&request.grounded_features, &self.thresholds);
        Ok(match preds.fired().as_slice() {
            [only] => JudgeVerdict {
                label: (*only).into(),
                supporting_evidence: Vec::new(),
                confidence: 1.0,
            },
            _ => JudgeVerdict::abstain(),
        })
    }

    fn propose_fills(
        &mut self,
        _request: &CompletionRequest,
        _draft: &WorkflowGraph,
    ) -> Result<Vec<NodeFill>, JudgeError> {
        Ok(Vec::new())
    }
}

/// Remote judge when `SKILLC_JUDGE_ENDPOINT` is set, the default otherwise.
pub fn judge_from_env() -> Box<dyn ShapeJudge> {
    match RemoteJudgeConfig::from_env() {
        Some(cfg) => Box::new(RemoteJudge::new(cfg)),
        None => Box::new(DeterministicJudge::default()),
    }
}
