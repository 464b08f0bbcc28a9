//! Normalizes every lowering into a [`BoundaryContract`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    ActionPolicy, ArgSpec, ArgvPart, Binding, BoundaryContract, BoundaryType, DeoptOperation,
    FallbackCapsuleRef, FieldSpec, IoContract, KeywordHint, OperatorKind, OperatorSpec,
    SelectionPolicy, SemanticType, ValidationLevel,
};
use crate::lowering::{ExecutionSpec, LoweringOutput, WorkflowGraph};
use crate::package::{decode_text, sanitize_name, CompilePolicy, PackageMetadata, SkillPackage};
use crate::risk::RiskSet;
use crate::sandbox::interpreter_for;
use crate::terms::terms;

/// Byte budget of the summary's one-line description.
pub const ONE_LINE_BUDGET: usize = 200;

const NAME_HINT_WEIGHT: f64 = 1.0;
const CONTEXT_HINT_WEIGHT: f64 = 0.5;
const STEP_HINT_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySummary {
    pub handle: String,
    pub one_line: String,
    pub operator_names: Vec<String>,
    pub boundary_type: BoundaryType,
    pub risk_flags: RiskSet,
    pub validation_level: ValidationLevel,
}

/// The three operators every contract carries.
pub fn deopt_operators() -> Vec<OperatorSpec> {
    DeoptOperation::ALL
        .iter()
        .map(|&op| {
            let (description, args, outputs): (&str, Vec<ArgSpec>, Vec<FieldSpec>) = match op {
                DeoptOperation::ListSkillAssets => (
                    "List the original package assets with type, size and digest.",
                    vec![],
                    vec![FieldSpec { name: "assets".into(), tag: SemanticType::Text }],
                ),
                DeoptOperation::GetSkillAsset => (
                    "Return the exact bytes of one original asset.",
                    vec![ArgSpec { name: "path".into(), tag: SemanticType::Path, required: true }],
                    vec![FieldSpec { name: "content".into(), tag: SemanticType::Text }],
                ),
                DeoptOperation::SearchSkillDocs => (
                    "Search the original package text for relevant chunks.",
                    vec![
                        ArgSpec { name: "query".into(), tag: SemanticType::Text, required: true },
                        ArgSpec { name: "limit".into(), tag: SemanticType::Number, required: false },
                    ],
                    vec![FieldSpec { name: "hits".into(), tag: SemanticType::Text }],
                ),
            };
            OperatorSpec {
                name: op.name().to_string(),
                kind: OperatorKind::Deopt,
                description: description.to_string(),
                argument_schema: args,
                output_schema: outputs,
                binding: Binding::Deopt { operation: op },
                source_refs: Vec::new(),
                risk: RiskSet::new(),
                evidence: Vec::new(),
            }
        })
        .collect()
}

fn script_interpreter(package: &SkillPackage, path: &str) -> Option<Vec<String>> {
    let text = package
        .asset(path)
        .and_then(|r| package.read_asset(r).ok())
        .and_then(|b| decode_text(&b))
        .unwrap_or_default();
    interpreter_for(path, &text)
}

fn describe_steps(graph: &WorkflowGraph, ids: &[String]) -> String {
    let names: Vec<&str> = ids
        .iter()
        .filter_map(|id| graph.node(id))
        .map(|n| n.name.as_str())
        .collect();
    let mut d = format!("Run the {}-step workflow", names.len());
    if let (Some(first), Some(last)) = (names.first(), names.last()) {
        if names.len() == 1 {
            d.push_str(&format!(": {first}"));
        } else {
            d.push_str(&format!(" from \"{first}\" to \"{last}\""));
        }
    }
    truncate_words(&d, 160)
}

fn workflow_operators(graph: &WorkflowGraph, package: &SkillPackage) -> (Vec<OperatorSpec>, Vec<KeywordHint>) {
    let mut ops = Vec::new();
    let mut hints = Vec::new();
    for (k, component) in graph.components().into_iter().enumerate() {
        let name = if k == 0 { "workflow".to_string() } else { format!("workflow_{}", k + 1) };
        let mut args: Vec<ArgSpec> = Vec::new();
        let mut outputs: Vec<FieldSpec> = Vec::new();
        let mut risk = RiskSet::new();
        let mut refs = Vec::new();
        for id in &component {
            let Some(n) = graph.node(id) else { continue };
            for i in n.inputs.iter().filter(|i| i.invocation_supplied) {
                if !args.iter().any(|a| a.name == i.name) {
                    args.push(ArgSpec { name: i.name.clone(), tag: SemanticType::infer(&i.name), required: true });
                }
            }
            for o in &n.outputs {
                if !outputs.iter().any(|f| f.name == o.name) {
                    outputs.push(FieldSpec { name: o.name.clone(), tag: SemanticType::infer(&o.name) });
                }
            }
            risk.extend(n.risk.iter().copied());
            refs.extend(n.provenance.first().cloned());
        }
        hints.push(KeywordHint { keyword: "workflow".into(), operator: name.clone(), weight: NAME_HINT_WEIGHT });
        for t in terms(&package.metadata.name) {
            hints.push(KeywordHint { keyword: t, operator: name.clone(), weight: CONTEXT_HINT_WEIGHT });
        }
        ops.push(OperatorSpec {
            name,
            kind: OperatorKind::Typed,
            description: describe_steps(graph, &component),
            argument_schema: args,
            output_schema: outputs,
            binding: Binding::Workflow { step_ids: component },
            source_refs: refs,
            risk,
            evidence: Vec::new(),
        });
    }

    for n in graph.nodes.iter().filter(|n| n.cacheable && n.execution_spec.is_runnable()) {
        let args: Vec<ArgSpec> = n
            .execution_spec
            .placeholders()
            .into_iter()
            .map(|p| ArgSpec { tag: SemanticType::infer(&p), name: p, required: true })
            .collect();
        let (kind, binding) = match &n.execution_spec {
            ExecutionSpec::Command { template } => (OperatorKind::Command, Binding::Command { template: template.clone() }),
            ExecutionSpec::Script { asset_path, args } => (
                OperatorKind::Script,
                Binding::Script {
                    asset_path: asset_path.clone(),
                    interpreter: script_interpreter(package, asset_path),
                    argv: args.iter().map(|a| ArgvPart::Literal { text: a.clone() }).collect(),
                },
            ),
            ExecutionSpec::Guidance { .. } => continue,
        };
        if let Binding::Script { asset_path, .. } = &binding {
            if package.asset(asset_path).is_none() {
                continue;
            }
        }
        let name = format!("step_{}", n.step_id);
        for t in terms(&n.name) {
            hints.push(KeywordHint { keyword: t, operator: name.clone(), weight: STEP_HINT_WEIGHT });
        }
        ops.push(OperatorSpec {
            name,
            kind,
            description: truncate_words(&n.name, 160),
            argument_schema: args,
            output_schema: n
                .outputs
                .iter()
                .map(|o| FieldSpec { name: o.name.clone(), tag: SemanticType::infer(&o.name) })
                .chain(std::iter::once(FieldSpec { name: "stdout".into(), tag: SemanticType::Text }))
                .collect(),
            binding,
            source_refs: n.provenance.clone(),
            risk: n.risk.clone(),
            evidence: Vec::new(),
        });
    }
    (ops, hints)
}

/// Builds the contract for a lowering. Never fails and never censors:
/// policy is applied at runtime.
pub fn build_contract(lowered: &LoweringOutput, package: &SkillPackage, _policy: &CompilePolicy) -> BoundaryContract {
    let (boundary_type, mut ops, mut hints, mut default_operator) = match lowered {
        LoweringOutput::Workflow { graph, report } => {
            let (mut ops, hints) = workflow_operators(graph, package);
            if !report.ok {
                // A graph that failed validation is never run; its steps are
                // still offered as guidance.
                ops.retain(|o| o.kind == OperatorKind::Typed);
                let problems: Vec<String> = report.violations.iter().map(|v| v.message.clone()).collect();
                for op in &mut ops {
                    let Binding::Workflow { step_ids } = &op.binding else { continue };
                    let steps: Vec<String> = step_ids
                        .iter()
                        .filter_map(|id| graph.node(id))
                        .map(|n| format!("{}. {}", n.step_id, n.name))
                        .collect();
                    op.kind = OperatorKind::Guidance;
                    op.binding = Binding::Guidance {
                        chunk_ids: Vec::new(),
                        text: format!("{}
not executable: {}", steps.join("\n"), problems.join("; ")),
                    };
                    op.risk.clear();
                }
            }
            let default = ops.first().map(|o| o.name.clone());
            (BoundaryType::SolverLike, ops, hints, default)
        }
        LoweringOutput::Dispatcher(caps) => {
            let hints = caps
                .routing_hints
                .iter()
                .map(|(k, op)| {
                    let from_name = terms(op).any(|t| t == *k);
                    KeywordHint {
                        keyword: k.clone(),
                        operator: op.clone(),
                        weight: if from_name { NAME_HINT_WEIGHT } else { CONTEXT_HINT_WEIGHT },
                    }
                })
                .collect();
            let executable: Vec<&OperatorSpec> = caps.operators.iter().filter(|o| o.is_executable()).collect();
            let default = match executable.as_slice() {
                [only] => Some(only.name.clone()),
                _ => None,
            };
            (BoundaryType::TypedOperator, caps.operators.clone(), hints, default)
        }
        LoweringOutput::Reference(_) | LoweringOutput::Insufficient(_) => {
            (BoundaryType::Guidance, Vec::new(), Vec::new(), None)
        }
    };

    // Shape operators never shadow the deopt names.
    let deopt = deopt_operators();
    let mut taken: BTreeSet<String> = deopt.iter().map(|o| o.name.clone()).collect();
    for op in &mut ops {
        if taken.contains(&op.name) {
            let fresh = (2..)
                .map(|k| format!("{}_{k}", op.name))
                .find(|n| !taken.contains(n))
                .expect("unbounded suffixes");
            for h in hints.iter_mut().filter(|h| h.operator == op.name) {
                h.operator = fresh.clone();
            }
            if default_operator.as_deref() == Some(op.name.as_str()) {
                default_operator = Some(fresh.clone());
            }
            op.name = fresh;
        }
        taken.insert(op.name.clone());
    }

    let mut io = IoContract::default();
    for op in &ops {
        for a in op.argument_schema.iter().filter(|a| a.required) {
            if !io.required_arguments.iter().any(|f| f.name == a.name) {
                io.required_arguments.push(FieldSpec { name: a.name.clone(), tag: a.tag });
            }
            if !io.task_bound_inputs.contains(&a.name) {
                io.task_bound_inputs.push(a.name.clone());
            }
        }
        for o in &op.output_schema {
            if !io.outputs.iter().any(|f| f.name == o.name) {
                io.outputs.push(o.clone());
            }
        }
    }
    if let LoweringOutput::Workflow { graph, .. } = lowered {
        io.task_bound_inputs = graph
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().filter(|i| i.invocation_supplied).map(|i| i.name.clone()))
            .fold(Vec::new(), |mut acc, n| {
                if !acc.contains(&n) {
                    acc.push(n);
                }
                acc
            });
    }

    let risk_flags: RiskSet = ops.iter().flat_map(|o| o.risk.iter().copied()).collect();
    ops.extend(deopt);
    let names: BTreeSet<&str> = ops.iter().map(|o| o.name.as_str()).collect();
    hints.retain(|h| names.contains(h.operator.as_str()));

    let mut contract = BoundaryContract {
        boundary_type,
        fallback: FallbackCapsuleRef {
            capsule_id: package.package_hash.clone(),
            deopt_operators: DeoptOperation::ALL.iter().map(|d| d.name().to_string()).collect(),
        },
        operators: ops,
        io_contract: io,
        risk_flags,
        validation_level: ValidationLevel::Syntactic,
        action_policy: ActionPolicy::default(),
        selection_policy: SelectionPolicy {
            keyword_hints: hints,
            default_operator,
        },
    };
    contract.refresh_validation_level();
    contract
}

/// Cuts `text` to at most `budget` bytes, at a word boundary when one exists.
pub fn truncate_words(text: &str, budget: usize) -> String {
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if text.len() <= budget {
        return text;
    }
    let mut end = budget;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    let cut = match text[..end].rfind(' ') {
        Some(space) if space > 0 && !text[end..].starts_with(' ') => space,
        _ => end,
    };
    text[..cut].trim_end().to_string()
}

pub fn summarize_boundary(contract: &BoundaryContract, metadata: &PackageMetadata) -> BoundarySummary {
    let one_line = if metadata.description.trim().is_empty() {
        let executable = contract.operators.iter().filter(|o| o.is_executable()).count();
        format!(
            "{} skill with {} executable operator{}",
            contract.boundary_type,
            executable,
            if executable == 1 { "" } else { "s" }
        )
    } else {
        truncate_words(&metadata.description, ONE_LINE_BUDGET)
    };
    BoundarySummary {
        handle: format!("run_{}", sanitize_name(&metadata.name)),
        one_line,
        operator_names: contract.operator_names(),
        boundary_type: contract.boundary_type,
        risk_flags: contract.risk_flags.clone(),
        validation_level: contract.validation_level,
    }
}
