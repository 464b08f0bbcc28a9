//! The compile pipeline: load, classify, lower, build the contract, attach
//! evidence, capture the capsule, and store the artifact.

use std::path::Path;

use thiserror::Error;

use crate::contract::{
    attach_evidence, build_contract, build_fallback_capsule, summarize_boundary, Attestation, CapsuleError,
};
use crate::judge::ShapeJudge;
use crate::lowering::{lower_dispatcher, lower_reference, lower_workflow, InsufficiencyDiagnostic, LoweringOutput};
use crate::package::{load_package, CompilationInput, CompilePolicy, PackageError};
use crate::provenance::Grounding;
use crate::runtime::now;
use crate::shape::{classify, extract_features, Shape, ShapeDecision};
use crate::store::{load_artifact, store_artifact, CompileMetadata, CompiledArtifact, StoreError};

pub const COMPILER_VERSION: &str = concat!("skillc ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Capsule(#[from] CapsuleError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub struct CompileOutcome {
    pub artifact: CompiledArtifact,
    pub decision: ShapeDecision,
    /// Attestations that named no operator.
    pub unmatched_attestations: Vec<Attestation>,
}

fn lower(input: &CompilationInput, decision: &mut ShapeDecision, judge: &mut dyn ShapeJudge) -> LoweringOutput {
    let package = &input.package;
    let attempt = match decision.shape {
        Shape::Workflow => lower_workflow(package, decision, judge).map(|(graph, report)| LoweringOutput::Workflow { graph, report }),
        Shape::Dispatcher => lower_dispatcher(package, decision).map(LoweringOutput::Dispatcher),
        Shape::Reference => Ok(LoweringOutput::Reference(lower_reference(package))),
        Shape::Insufficient => Ok(LoweringOutput::Insufficient(InsufficiencyDiagnostic {
            message: decision.diagnostic.clone().unwrap_or_else(|| "insufficient structure".into()),
            evidence: decision.evidence.clone(),
        })),
    };
    attempt.unwrap_or_else(|e| {
        decision.demote(e.to_string());
        LoweringOutput::Insufficient(InsufficiencyDiagnostic {
            message: e.to_string(),
            evidence: decision.evidence.clone(),
        })
    })
}

/// Compiles a loaded package into an artifact without storing it.
pub fn compile_package(
    input: &CompilationInput,
    judge: &mut dyn ShapeJudge,
    attestations: &[Attestation],
) -> Result<CompileOutcome, CompileError> {
    let package = &input.package;
    let features = extract_features(package);
    let grounding = Grounding::new(&package.entry_document, package.text_documents());
    let mut decision = classify(&features, judge, &grounding);
    let lowering_payload = lower(input, &mut decision, judge);

    let mut contract = build_contract(&lowering_payload, package, &input.policy);
    let unmatched = attach_evidence(&mut contract, package, attestations);
    let capsule = build_fallback_capsule(package)?;
    let summary = summarize_boundary(&contract, &package.metadata);

    let mut notes = Vec::new();
    if let Some(d) = &decision.diagnostic {
        notes.push(format!("diagnostic: {d}"));
    }
    if input.policy.task_bound_adaptation {
        notes.push("task_bound_adaptation requested; the contract is task-independent".into());
    }
    if !input.tool_interface.is_empty() {
        let names: Vec<&str> = input.tool_interface.iter().map(|t| t.name.as_str()).collect();
        notes.push(format!("tool interface recorded ({}); adapters are not synthesized", names.join(", ")));
    }
    let artifact = CompiledArtifact {
        package_hash: package.package_hash.clone(),
        summary,
        contract,
        lowering_payload,
        capsule,
        compile_metadata: CompileMetadata {
            compiler_version: COMPILER_VERSION.to_string(),
            judge_identity: judge.identity(),
            timestamp: now(),
            environment: input.environment.clone(),
            notes,
        },
    };
    Ok(CompileOutcome { artifact, decision, unmatched_attestations: unmatched })
}

#[derive(Debug, Clone)]
pub struct StoredCompile {
    pub artifact: CompiledArtifact,
    /// `None` when a stored artifact for the same hash was reused.
    pub decision: Option<ShapeDecision>,
    pub reused: bool,
}

/// Loads `skill_dir`, reuses a stored artifact for its hash when allowed,
/// otherwise compiles and stores.
pub fn compile_dir(
    skill_dir: &Path,
    store_root: &Path,
    policy: CompilePolicy,
    judge: &mut dyn ShapeJudge,
) -> Result<StoredCompile, CompileError> {
    let package = load_package(skill_dir)?;
    if policy.cache_reuse {
        if let Ok(artifact) = load_artifact(&package.package_hash, store_root) {
            return Ok(StoredCompile { artifact, decision: None, reused: true });
        }
    }
    let mut input = CompilationInput::new(package);
    input.policy = policy;
    let outcome = compile_package(&input, judge, &[])?;
    store_artifact(&outcome.artifact, store_root)?;
    Ok(StoredCompile { artifact: outcome.artifact, decision: Some(outcome.decision), reused: false })
}
