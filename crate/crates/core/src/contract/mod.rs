//! The boundary contract: the public ABI of a compiled skill, plus the
//! lossless fallback capsule behind it.

mod build;
mod capsule;
mod evidence;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use build::{build_contract, deopt_operators, summarize_boundary, BoundarySummary, ONE_LINE_BUDGET};
pub use capsule::{build_fallback_capsule, CapsuleAsset, CapsuleError, FallbackCapsule, PackageIdentity};
pub use evidence::{attach_evidence, script_syntax_check, Attestation, SELF_TEST_TIMEOUT};

use crate::digest::Digest;
use crate::provenance::SourceRef;
use crate::risk::{RiskFlag, RiskSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryType {
    Guidance,
    Adapter,
    TypedOperator,
    SolverLike,
}

impl BoundaryType {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryType::Guidance => "guidance",
            BoundaryType::Adapter => "adapter",
            BoundaryType::TypedOperator => "typed_operator",
            BoundaryType::SolverLike => "solver_like",
        }
    }
}

impl fmt::Display for BoundaryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Typed,
    Script,
    Command,
    Deopt,
    Guidance,
}

impl OperatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::Typed => "typed",
            OperatorKind::Script => "script",
            OperatorKind::Command => "command",
            OperatorKind::Deopt => "deopt",
            OperatorKind::Guidance => "guidance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticType {
    Text,
    Number,
    Path,
    Flag,
}

impl SemanticType {
    pub fn as_str(self) -> &'static str {
        match self {
            SemanticType::Text => "text",
            SemanticType::Number => "number",
            SemanticType::Path => "path",
            SemanticType::Flag => "flag",
        }
    }

    /// Guesses a tag from an argument or output name.
    pub fn infer(name: &str) -> SemanticType {
        let n = name.to_ascii_lowercase();
        let path_words = ["path", "file", "dir", "folder", "src", "dst", "out", "input", "output"];
        let number_words = ["count", "num", "size", "limit", "width", "height", "n", "max", "min", "port"];
        if n.contains('.') || n.contains('/') || path_words.iter().any(|w| n.split('_').any(|p| p == *w)) {
            SemanticType::Path
        } else if number_words.iter().any(|w| n.split('_').any(|p| p == *w)) {
            SemanticType::Number
        } else {
            SemanticType::Text
        }
    }

    /// Tag-level shape check of a textual argument value.
    pub fn accepts(self, value: &str) -> bool {
        match self {
            SemanticType::Text => true,
            SemanticType::Number => value.trim().parse::<f64>().is_ok_and(f64::is_finite),
            SemanticType::Path => !value.is_empty() && !value.contains('\0'),
            SemanticType::Flag => matches!(
                value.trim().to_ascii_lowercase().as_str(),
                "" | "true" | "false" | "1" | "0" | "yes" | "no"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    pub tag: SemanticType,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub tag: SemanticType,
}

/// One element of a script argv template.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "part", rename_all = "snake_case")]
pub enum ArgvPart {
    /// Literal text; `{name}` placeholders are filled from arguments.
    Literal { text: String },
    Positional { name: String },
    Option { flag: String, name: String },
    /// Emitted as `flag` when the argument is truthy.
    Switch { flag: String, name: String },
    /// Whitespace-split and appended.
    Rest { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeoptOperation {
    ListSkillAssets,
    GetSkillAsset,
    SearchSkillDocs,
}

impl DeoptOperation {
    pub const ALL: [DeoptOperation; 3] = [
        DeoptOperation::ListSkillAssets,
        DeoptOperation::GetSkillAsset,
        DeoptOperation::SearchSkillDocs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DeoptOperation::ListSkillAssets => "list_skill_assets",
            DeoptOperation::GetSkillAsset => "get_skill_asset",
            DeoptOperation::SearchSkillDocs => "search_skill_docs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "binding", rename_all = "snake_case")]
pub enum Binding {
    Script {
        asset_path: String,
        interpreter: Option<Vec<String>>,
        argv: Vec<ArgvPart>,
    },
    Command {
        template: String,
    },
    /// A connected component of the artifact's workflow graph.
    Workflow {
        step_ids: Vec<String>,
    },
    Guidance {
        chunk_ids: Vec<String>,
        text: String,
    },
    Deopt {
        operation: DeoptOperation,
    },
}

impl Binding {
    pub fn matches_kind(&self, kind: OperatorKind) -> bool {
        matches!(
            (self, kind),
            (Binding::Script { .. }, OperatorKind::Script)
                | (Binding::Command { .. }, OperatorKind::Command)
                | (Binding::Workflow { .. }, OperatorKind::Typed)
                | (Binding::Guidance { .. }, OperatorKind::Guidance)
                | (Binding::Deopt { .. }, OperatorKind::Deopt)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationLevel {
    Syntactic,
    ExecutableTest,
    VerifierBacked,
    Regression,
}

impl ValidationLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            ValidationLevel::Syntactic => "syntactic",
            ValidationLevel::ExecutableTest => "executable_test",
            ValidationLevel::VerifierBacked => "verifier_backed",
            ValidationLevel::Regression => "regression",
        }
    }
}

impl fmt::Display for ValidationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValidationEvidence {
    pub level: ValidationLevel,
    pub description: String,
}

impl ValidationEvidence {
    pub fn new(level: ValidationLevel, description: impl Into<String>) -> Self {
        ValidationEvidence {
            level,
            description: description.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub name: String,
    pub kind: OperatorKind,
    pub description: String,
    pub argument_schema: Vec<ArgSpec>,
    pub output_schema: Vec<FieldSpec>,
    pub binding: Binding,
    pub source_refs: Vec<SourceRef>,
    pub risk: RiskSet,
    pub evidence: Vec<ValidationEvidence>,
}

impl OperatorSpec {
    /// Strongest recorded evidence, never below `syntactic`.
    pub fn evidence_level(&self) -> ValidationLevel {
        self.evidence
            .iter()
            .map(|e| e.level)
            .max()
            .unwrap_or(ValidationLevel::Syntactic)
    }

    /// Operators that execute package content (not deopt, not guidance).
    pub fn is_executable(&self) -> bool {
        matches!(
            self.kind,
            OperatorKind::Typed | OperatorKind::Script | OperatorKind::Command
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoContract {
    pub required_arguments: Vec<FieldSpec>,
    pub outputs: Vec<FieldSpec>,
    pub task_bound_inputs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Execute,
    Guidance,
    Blocked,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Execute => "execute",
            Outcome::Guidance => "guidance",
            Outcome::Blocked => "blocked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPolicy {
    pub default_outcome: Outcome,
    pub deny_risks: BTreeSet<RiskFlag>,
    pub guidance_risks: BTreeSet<RiskFlag>,
    pub min_validation_for_execute: ValidationLevel,
}

impl Default for ActionPolicy {
    fn default() -> Self {
        ActionPolicy {
            default_outcome: Outcome::Execute,
            deny_risks: BTreeSet::from([RiskFlag::Destructive]),
            guidance_risks: BTreeSet::from([RiskFlag::Network, RiskFlag::ExternalSideEffect]),
            min_validation_for_execute: ValidationLevel::Syntactic,
        }
    }
}

impl ActionPolicy {
    /// Checks the disjointness invariant.
    pub fn validate(&self) -> Result<(), String> {
        let both: Vec<&str> = self.deny_risks.intersection(&self.guidance_risks).map(|r| r.as_str()).collect();
        if both.is_empty() {
            Ok(())
        } else {
            Err(format!("risks both denied and guided: {}", both.join(", ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordHint {
    pub keyword: String,
    pub operator: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub keyword_hints: Vec<KeywordHint>,
    pub default_operator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackCapsuleRef {
    pub capsule_id: Digest,
    pub deopt_operators: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryContract {
    pub boundary_type: BoundaryType,
    pub operators: Vec<OperatorSpec>,
    pub io_contract: IoContract,
    pub risk_flags: RiskSet,
    pub validation_level: ValidationLevel,
    pub action_policy: ActionPolicy,
    pub selection_policy: SelectionPolicy,
    pub fallback: FallbackCapsuleRef,
}

impl BoundaryContract {
    pub fn operator(&self, name: &str) -> Option<&OperatorSpec> {
        self.operators.iter().find(|o| o.name == name)
    }

    pub fn operator_names(&self) -> Vec<String> {
        self.operators.iter().map(|o| o.name.clone()).collect()
    }

    /// Recomputes the contract level from its operators.
    pub fn refresh_validation_level(&mut self) {
        let levels: Vec<ValidationEvidence> = self
            .operators
            .iter()
            .filter(|o| o.is_executable())
            .map(|o| ValidationEvidence::new(o.evidence_level(), o.name.clone()))
            .collect();
        self.validation_level = assign_validation_level(&levels);
    }
}

/// Minimum level across the given per-operator evidence; `syntactic` when
/// there is none.
pub fn assign_validation_level(evidence: &[ValidationEvidence]) -> ValidationLevel {
    evidence
        .iter()
        .map(|e| e.level)
        .min()
        .unwrap_or(ValidationLevel::Syntactic)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(level: ValidationLevel) -> ValidationEvidence {
        ValidationEvidence::new(level, "t")
    }

    #[test]
    fn validation_level_minimum() {
        use ValidationLevel::*;
        assert_eq!(assign_validation_level(&[]), Syntactic);
        assert_eq!(assign_validation_level(&[ev(ExecutableTest), ev(Regression)]), ExecutableTest);
        assert_eq!(assign_validation_level(&[ev(VerifierBacked)]), VerifierBacked);
    }

    #[test]
    fn level_order() {
        use ValidationLevel::*;
        assert!(Syntactic < ExecutableTest && ExecutableTest < VerifierBacked && VerifierBacked < Regression);
    }

    #[test]
    fn default_policy_is_disjoint() {
        assert!(ActionPolicy::default().validate().is_ok());
        let mut p = ActionPolicy::default();
        p.guidance_risks.insert(RiskFlag::Destructive);
        assert!(p.validate().is_err());
    }

    #[test]
    fn semantic_tags() {
        assert_eq!(SemanticType::infer("input_path"), SemanticType::Path);
        assert_eq!(SemanticType::infer("max_count"), SemanticType::Number);
        assert_eq!(SemanticType::infer("title"), SemanticType::Text);
        assert!(SemanticType::Number.accepts("3.5"));
        assert!(!SemanticType::Number.accepts("three"));
        assert!(SemanticType::Flag.accepts("true"));
        assert!(!SemanticType::Flag.accepts("maybe"));
    }
}
