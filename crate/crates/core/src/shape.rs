//! Source-shape classification.
//!
//! Structural features are counted from the entry document and assets, a
//! judge is consulted, and the final shape is resolved conservatively:
//! structural predicates decide whenever any of them fires, in the order
//! workflow > dispatcher > reference, and the judge only breaks the case
//! where none fire.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::judge::{judge_shape, CompletionRequest, JudgeVerdict, ShapeJudge, VerdictLabel};
use crate::markdown::{self, LineKind, Scan};
use crate::package::{AssetRecord, AssetType, SkillPackage};
use crate::provenance::Grounding;
use crate::terms::terms;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Workflow,
    Dispatcher,
    Reference,
    Insufficient,
}

impl Shape {
    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Workflow => "workflow",
            Shape::Dispatcher => "dispatcher",
            Shape::Reference => "reference",
            Shape::Insufficient => "insufficient",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuralFeatures {
    pub heading_count: usize,
    pub ordered_list_blocks: usize,
    pub command_blocks: usize,
    pub script_asset_count: usize,
    pub callable_signature_count: usize,
    pub verification_phrase_count: usize,
    pub reference_section_count: usize,
    pub prose_ratio: f64,
    pub entry_byte_length: usize,
    pub io_mention_count: usize,
}

/// Tunable thresholds for the shape predicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeThresholds {
    pub workflow_min_ordered_lists: usize,
    pub workflow_min_command_blocks: usize,
    pub workflow_min_verification_phrases: usize,
    pub dispatcher_min_scripts: usize,
    pub dispatcher_min_signatures: usize,
    pub reference_min_prose_ratio: f64,
    pub reference_min_sections: usize,
    pub min_entry_bytes: usize,
}

impl Default for ShapeThresholds {
    fn default() -> Self {
        ShapeThresholds {
            workflow_min_ordered_lists: 1,
            workflow_min_command_blocks: 1,
            workflow_min_verification_phrases: 2,
            dispatcher_min_scripts: 2,
            dispatcher_min_signatures: 3,
            reference_min_prose_ratio: 0.6,
            reference_min_sections: 1,
            min_entry_bytes: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Predicates {
    pub workflow: bool,
    pub dispatcher: bool,
    pub reference: bool,
    /// Entry shorter than the minimum; forces `insufficient`.
    pub below_floor: bool,
}

impl Predicates {
    pub fn evaluate(f: &StructuralFeatures, t: &ShapeThresholds) -> Self {
        let has_steps = f.ordered_list_blocks >= t.workflow_min_ordered_lists;
        Predicates {
            workflow: has_steps
                && (f.command_blocks >= t.workflow_min_command_blocks
                    || f.verification_phrase_count >= t.workflow_min_verification_phrases),
            dispatcher: f.script_asset_count >= t.dispatcher_min_scripts
                || f.callable_signature_count >= t.dispatcher_min_signatures,
            reference: f.prose_ratio >= t.reference_min_prose_ratio
                && f.reference_section_count >= t.reference_min_sections,
            below_floor: f.entry_byte_length < t.min_entry_bytes,
        }
    }

    /// Highest-priority structural shape, ignoring the floor.
    pub fn structural_shape(&self) -> Option<Shape> {
        if self.workflow {
            Some(Shape::Workflow)
        } else if self.dispatcher {
            Some(Shape::Dispatcher)
        } else if self.reference {
            Some(Shape::Reference)
        } else {
            None
        }
    }

    pub fn fired(&self) -> Vec<Shape> {
        [
            (self.workflow, Shape::Workflow),
            (self.dispatcher, Shape::Dispatcher),
            (self.reference, Shape::Reference),
        ]
        .into_iter()
        .filter_map(|(on, s)| on.then_some(s))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub feature: String,
    pub value: f64,
    pub contribution: String,
}

impl EvidenceRecord {
    fn new(feature: &str, value: f64, contribution: impl Into<String>) -> Self {
        EvidenceRecord {
            feature: feature.to_string(),
            value,
            contribution: contribution.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDecision {
    pub shape: Shape,
    pub evidence: Vec<EvidenceRecord>,
    pub judge_verdict: Option<JudgeVerdict>,
    pub diagnostic: Option<String>,
}

impl ShapeDecision {
    /// Demotes a decision to `insufficient`, e.g. after a failed lowering.
    pub fn demote(&mut self, diagnostic: impl Into<String>) {
        let diagnostic = diagnostic.into();
        self.evidence.push(EvidenceRecord::new(
            "lowering_failed",
            0.0,
            format!("demoted from {}: {diagnostic}", self.shape),
        ));
        self.shape = Shape::Insufficient;
        self.diagnostic = Some(diagnostic);
    }
}

/// Fenced-block languages treated as command blocks.
const COMMAND_LANGS: &[&str] = &["sh", "bash", "shell", "console"];

/// First words that mark an untagged block or code span as a command.
pub const COMMAND_WORDS: &[&str] = &[
    "python", "python3", "bash", "sh", "node", "npm", "npx", "pip", "pip3", "uv", "cargo", "make",
    "git", "ls", "cd", "cp", "mv", "mkdir", "echo", "cat", "curl", "wget", "rm", "docker", "chmod",
    "grep", "sed", "awk", "tar", "unzip", "zip", "pytest", "ruby", "java", "go", "test", "touch",
    "find", "jq", "ffmpeg", "pandoc", "libreoffice", "soffice", "convert", "head", "tail", "wc",
    "sort", "diff", "cmp", "sha256sum", "tee", "printf", "env", "export", "source",
];

const VERIFICATION_PHRASES: &[&str] = &["verify", "check that", "expected output", "validate"];

/// Heading words that put bare `name(args)` lines into API context.
const API_HEADING_WORDS: &[&str] = &[
    "api", "function", "functions", "method", "methods", "operation", "operations", "commands",
    "tools", "interface", "signatures", "callable", "callables",
];

const DEFINITION_KEYWORDS: &[&str] = &["def", "function", "fn", "func"];

pub fn is_command_fence(fence: &markdown::Fence<'_>) -> bool {
    if COMMAND_LANGS.contains(&fence.lang.as_str()) {
        return true;
    }
    fence.lang.is_empty() && first_command_line(fence.body).is_some_and(starts_with_command_word)
}

/// First non-blank, non-comment line of a block, with any `$ ` prompt removed.
pub fn first_command_line(body: &str) -> Option<&str> {
    body.lines()
        .map(|l| l.trim())
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.strip_prefix("$ ").unwrap_or(l))
}

pub fn starts_with_command_word(text: &str) -> bool {
    let first = text.split_whitespace().next().unwrap_or("");
    let base = first.rsplit('/').next().unwrap_or(first);
    COMMAND_WORDS.contains(&base) || first.starts_with("./")
}

/// A callable signature found in package text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub name: String,
    pub params: Vec<String>,
    /// Byte range of the matched text within its document.
    pub start: usize,
    pub end: usize,
    pub heading: Option<String>,
}

/// Parses `name(args)` at the start of `s`.
fn parse_call(s: &str) -> Option<(String, Vec<String>, usize)> {
    let name_len = s
        .char_indices()
        .take_while(|&(i, c)| {
            if i == 0 {
                c.is_ascii_alphabetic() || c == '_'
            } else {
                c.is_ascii_alphanumeric() || c == '_' || c == '.'
            }
        })
        .count();
    if name_len == 0 || s.as_bytes().get(name_len) != Some(&b'(') {
        return None;
    }
    let close = s[name_len + 1..].find([')', '('])?;
    if s.as_bytes()[name_len + 1 + close] != b')' {
        return None;
    }
    let args = &s[name_len + 1..name_len + 1 + close];
    let params = args
        .split(',')
        .map(|p| {
            let p = p.trim().trim_start_matches('*');
            let p = p.split([':', '=']).next().unwrap_or("").trim();
            p.rsplit(' ').next().unwrap_or("").to_string()
        })
        .filter(|p| !p.is_empty() && p != "self")
        .collect();
    Some((s[..name_len].to_string(), params, name_len + 2 + close))
}

fn keyword_signature(line: &str) -> Option<(usize, String, Vec<String>, usize)> {
    let mut offset = 0;
    for word in line.split_inclusive(|c: char| c.is_whitespace()) {
        let w = word.trim_end();
        if DEFINITION_KEYWORDS.contains(&w) {
            let after = offset + word.len();
            let rest = &line[after..];
            let skipped = rest.len() - rest.trim_start().len();
            if let Some((name, params, used)) = parse_call(rest.trim_start()) {
                return Some((offset, name, params, after + skipped + used));
            }
        }
        offset += word.len();
    }
    None
}

fn in_api_context(heading: Option<&str>) -> bool {
    heading.is_some_and(|h| {
        terms(h).any(|t| API_HEADING_WORDS.contains(&t.as_str()))
    })
}

/// Detects callable signatures: `def/function/fn name(args)` anywhere, and
/// bare `name(args)` lines under API-like headings (or as heading titles).
pub fn detect_signatures(scan: &Scan<'_>) -> Vec<Signature> {
    let mut found = Vec::new();
    for (i, line) in scan.lines.iter().enumerate() {
        let heading = scan.heading_above(i).map(str::to_string);
        if let Some((s, name, params, e)) = keyword_signature(line.text) {
            found.push(Signature {
                name,
                params,
                start: line.start + s,
                end: line.start + e,
                heading,
            });
            continue;
        }
        let kind = scan.kinds[i];
        let bare_ok = match kind {
            LineKind::Heading(_) => true,
            LineKind::Text | LineKind::Bullet | LineKind::OrderedItem(_) => {
                in_api_context(heading.as_deref())
            }
            _ => false,
        };
        if !bare_ok {
            continue;
        }
        let mut body = line.text.trim_start();
        let mut lead = line.text.len() - body.len();
        for prefix in ["#", "-", "*", "+"] {
            while let Some(rest) = body.strip_prefix(prefix) {
                lead += body.len() - rest.len();
                body = rest;
            }
        }
        if let LineKind::OrderedItem(_) = kind {
            if let Some((_, off)) = markdown::ordered_marker(line.text) {
                lead = off;
                body = &line.text[off..];
            }
        }
        let trimmed = body.trim_start();
        lead += body.len() - trimmed.len();
        let (tick, inner) = match trimmed.strip_prefix('`') {
            Some(rest) => (1, rest),
            None => (0, trimmed),
        };
        if let Some((name, params, used)) = parse_call(inner) {
            let start = line.start + lead + tick;
            found.push(Signature {
                name,
                params,
                start,
                end: start + used,
                heading: match kind {
                    LineKind::Heading(_) => scan.heading_above(i.saturating_sub(1)).map(str::to_string),
                    _ => heading,
                },
            });
        }
    }
    found
}

fn count_phrases(text: &str) -> usize {
    let lower = text.to_lowercase();
    VERIFICATION_PHRASES
        .iter()
        .map(|p| lower.matches(p).count())
        .sum()
}

fn reference_sections(scan: &Scan<'_>) -> usize {
    let mut count = 0;
    let mut in_table = false;
    let mut math_open = false;
    for (i, kind) in scan.kinds.iter().enumerate() {
        match kind {
            LineKind::TableRow => {
                if !in_table {
                    count += 1;
                }
                in_table = true;
                continue;
            }
            LineKind::MathDelimiter => {
                let t = scan.lines[i].text.trim();
                let single_line = t.len() > 4 && t.ends_with("$$");
                if single_line {
                    count += 1;
                } else {
                    if !math_open {
                        count += 1;
                    }
                    math_open = !math_open;
                }
            }
            LineKind::Heading(_) => {
                let h = markdown::heading_text(scan.lines[i].text).to_lowercase();
                if h.contains("example") {
                    count += 1;
                }
            }
            _ => {}
        }
        in_table = false;
    }
    count
        + scan
            .fences
            .iter()
            .filter(|f| matches!(f.lang.as_str(), "math" | "latex" | "tex"))
            .count()
}

/// Counts structural features from the entry document, the asset records,
/// and the text of document-type assets.
pub fn extract_features_from(
    entry: &str,
    assets: &[AssetRecord],
    documents: &[(String, String)],
) -> StructuralFeatures {
    let scan = markdown::scan(entry);
    let prose_bytes: usize = scan
        .kinds
        .iter()
        .zip(&scan.lines)
        .filter(|(k, l)| matches!(k, LineKind::Text | LineKind::Bullet) && !l.is_blank())
        .map(|(_, l)| l.end - l.start)
        .sum();
    let mut signatures = detect_signatures(&scan).len();
    for (path, text) in documents {
        let is_doc = assets
            .iter()
            .any(|a| &a.path == path && a.asset_type == AssetType::Document);
        if is_doc {
            signatures += detect_signatures(&markdown::scan(text)).len();
        }
    }
    StructuralFeatures {
        heading_count: scan.headings().count(),
        ordered_list_blocks: scan.lists.len(),
        command_blocks: scan.fences.iter().filter(|f| is_command_fence(f)).count(),
        script_asset_count: assets
            .iter()
            .filter(|a| a.asset_type == AssetType::Script)
            .count(),
        callable_signature_count: signatures,
        verification_phrase_count: count_phrases(entry),
        reference_section_count: reference_sections(&scan),
        prose_ratio: if entry.is_empty() {
            0.0
        } else {
            prose_bytes as f64 / entry.len() as f64
        },
        entry_byte_length: entry.len(),
        io_mention_count: terms(entry)
            .filter(|t| matches!(t.as_str(), "input" | "inputs" | "output" | "outputs"))
            .count(),
    }
}

pub fn extract_features(package: &SkillPackage) -> StructuralFeatures {
    extract_features_from(
        &package.entry_document,
        &package.assets,
        &package.text_documents(),
    )
}

fn feature_evidence(f: &StructuralFeatures, p: &Predicates) -> Vec<EvidenceRecord> {
    let tag = |on: bool, shape: &str| if on { shape.to_string() } else { "none".to_string() };
    vec![
        EvidenceRecord::new("heading_count", f.heading_count as f64, "context"),
        EvidenceRecord::new("ordered_list_blocks", f.ordered_list_blocks as f64, tag(p.workflow, "workflow")),
        EvidenceRecord::new("command_blocks", f.command_blocks as f64, tag(p.workflow, "workflow")),
        EvidenceRecord::new(
            "verification_phrase_count",
            f.verification_phrase_count as f64,
            tag(p.workflow, "workflow"),
        ),
        EvidenceRecord::new("script_asset_count", f.script_asset_count as f64, tag(p.dispatcher, "dispatcher")),
        EvidenceRecord::new(
            "callable_signature_count",
            f.callable_signature_count as f64,
            tag(p.dispatcher, "dispatcher"),
        ),
        EvidenceRecord::new("prose_ratio", f.prose_ratio, tag(p.reference, "reference")),
        EvidenceRecord::new(
            "reference_section_count",
            f.reference_section_count as f64,
            tag(p.reference, "reference"),
        ),
        EvidenceRecord::new("entry_byte_length", f.entry_byte_length as f64, tag(p.below_floor, "floor")),
        EvidenceRecord::new("io_mention_count", f.io_mention_count as f64, "context"),
        EvidenceRecord::new("setup_requirements", f.prose_ratio, "folded into prose_ratio"),
        EvidenceRecord::new(
            "reference_density",
            f.reference_section_count as f64,
            "folded into reference_section_count",
        ),
    ]
}

/// Classifies with the default thresholds.
pub fn classify(
    features: &StructuralFeatures,
    judge: &mut dyn ShapeJudge,
    grounding: &Grounding,
) -> ShapeDecision {
    classify_with(features, judge, grounding, &ShapeThresholds::default())
}

pub fn classify_with(
    features: &StructuralFeatures,
    judge: &mut dyn ShapeJudge,
    grounding: &Grounding,
    thresholds: &ShapeThresholds,
) -> ShapeDecision {
    let preds = Predicates::evaluate(features, thresholds);
    let mut evidence = feature_evidence(features, &preds);

    let request = CompletionRequest::shape_judgment(features.clone(), grounding.clone());
    let verdict = match judge_shape(judge, &request) {
        Ok(v) => Some(v),
        Err(e) => {
            evidence.push(EvidenceRecord::new(
                "judge_unavailable",
                0.0,
                format!("degraded to structural evidence: {e}"),
            ));
            None
        }
    };
    let judge_label = verdict.as_ref().map(|v| v.label).unwrap_or(VerdictLabel::Abstain);

    let structural = preds.structural_shape();
    if let (Some(s), Some(js)) = (structural, judge_label.shape()) {
        if s != js {
            evidence.push(EvidenceRecord::new(
                "judge_conflict",
                verdict.as_ref().map(|v| v.confidence).unwrap_or(0.0),
                format!("judge proposed {js}; structural {s} retained"),
            ));
        }
    }

    let (shape, diagnostic) = if preds.below_floor {
        let msg = if features.entry_byte_length == 0 {
            "missing entry content".to_string()
        } else {
            format!(
                "entry content is {} bytes, below the {}-byte minimum",
                features.entry_byte_length, thresholds.min_entry_bytes
            )
        };
        (Shape::Insufficient, Some(msg))
    } else if let Some(s) = structural {
        (s, None)
    } else {
        match judge_label {
            VerdictLabel::Abstain => (
                Shape::Insufficient,
                Some("no structural predicate fired and the judge abstained".to_string()),
            ),
            VerdictLabel::Insufficient => (
                Shape::Insufficient,
                Some("judge reported too little reliable structure".to_string()),
            ),
            other => {
                let s = other.shape().expect("non-abstain label maps to a shape");
                evidence.push(EvidenceRecord::new(
                    "judge_label",
                    verdict.as_ref().map(|v| v.confidence).unwrap_or(0.0),
                    format!("no structural predicate fired; grounded judge label {s} adopted"),
                ));
                (s, None)
            }
        }
    };

    ShapeDecision {
        shape,
        evidence,
        judge_verdict: verdict,
        diagnostic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::Digest;
    use crate::judge::DeterministicJudge;

    fn asset(path: &str, ty: AssetType) -> AssetRecord {
        AssetRecord {
            path: path.into(),
            asset_type: ty,
            size: 0,
            digest: Digest::of(b""),
        }
    }

    #[test]
    fn empty_entry_has_zero_features() {
        let f = extract_features_from("", &[], &[]);
        assert_eq!(f, StructuralFeatures::default());
    }

    #[test]
    fn numbered_block_counts_once() {
        let f = extract_features_from("1. one\n2. two\n3. three\n", &[], &[]);
        assert_eq!(f.ordered_list_blocks, 1);
    }

    #[test]
    fn script_assets_counted() {
        let assets = [asset("a.py", AssetType::Script), asset("b.sh", AssetType::Script)];
        assert_eq!(extract_features_from("x", &assets, &[]).script_asset_count, 2);
    }

    #[test]
    fn command_blocks_by_tag_or_first_word() {
        let doc = "```bash\nls\n```\n```\npython run.py\n```\n```python\nprint(1)\n```\n```\nhello world\n```\n";
        assert_eq!(extract_features_from(doc, &[], &[]).command_blocks, 2);
    }

    #[test]
    fn signatures_in_api_context_and_keywords() {
        let doc = "# Intro\nmerge(a, b) is not counted here\n## API\n- `clean_refs(path)`: tidy\n- split(doc, n)\n```python\ndef load(path: str) -> None:\n```\n### convert(src, dst)\n";
        let scan = markdown::scan(doc);
        let sigs = detect_signatures(&scan);
        let names: Vec<_> = sigs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, vec!["clean_refs", "split", "load", "convert"]);
        assert_eq!(sigs[0].params, vec!["path"]);
        assert_eq!(&doc[sigs[0].start..sigs[0].end], "clean_refs(path)");
        assert_eq!(sigs[2].params, vec!["path"]);
    }

    #[test]
    fn verification_and_io() {
        let f = extract_features_from("Verify the input. Check that output exists. validate!", &[], &[]);
        assert_eq!(f.verification_phrase_count, 3);
        assert_eq!(f.io_mention_count, 2);
    }

    #[test]
    fn reference_sections_and_prose() {
        let doc = "# Guide\n\nThis is prose.\n\n| a | b |\n|---|---|\n\n$$\nx^2\n$$\n\n## Examples\n";
        let f = extract_features_from(doc, &[], &[]);
        assert_eq!(f.reference_section_count, 3);
        let expected = "This is prose.\n".len() as f64 / doc.len() as f64;
        assert!((f.prose_ratio - expected).abs() < 1e-12);
    }

    fn classify_default(f: &StructuralFeatures) -> ShapeDecision {
        classify(f, &mut DeterministicJudge::default(), &Grounding::default())
    }

    #[test]
    fn workflow_wins_with_steps_and_commands() {
        let f = StructuralFeatures {
            ordered_list_blocks: 2,
            command_blocks: 1,
            script_asset_count: 3,
            entry_byte_length: 500,
            ..Default::default()
        };
        assert_eq!(classify_default(&f).shape, Shape::Workflow);
    }

    #[test]
    fn dispatcher_without_order() {
        let f = StructuralFeatures {
            script_asset_count: 2,
            entry_byte_length: 500,
            ..Default::default()
        };
        assert_eq!(classify_default(&f).shape, Shape::Dispatcher);
    }

    #[test]
    fn empty_entry_is_insufficient() {
        let d = classify_default(&StructuralFeatures::default());
        assert_eq!(d.shape, Shape::Insufficient);
        assert_eq!(d.diagnostic.as_deref(), Some("missing entry content"));
    }

    #[test]
    fn floor_overrides_everything() {
        let f = StructuralFeatures {
            ordered_list_blocks: 3,
            command_blocks: 3,
            entry_byte_length: 63,
            ..Default::default()
        };
        assert_eq!(classify_default(&f).shape, Shape::Insufficient);
    }

    #[test]
    fn no_predicate_and_abstain_is_insufficient() {
        let f = StructuralFeatures {
            entry_byte_length: 1000,
            prose_ratio: 0.9,
            ..Default::default()
        };
        let d = classify_default(&f);
        assert_eq!(d.shape, Shape::Insufficient);
        assert!(d.diagnostic.unwrap().contains("abstained"));
    }
}
