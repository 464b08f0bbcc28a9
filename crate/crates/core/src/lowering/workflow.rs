//! Workflow extraction from ordered lists and command blocks.

use std::collections::BTreeSet;

use super::{
    normalize_graph, validate_graph, ExecutionSpec, IoSpec, LoweringError, StepType,
    ValidationContext, ValidationReport, WorkflowGraph, WorkflowNode,
};
use crate::judge::{complete_workflow_draft, CompletionRequest, ShapeJudge};
use crate::markdown::{self, Fence, ListItem, Scan};
use crate::package::{AssetRecord, AssetType, SkillPackage};
use crate::provenance::{Grounding, SourceDoc, SourceRef};
use crate::risk::{infer_risk, RiskFlag};
use crate::shape::{extract_features_from, first_command_line, is_command_fence, starts_with_command_word, Shape, ShapeDecision};

/// Leading verbs that mark a step as something to do rather than prose.
pub const IMPERATIVE_VERBS: &[&str] = &[
    "run", "execute", "create", "generate", "convert", "build", "install", "write", "update",
    "apply", "compile", "export", "import", "extract", "merge", "render", "format", "clean",
    "deploy", "download", "upload", "parse", "transform", "analyze", "analyse", "fetch", "save",
    "copy", "move", "call", "invoke", "test", "edit", "produce", "prepare", "process", "load",
];

const INTERPRETERS: &[&str] = &[
    "python", "python3", "bash", "sh", "node", "ruby", "perl", "uv", "deno", "zsh",
];

const INPUT_WORDS: &[&str] = &[
    "input", "inputs", "read", "reads", "consume", "consumes", "use", "uses", "using", "require",
    "requires", "take", "takes",
];

const OUTPUT_WORDS: &[&str] = &[
    "output", "outputs", "produce", "produces", "write", "writes", "create", "creates", "save",
    "saves", "generate", "generates", "emit", "emits",
];

const VERIFY_WORDS: &[&str] = &["verify", "check", "validate", "ensure", "confirm", "assert"];

/// Resolves a script reference: exact path, `./path`, or a unique basename.
fn resolve_script<'a>(token: &str, scripts: &[&'a AssetRecord]) -> Option<&'a AssetRecord> {
    let t = token.trim_start_matches("./");
    if let Some(a) = scripts.iter().find(|a| a.path == t) {
        return Some(a);
    }
    let mut by_base = scripts
        .iter()
        .filter(|a| a.path.rsplit('/').next() == Some(t) || a.path.ends_with(&format!("/{t}")));
    match (by_base.next(), by_base.next()) {
        (Some(a), None) => Some(a),
        _ => None,
    }
}

/// Interprets one command line as a script call or a plain command.
fn resolve_command(cmd: &str, scripts: &[&AssetRecord]) -> Option<ExecutionSpec> {
    let cmd = cmd.trim();
    let cmd = cmd.strip_prefix("$ ").unwrap_or(cmd);
    let tokens: Vec<&str> = cmd.split_whitespace().collect();
    for (k, tok) in tokens.iter().enumerate() {
        if let Some(asset) = resolve_script(tok, scripts) {
            let prefix_ok = tokens[..k].iter().all(|t| {
                let base = t.rsplit('/').next().unwrap_or(t);
                INTERPRETERS.contains(&base) || *t == "run" || t.starts_with('-')
            });
            if prefix_ok {
                return Some(ExecutionSpec::Script {
                    asset_path: asset.path.clone(),
                    args: tokens[k + 1..].iter().map(|s| s.to_string()).collect(),
                });
            }
            break;
        }
    }
    starts_with_command_word(cmd).then(|| ExecutionSpec::Command {
        template: cmd.to_string(),
    })
}

fn spec_from_fence(fence: &Fence<'_>, scripts: &[&AssetRecord]) -> Option<ExecutionSpec> {
    let lines: Vec<&str> = fence
        .body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.strip_prefix("$ ").unwrap_or(l))
        .collect();
    match lines.as_slice() {
        [] => None,
        [one] => resolve_command(one, scripts).or_else(|| {
            Some(ExecutionSpec::Command {
                template: one.to_string(),
            })
        }),
        many => Some(ExecutionSpec::Command {
            template: many.join("\n"),
        }),
    }
}

fn clean_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Splits item text into named inputs, outputs, and unassigned code spans.
fn parse_io(text: &str) -> (Vec<String>, Vec<String>, Vec<&str>) {
    #[derive(Clone, Copy, PartialEq)]
    enum Mode {
        None,
        Input,
        Output,
    }
    let mut events: Vec<(Option<&str>, &str)> = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'`' {
            let ticks = bytes[i..].iter().take_while(|&&b| b == b'`').count();
            let delim = &text[i..i + ticks];
            if let Some(rel) = text[i + ticks..].find(delim) {
                let inner = text[i + ticks..i + ticks + rel].trim();
                if !inner.is_empty() {
                    events.push((Some(inner), ""));
                }
                i += ticks + rel + ticks;
                continue;
            }
            i += ticks;
            continue;
        }
        if bytes[i].is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'`' {
            i += 1;
        }
        events.push((None, &text[start..i]));
    }

    let (mut inputs, mut outputs, mut free) = (Vec::new(), Vec::new(), Vec::new());
    let mut mode = Mode::None;
    for (span, word) in events {
        match span {
            Some(inner) => match mode {
                Mode::Input => inputs.push(inner.to_string()),
                Mode::Output => outputs.push(inner.to_string()),
                Mode::None => free.push(inner),
            },
            None => {
                let w = clean_word(word);
                if INPUT_WORDS.contains(&w.as_str()) {
                    mode = Mode::Input;
                } else if OUTPUT_WORDS.contains(&w.as_str()) {
                    mode = Mode::Output;
                } else if !matches!(w.as_str(), "" | "and" | "or" | "the" | "a" | "an" | "to" | "into" | "from" | "file" | "files" | "as") {
                    mode = Mode::None;
                }
                if word.ends_with(['.', ';', ')']) {
                    mode = Mode::None;
                }
            }
        }
    }
    (inputs, outputs, free)
}

fn step_name(text: &str) -> String {
    let t = text.replace("**", "");
    let t = t.trim().trim_end_matches(':').trim();
    let first_sentence = t.split(". ").next().unwrap_or(t);
    first_sentence.to_string()
}

fn leading_verb(text: &str) -> String {
    text.split_whitespace()
        .map(clean_word)
        .find(|w| !w.is_empty())
        .unwrap_or_default()
}

/// Builds the node for one ordered-list item.
fn item_node(
    scan: &Scan<'_>,
    item: &ListItem<'_>,
    index: usize,
    scripts: &[&AssetRecord],
    script_text: &dyn Fn(&str) -> Option<String>,
) -> WorkflowNode {
    let entry = scan.doc;
    let text = scan.item_text(item);
    let mut node = WorkflowNode::new(format!("s{:03}", index + 1), step_name(item.text), StepType::Manual);
    let line = scan.lines[item.line];
    node.provenance
        .extend(SourceRef::capture(SourceDoc::Entry, entry, item.text_start, line.content_end()));

    let (inputs, outputs, free) = parse_io(&text);
    let mut spec = None;
    for &f in &item.fences {
        let fence = &scan.fences[f];
        if is_command_fence(fence) || first_command_line(fence.body).is_some_and(starts_with_command_word) {
            if let Some(s) = spec_from_fence(fence, scripts) {
                node.provenance.extend(SourceRef::capture(
                    SourceDoc::Entry,
                    entry,
                    fence.body_start,
                    fence.body_start + fence.body.len(),
                ));
                spec = Some(s);
                break;
            }
        }
    }
    if spec.is_none() {
        spec = free.iter().find_map(|s| resolve_command(s, scripts));
    }

    for name in inputs {
        if !node.inputs.iter().any(|i| i.name == name) {
            node.inputs.push(IoSpec::named(name));
        }
    }
    for name in outputs {
        if !node.outputs.iter().any(|o| o.name == name) {
            node.outputs.push(IoSpec::named(name));
        }
    }

    let verb = leading_verb(item.text);
    match spec {
        Some(s) => {
            for p in s.placeholders() {
                match node.inputs.iter_mut().find(|i| i.name == p) {
                    Some(i) => i.invocation_supplied = true,
                    None => node.inputs.push(IoSpec {
                        name: p,
                        description: "supplied at invocation".to_string(),
                        invocation_supplied: true,
                    }),
                }
            }
            node.risk = match &s {
                ExecutionSpec::Script { asset_path, args } => {
                    let body = script_text(asset_path).unwrap_or_default();
                    let mut r = infer_risk(&body);
                    r.extend(infer_risk(&args.join(" ")));
                    r
                }
                ExecutionSpec::Command { template } => infer_risk(template),
                ExecutionSpec::Guidance { .. } => Default::default(),
            };
            node.step_type = if VERIFY_WORDS.contains(&verb.as_str()) {
                StepType::Verify
            } else if matches!(s, ExecutionSpec::Script { .. }) {
                StepType::Script
            } else {
                StepType::Command
            };
            node.execution_spec = s;
        }
        None => {
            node.execution_spec = ExecutionSpec::Guidance { text: text.trim().to_string() };
            node.incomplete = IMPERATIVE_VERBS.contains(&verb.as_str());
        }
    }
    node
}

fn refresh_cacheable(node: &mut WorkflowNode) {
    let risky = [RiskFlag::Network, RiskFlag::ExternalSideEffect, RiskFlag::Destructive];
    node.cacheable = node.step_type.is_executable()
        && node.execution_spec.is_runnable()
        && !risky.iter().any(|r| node.risk.contains(r));
}

/// Extracts a draft graph: one node per ordered-list item and per command
/// block outside any item, chained in document order.
pub fn extract_workflow(
    entry: &str,
    assets: &[AssetRecord],
    script_text: &dyn Fn(&str) -> Option<String>,
) -> WorkflowGraph {
    let scan = markdown::scan(entry);
    let scripts: Vec<&AssetRecord> = assets
        .iter()
        .filter(|a| a.asset_type == AssetType::Script)
        .collect();

    enum Unit<'s, 'a> {
        Item(&'s ListItem<'a>),
        Fence(&'s Fence<'a>),
    }
    let attached: BTreeSet<usize> = scan
        .lists
        .iter()
        .flat_map(|l| l.items.iter().flat_map(|i| i.fences.iter().copied()))
        .collect();
    let mut units: Vec<(usize, Unit)> = scan
        .lists
        .iter()
        .flat_map(|l| l.items.iter())
        .map(|i| (i.text_start, Unit::Item(i)))
        .collect();
    for (idx, fence) in scan.fences.iter().enumerate() {
        if !attached.contains(&idx) && is_command_fence(fence) {
            units.push((fence.start, Unit::Fence(fence)));
        }
    }
    units.sort_by_key(|u| u.0);

    let mut graph = WorkflowGraph::default();
    for (index, (_, unit)) in units.iter().enumerate() {
        let mut node = match unit {
            Unit::Item(item) => item_node(&scan, item, index, &scripts, script_text),
            Unit::Fence(fence) => {
                let Some(spec) = spec_from_fence(fence, &scripts) else {
                    continue;
                };
                let name = first_command_line(fence.body).unwrap_or("command").to_string();
                let step_type = if matches!(spec, ExecutionSpec::Script { .. }) {
                    StepType::Script
                } else {
                    StepType::Command
                };
                let mut node = WorkflowNode::new(format!("s{:03}", index + 1), name, step_type);
                node.provenance.extend(SourceRef::capture(
                    SourceDoc::Entry,
                    entry,
                    fence.body_start,
                    fence.body_start + fence.body.len(),
                ));
                node.risk = match &spec {
                    ExecutionSpec::Script { asset_path, .. } => {
                        infer_risk(&script_text(asset_path).unwrap_or_default())
                    }
                    ExecutionSpec::Command { template } => infer_risk(template),
                    ExecutionSpec::Guidance { .. } => Default::default(),
                };
                for p in spec.placeholders() {
                    node.inputs.push(IoSpec {
                        name: p,
                        description: "supplied at invocation".to_string(),
                        invocation_supplied: true,
                    });
                }
                node.execution_spec = spec;
                node
            }
        };
        if let Some(prev) = graph.nodes.last() {
            node.dependencies.push(prev.step_id.clone());
            graph.edges.push((prev.step_id.clone(), node.step_id.clone()));
        }
        refresh_cacheable(&mut node);
        graph.nodes.push(node);
    }
    graph
}

/// Lowers a workflow-shaped package into a normalized, validated graph.
pub fn lower_workflow(
    package: &SkillPackage,
    decision: &ShapeDecision,
    judge: &mut dyn ShapeJudge,
) -> Result<(WorkflowGraph, ValidationReport), LoweringError> {
    if decision.shape != Shape::Workflow {
        return Err(LoweringError::LoweringFailed(format!(
            "expected a workflow decision, got {}",
            decision.shape
        )));
    }
    let script_text = |path: &str| {
        let record = package.asset(path)?;
        let bytes = package.read_asset(record).ok()?;
        String::from_utf8(bytes).ok()
    };
    let mut graph = extract_workflow(&package.entry_document, &package.assets, &script_text);
    if graph.nodes.is_empty() {
        return Err(LoweringError::LoweringFailed(
            "no workflow steps could be extracted".to_string(),
        ));
    }

    if graph.nodes.iter().any(|n| n.incomplete) {
        let docs = package.text_documents();
        let features = extract_features_from(&package.entry_document, &package.assets, &docs);
        let request =
            CompletionRequest::workflow_completion(features, Grounding::new(&package.entry_document, docs));
        // A failing judge leaves the draft as extracted.
        if let Ok(completed) = complete_workflow_draft(judge, &request, &graph) {
            graph = completed;
        }
    }
    for node in &mut graph.nodes {
        if node.incomplete {
            node.incomplete = false;
            node.step_type = StepType::ModelAssist;
        }
        if let ExecutionSpec::Script { asset_path, .. } = &node.execution_spec {
            if package.asset(asset_path).is_none() {
                node.cacheable = false;
            }
        }
        refresh_cacheable(node);
    }

    let (graph, repairs) = normalize_graph(&graph);
    let ctx = ValidationContext::for_package(package);
    let mut report = validate_graph(&graph, &ctx);
    report.repaired = repairs;
    Ok((graph, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::Digest;
    use crate::lowering::Rule;

    fn script(path: &str) -> AssetRecord {
        AssetRecord {
            path: path.to_string(),
            asset_type: AssetType::Script,
            size: 0,
            digest: Digest::of(b""),
        }
    }

    fn none(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn two_script_steps() {
        let entry = "# Flow\n\n1. Run `a.sh`\n2. Run `b.sh`\n";
        let g = extract_workflow(entry, &[script("a.sh"), script("b.sh")], &none);
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges, vec![("s001".to_string(), "s002".to_string())]);
        for n in &g.nodes {
            assert_eq!(n.step_type, StepType::Script);
            assert!(n.provenance.iter().all(|r| r.matches(entry)));
        }
        let (g, _) = normalize_graph(&g);
        let report = validate_graph(&g, &ValidationContext::default());
        assert!(report.ok, "{report:?}");
    }

    #[test]
    fn single_manual_step() {
        let entry = "# Flow\n\n1. Think about the layout carefully\n";
        let g = extract_workflow(entry, &[], &none);
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.nodes[0].step_type, StepType::Manual);
        assert!(!g.nodes[0].incomplete);
        assert!(!g.nodes[0].provenance.is_empty());
    }

    #[test]
    fn imperative_without_spec_is_incomplete() {
        let g = extract_workflow("1. Convert the slides\n", &[], &none);
        assert!(g.nodes[0].incomplete);
    }

    #[test]
    fn unproduced_input_is_reported() {
        let entry = "1. Run `make all`\n2. Summarize using `report`\n";
        let g = extract_workflow(entry, &[], &none);
        assert_eq!(g.nodes[1].inputs[0].name, "report");
        let report = validate_graph(&g, &ValidationContext::default());
        assert!(report.has(Rule::InputUnproduced));
    }

    #[test]
    fn produced_input_is_fine() {
        let entry = "1. Run `make all` to produce `report`\n2. Summarize using `report`\n";
        let g = extract_workflow(entry, &[], &none);
        assert_eq!(g.nodes[0].outputs[0].name, "report");
        assert!(validate_graph(&g, &ValidationContext::default()).ok);
    }

    #[test]
    fn fences_attach_to_items() {
        let entry = "1. Build\n\n   ```bash\n   make build\n   ```\n\n2. Ship it\n\n```bash\necho {msg}\n```\n";
        let g = extract_workflow(entry, &[], &none);
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(
            g.nodes[0].execution_spec,
            ExecutionSpec::Command { template: "make build".into() }
        );
        assert_eq!(
            g.nodes[1].execution_spec,
            ExecutionSpec::Command { template: "echo {msg}".into() }
        );
        assert!(g.nodes[1].inputs[0].invocation_supplied);
        for n in &g.nodes {
            assert!(n.provenance.iter().all(|r| r.matches(entry)));
        }
    }

    #[test]
    fn interpreter_prefix_resolves_scripts() {
        let assets = [script("scripts/fill.py")];
        let spec = resolve_command("python3 scripts/fill.py --in x", &assets.iter().collect::<Vec<_>>());
        assert_eq!(
            spec,
            Some(ExecutionSpec::Script {
                asset_path: "scripts/fill.py".into(),
                args: vec!["--in".into(), "x".into()]
            })
        );
    }

    #[test]
    fn verify_steps_and_risk() {
        let entry = "1. Clean with `rm -rf out`\n2. Verify with `test -f done`\n";
        let g = extract_workflow(entry, &[], &none);
        assert!(g.nodes[0].risk.contains(&RiskFlag::Destructive));
        assert!(!g.nodes[0].cacheable);
        assert_eq!(g.nodes[1].step_type, StepType::Verify);
        assert!(g.nodes[1].cacheable);
    }
}
