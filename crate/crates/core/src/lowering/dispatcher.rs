//! Dispatcher lowering: one operator per script asset and per documented
//! callable signature.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{lower_reference, LoweringError, ReferenceIndex};
use crate::contract::{ArgSpec, ArgvPart, Binding, FieldSpec, OperatorKind, OperatorSpec, SemanticType};
use crate::markdown;
use crate::package::{decode_text, sanitize_name, AssetType, SkillPackage};
use crate::provenance::{SourceDoc, SourceRef};
use crate::risk::infer_risk;
use crate::sandbox::interpreter_for;
use crate::shape::{detect_signatures, Shape, ShapeDecision};
use crate::terms::terms;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatcherCapabilities {
    pub operators: Vec<OperatorSpec>,
    /// `(keyword, operator_name)` pairs.
    pub routing_hints: Vec<(String, String)>,
}

const HINT_STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "usage", "api", "function", "functions", "tools", "tool",
    "scripts", "script", "commands", "command", "reference", "overview", "methods", "operations",
    "py", "sh", "js",
];

fn string_literals(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let b = s.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'"' || b[i] == b'\'' {
            if let Some(rel) = s[i + 1..].find(b[i] as char) {
                out.push(s[i + 1..i + 1 + rel].to_string());
                i += rel + 2;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Text of a call starting at `open` (just after `(`), up to the matching
/// parenthesis or end of input.
fn call_args(text: &str, open: usize) -> &str {
    let mut depth = 1;
    for (i, c) in text[open..].char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 {
                    return &text[open..open + i];
                }
            }
            _ => {}
        }
    }
    &text[open..]
}

fn keyword_value<'a>(args: &'a str, key: &str) -> Option<&'a str> {
    let at = args.find(&format!("{key}="))?;
    let rest = &args[at + key.len() + 1..];
    let end = rest.find([',', ')']).unwrap_or(rest.len());
    Some(rest[..end].trim())
}

fn python_arguments(text: &str) -> (Vec<ArgSpec>, Vec<ArgvPart>) {
    let mut positional = Vec::new();
    let mut options = Vec::new();
    let mut schema = Vec::new();
    let markers = ["add_argument(", "click.option(", "click.argument("];
    let mut calls: Vec<(usize, &str)> = Vec::new();
    for m in markers {
        let mut from = 0;
        while let Some(rel) = text[from..].find(m) {
            let at = from + rel;
            calls.push((at, m));
            from = at + m.len();
        }
    }
    calls.sort();
    for (at, marker) in calls {
        let args = call_args(text, at + marker.len());
        let literals = string_literals(args.split('=').next().unwrap_or(args));
        let Some(first) = literals.first() else { continue };
        let is_option = first.starts_with('-');
        let flag = literals
            .iter()
            .find(|l| l.starts_with("--"))
            .or(literals.first())
            .cloned()
            .unwrap_or_default();
        let name = keyword_value(args, "dest")
            .and_then(|d| string_literals(d).into_iter().next())
            .unwrap_or_else(|| flag.trim_start_matches('-').replace('-', "_"));
        if name.is_empty() || schema.iter().any(|a: &ArgSpec| a.name == name) {
            continue;
        }
        let action = keyword_value(args, "action").map(|a| a.trim_matches(['"', '\'']).to_string());
        let is_switch = matches!(action.as_deref(), Some("store_true") | Some("store_false"))
            || keyword_value(args, "is_flag").is_some_and(|v| v == "True");
        let tag = if is_switch {
            SemanticType::Flag
        } else {
            match keyword_value(args, "type") {
                Some("int") | Some("float") => SemanticType::Number,
                _ => SemanticType::infer(&name),
            }
        };
        let nargs = keyword_value(args, "nargs").map(|v| v.trim_matches(['"', '\'']).to_string());
        let required = if is_option {
            keyword_value(args, "required").is_some_and(|v| v == "True")
        } else {
            !matches!(nargs.as_deref(), Some("?") | Some("*")) && keyword_value(args, "default").is_none()
        };
        schema.push(ArgSpec {
            name: name.clone(),
            tag,
            required,
        });
        if !is_option {
            positional.push(ArgvPart::Positional { name });
        } else if is_switch {
            options.push(ArgvPart::Switch { flag, name });
        } else {
            options.push(ArgvPart::Option { flag, name });
        }
    }
    positional.extend(options);
    (schema, positional)
}

fn shell_arguments(text: &str) -> (Vec<ArgSpec>, Vec<ArgvPart>) {
    let mut max = 0u32;
    let mut optional = BTreeSet::new();
    let b = text.as_bytes();
    for i in 0..b.len() {
        if b[i] != b'$' {
            continue;
        }
        let (digit_at, braced) = if b.get(i + 1) == Some(&b'{') { (i + 2, true) } else { (i + 1, false) };
        let Some(d) = b.get(digit_at).filter(|d| d.is_ascii_digit() && **d != b'0') else {
            continue;
        };
        if b.get(digit_at + 1).is_some_and(u8::is_ascii_digit) {
            continue;
        }
        let n = (d - b'0') as u32;
        max = max.max(n);
        if braced && text[digit_at + 1..].starts_with(":-") {
            optional.insert(n);
        }
    }
    let mut schema = Vec::new();
    let mut argv = Vec::new();
    for n in 1..=max {
        let name = format!("arg{n}");
        schema.push(ArgSpec {
            name: name.clone(),
            tag: SemanticType::Text,
            required: !optional.contains(&n),
        });
        argv.push(ArgvPart::Positional { name });
    }
    (schema, argv)
}

/// Argument schema and argv template detected from script text. Every
/// script also accepts an optional free-form `args` tail.
pub fn parse_script_arguments(path: &str, text: &str) -> (Vec<ArgSpec>, Vec<ArgvPart>) {
    let lower = path.to_ascii_lowercase();
    let (mut schema, mut argv) = if lower.ends_with(".py") {
        python_arguments(text)
    } else if lower.ends_with(".sh") || lower.ends_with(".bash") || text.starts_with("#!/bin/sh") || text.starts_with("#!/bin/bash") {
        shell_arguments(text)
    } else {
        (Vec::new(), Vec::new())
    };
    if !schema.iter().any(|a| a.name == "args") {
        schema.push(ArgSpec {
            name: "args".to_string(),
            tag: SemanticType::Text,
            required: false,
        });
        argv.push(ArgvPart::Rest { name: "args".to_string() });
    }
    (schema, argv)
}

fn script_description(path: &str, text: &str) -> String {
    let mut lines = text.lines().skip_while(|l| l.starts_with("#!"));
    for line in lines.by_ref().take(12) {
        let t = line.trim();
        let t = t
            .trim_start_matches('#')
            .trim_start_matches("//")
            .trim_matches('"')
            .trim_matches('\'')
            .trim();
        if t.len() > 3 && !t.starts_with("-*-") && !t.starts_with("import ") && !t.starts_with("set -") {
            return t.chars().take(160).collect();
        }
    }
    format!("Run {path}")
}

fn unique_name(base: &str, taken: &BTreeSet<String>) -> String {
    if !taken.contains(base) {
        return base.to_string();
    }
    (2..)
        .map(|k| format!("{base}_{k}"))
        .find(|n| !taken.contains(n))
        .expect("unbounded suffixes")
}

fn chunk_ids_for(index: &ReferenceIndex, doc: &SourceDoc, start: usize) -> Vec<String> {
    index
        .chunks
        .iter()
        .filter(|c| &c.asset_path == doc && c.byte_start <= start && start < c.byte_end)
        .map(|c| c.chunk_id.clone())
        .collect()
}

fn hint_terms(text: &str) -> Vec<String> {
    terms(text)
        .filter(|t| t.len() >= 3 && !HINT_STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Lowers a dispatcher-shaped package into typed operators.
pub fn lower_dispatcher(
    package: &SkillPackage,
    decision: &ShapeDecision,
) -> Result<DispatcherCapabilities, LoweringError> {
    if decision.shape != Shape::Dispatcher {
        return Err(LoweringError::LoweringFailed(format!(
            "expected a dispatcher decision, got {}",
            decision.shape
        )));
    }
    let entry = &package.entry_document;
    let entry_scan = markdown::scan(entry);
    let index = lower_reference(package);
    let mut taken = BTreeSet::new();
    let mut caps = DispatcherCapabilities::default();

    for record in package.assets.iter().filter(|a| a.asset_type == AssetType::Script) {
        let bytes = package.read_asset(record).ok();
        let text = bytes.as_deref().and_then(decode_text).unwrap_or_default();
        let file = record.path.rsplit('/').next().unwrap_or(&record.path);
        let stem = file.split('.').next().filter(|s| !s.is_empty()).unwrap_or(file);
        let name = unique_name(&sanitize_name(stem), &taken);
        taken.insert(name.clone());
        let (argument_schema, argv) = parse_script_arguments(&record.path, &text);
        let first_line = text.find('\n').unwrap_or(text.len());
        let mut source_refs: Vec<SourceRef> =
            SourceRef::capture(SourceDoc::Asset(record.path.clone()), &text, 0, first_line)
                .into_iter()
                .collect();

        // Entry lines that mention the script contribute provenance and hints.
        for (i, line) in entry_scan.lines.iter().enumerate() {
            if let Some(at) = line.text.find(file) {
                let start = line.start + at;
                source_refs.extend(SourceRef::capture(SourceDoc::Entry, entry, start, start + file.len()));
                if let Some(h) = entry_scan.heading_above(i) {
                    for t in hint_terms(h) {
                        caps.routing_hints.push((t, name.clone()));
                    }
                }
            }
        }
        for t in hint_terms(&name) {
            caps.routing_hints.push((t, name.clone()));
        }

        caps.operators.push(OperatorSpec {
            name: name.clone(),
            kind: OperatorKind::Script,
            description: script_description(&record.path, &text),
            argument_schema,
            output_schema: vec![FieldSpec {
                name: "stdout".to_string(),
                tag: SemanticType::Text,
            }],
            binding: Binding::Script {
                asset_path: record.path.clone(),
                interpreter: interpreter_for(&record.path, &text),
                argv,
            },
            source_refs,
            risk: infer_risk(&text),
            evidence: Vec::new(),
        });
    }

    let mut docs: Vec<(SourceDoc, String)> = vec![(SourceDoc::Entry, entry.clone())];
    for (path, text) in package.text_documents() {
        if package.asset(&path).is_some_and(|a| a.asset_type == AssetType::Document) {
            docs.push((SourceDoc::Asset(path), text));
        }
    }
    for (doc, text) in &docs {
        let scan = markdown::scan(text);
        for sig in detect_signatures(&scan) {
            let name = sanitize_name(&sig.name.replace('.', "_"));
            let source = SourceRef::capture(doc.clone(), text, sig.start, sig.end);
            let heading_hints = sig.heading.as_deref().map(hint_terms).unwrap_or_default();
            if let Some(op) = caps.operators.iter_mut().find(|o| o.name == name) {
                // A script of the same name is the runnable wrapper.
                if let Some(r) = source {
                    if !op.source_refs.contains(&r) {
                        op.source_refs.push(r);
                    }
                }
                if let Binding::Guidance { chunk_ids, .. } = &mut op.binding {
                    for c in chunk_ids_for(&index, doc, sig.start) {
                        if !chunk_ids.contains(&c) {
                            chunk_ids.push(c);
                        }
                    }
                }
                for t in heading_hints {
                    caps.routing_hints.push((t, name.clone()));
                }
                continue;
            }
            taken.insert(name.clone());
            let line_end = text[sig.start..].find('\n').map(|i| sig.start + i).unwrap_or(text.len());
            caps.operators.push(OperatorSpec {
                name: name.clone(),
                kind: OperatorKind::Guidance,
                description: text[sig.start..line_end].trim().chars().take(160).collect(),
                argument_schema: sig
                    .params
                    .iter()
                    .map(|p| ArgSpec {
                        name: p.clone(),
                        tag: SemanticType::infer(p),
                        required: true,
                    })
                    .collect(),
                output_schema: Vec::new(),
                binding: Binding::Guidance {
                    chunk_ids: chunk_ids_for(&index, doc, sig.start),
                    text: text[sig.start..line_end].trim().to_string(),
                },
                source_refs: source.into_iter().collect(),
                risk: Default::default(),
                evidence: Vec::new(),
            });
            for t in hint_terms(&name).into_iter().chain(heading_hints) {
                caps.routing_hints.push((t, name.clone()));
            }
        }
    }

    if caps.operators.is_empty() {
        return Err(LoweringError::LoweringFailed(
            "no scripts or callable signatures found".to_string(),
        ));
    }
    let mut seen = BTreeSet::new();
    caps.routing_hints.retain(|h| seen.insert(h.clone()));
    Ok(caps)
}
