//! Graph normalization and validation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{Repair, Rule, StepType, ValidationReport, Violation, WorkflowGraph, WorkflowNode};
use crate::lowering::ExecutionSpec;
use crate::package::{AssetType, SkillPackage};

/// What validation may assume beyond the graph itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationContext {
    pub invocation_inputs: BTreeSet<String>,
    /// Script assets available to script nodes; `None` skips the existence check.
    pub script_assets: Option<BTreeSet<String>>,
}

impl ValidationContext {
    pub fn for_package(package: &SkillPackage) -> Self {
        ValidationContext {
            invocation_inputs: BTreeSet::new(),
            script_assets: Some(
                package
                    .assets
                    .iter()
                    .filter(|a| a.asset_type == AssetType::Script)
                    .map(|a| a.path.clone())
                    .collect(),
            ),
        }
    }
}

/// Orders ids by length, then bytes, so `s2` sorts before `s10`.
fn natural(id: &str) -> (usize, &str) {
    (id.len(), id)
}

fn edge_set(graph: &WorkflowGraph) -> BTreeSet<(String, String)> {
    let mut set: BTreeSet<(String, String)> = graph.edges.iter().cloned().collect();
    for n in &graph.nodes {
        for d in &n.dependencies {
            set.insert((d.clone(), n.step_id.clone()));
        }
    }
    set
}

fn reaches(edges: &BTreeSet<(String, String)>, from: &str, to: &str) -> bool {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from.to_string()];
    while let Some(cur) = stack.pop() {
        if cur == to {
            return true;
        }
        if !seen.insert(cur.clone()) {
            continue;
        }
        for (a, b) in edges {
            if *a == cur {
                stack.push(b.clone());
            }
        }
    }
    false
}

/// Canonicalizes a graph. Never fails: anything it cannot repair is left
/// for [`validate_graph`] to report. Running it twice equals running it once.
pub fn normalize_graph(graph: &WorkflowGraph) -> (WorkflowGraph, Vec<Repair>) {
    let mut repairs = Vec::new();
    let mut nodes: Vec<WorkflowNode> = graph.nodes.clone();

    for n in &mut nodes {
        if let StepType::Other(raw) = &n.step_type {
            let canonical = n.step_type.canonical();
            repairs.push(Repair::new(
                "STEP_TYPE_ALIAS",
                format!("{}: {raw} -> {canonical}", n.step_id),
            ));
            n.step_type = canonical;
        }
    }

    let mut edges = edge_set(graph);
    let mirrored: BTreeSet<(String, String)> = graph.edges.iter().cloned().collect();
    if mirrored != edges || graph.edges.len() != mirrored.len() {
        repairs.push(Repair::new(
            "EDGE_DEPENDENCY_SYNC",
            "edge list and node dependencies reconciled",
        ));
    }

    // Duplicate step ids: edges keep pointing at the first occurrence.
    let mut seen_ids = BTreeSet::new();
    for (i, n) in nodes.iter_mut().enumerate() {
        if !seen_ids.insert(n.step_id.clone()) {
            let fresh = format!("{}#dup{}", n.step_id, i);
            repairs.push(Repair::new(
                "DUPLICATE_STEP_ID",
                format!("{} repeated; later copy detached", n.step_id),
            ));
            n.step_id = fresh;
        }
    }

    // Merge identical nodes into their first occurrence.
    let mut merged_into: BTreeMap<String, String> = BTreeMap::new();
    let mut kept: Vec<WorkflowNode> = Vec::new();
    for n in nodes {
        match kept.iter().find(|k| k.dedupe_key() == n.dedupe_key()) {
            Some(k) => {
                repairs.push(Repair::new(
                    "DUPLICATE_NODE_MERGED",
                    format!("{} merged into {}", n.step_id, k.step_id),
                ));
                merged_into.insert(n.step_id.clone(), k.step_id.clone());
            }
            None => kept.push(n),
        }
    }
    let mut nodes = kept;
    if !merged_into.is_empty() {
        edges = edges
            .into_iter()
            .map(|(a, b)| {
                (
                    merged_into.get(&a).cloned().unwrap_or(a),
                    merged_into.get(&b).cloned().unwrap_or(b),
                )
            })
            .collect();
    }

    let self_edges: Vec<(String, String)> = edges.iter().filter(|(a, b)| a == b).cloned().collect();
    for e in self_edges {
        repairs.push(Repair::new("SELF_EDGE_REMOVED", format!("{}->{}", e.0, e.1)));
        edges.remove(&e);
    }

    // Missing producer edges, added only when unambiguous and acyclic.
    for i in 0..nodes.len() {
        let id = nodes[i].step_id.clone();
        for input in nodes[i].inputs.clone() {
            if input.invocation_supplied {
                continue;
            }
            let producers: Vec<String> = nodes
                .iter()
                .filter(|p| p.step_id != id && p.outputs.iter().any(|o| o.name == input.name))
                .map(|p| p.step_id.clone())
                .collect();
            if producers.is_empty() || producers.iter().any(|p| reaches(&edges, p, &id)) {
                continue;
            }
            if let [p] = producers.as_slice() {
                if !reaches(&edges, &id, p) {
                    repairs.push(Repair::new(
                        "DEPENDENCY_ADDED",
                        format!("{p}->{id} for input {}", input.name),
                    ));
                    edges.insert((p.clone(), id.clone()));
                }
            }
        }
    }

    // Renumber in topological order, smallest ready id first.
    let ids: BTreeSet<String> = nodes.iter().map(|n| n.step_id.clone()).collect();
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|i| (i.as_str(), 0)).collect();
    for (a, b) in &edges {
        if ids.contains(a) {
            if let Some(d) = indegree.get_mut(b.as_str()) {
                *d += 1;
            }
        }
    }
    let mut ready: BTreeSet<(usize, &str)> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| natural(i))
        .collect();
    let mut order: Vec<String> = Vec::new();
    while let Some(&first) = ready.iter().next() {
        ready.remove(&first);
        let cur = first.1;
        order.push(cur.to_string());
        for (a, b) in &edges {
            if a == cur {
                if let Some(d) = indegree.get_mut(b.as_str()) {
                    *d -= 1;
                    if *d == 0 {
                        ready.insert(natural(b));
                    }
                }
            }
        }
    }
    let mut rest: Vec<&String> = ids.iter().filter(|i| !order.contains(i)).collect();
    rest.sort_by_key(|i| natural(i));
    order.extend(rest.into_iter().cloned());

    let width = order.len().to_string().len().max(3);
    let rename: BTreeMap<String, String> = order
        .iter()
        .enumerate()
        .map(|(k, old)| (old.clone(), format!("s{:0width$}", k + 1)))
        .collect();
    let changed: Vec<String> = rename
        .iter()
        .filter(|(a, b)| a != b)
        .map(|(a, b)| format!("{a}->{b}"))
        .collect();
    if !changed.is_empty() {
        repairs.push(Repair::new("STEP_IDS_RENUMBERED", changed.join(", ")));
    }
    let new_ids: BTreeSet<&String> = rename.values().collect();
    // Dangling endpoints keep their name unless it would now collide.
    let map = |id: &String| match rename.get(id) {
        Some(n) => n.clone(),
        None if new_ids.contains(id) => format!("missing:{id}"),
        None => id.clone(),
    };
    let edges: BTreeSet<(String, String)> = edges.iter().map(|(a, b)| (map(a), map(b))).collect();

    for n in &mut nodes {
        n.step_id = map(&n.step_id);
    }
    nodes.sort_by(|a, b| natural(&a.step_id).cmp(&natural(&b.step_id)));
    for n in &mut nodes {
        n.dependencies = edges
            .iter()
            .filter(|(_, b)| *b == n.step_id)
            .map(|(a, _)| a.clone())
            .collect();
        n.dependencies.sort_by(|a, b| natural(a).cmp(&natural(b)));
    }
    let mut edges: Vec<(String, String)> = edges.into_iter().collect();
    edges.sort_by(|x, y| (natural(&x.0), natural(&x.1)).cmp(&(natural(&y.0), natural(&y.1))));

    (WorkflowGraph { nodes, edges }, repairs)
}

/// Checks a graph and lists every violation found.
pub fn validate_graph(graph: &WorkflowGraph, ctx: &ValidationContext) -> ValidationReport {
    let mut violations = Vec::new();
    let mut ids = BTreeSet::new();
    for n in &graph.nodes {
        if !ids.insert(n.step_id.as_str()) {
            violations.push(Violation {
                rule: Rule::UniqueStepId,
                subject: n.step_id.clone(),
                message: "step id used more than once".to_string(),
            });
        }
    }

    let edges = edge_set(graph);
    for (a, b) in &edges {
        for end in [a, b] {
            if !ids.contains(end.as_str()) {
                violations.push(Violation {
                    rule: Rule::EdgeTargetExists,
                    subject: format!("{a}->{b}"),
                    message: format!("edge endpoint {end} does not exist"),
                });
            }
        }
    }

    // Kahn over existing nodes; leftovers sit on or behind a cycle.
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|i| (*i, 0)).collect();
    for (a, b) in &edges {
        if ids.contains(a.as_str()) {
            if let Some(d) = indegree.get_mut(b.as_str()) {
                *d += 1;
            }
        }
    }
    let mut queue: VecDeque<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(i, _)| *i).collect();
    let mut done = BTreeSet::new();
    while let Some(cur) = queue.pop_front() {
        done.insert(cur);
        for (a, b) in &edges {
            if a == cur {
                if let Some(d) = indegree.get_mut(b.as_str()) {
                    *d -= 1;
                    if *d == 0 {
                        queue.push_back(b.as_str());
                    }
                }
            }
        }
    }
    let blocked: Vec<&str> = ids.iter().filter(|i| !done.contains(*i)).copied().collect();
    if !blocked.is_empty() {
        violations.push(Violation {
            rule: Rule::Acyclic,
            subject: blocked.join(","),
            message: "dependency cycle".to_string(),
        });
    }

    for n in &graph.nodes {
        let runnable = match (&n.step_type, &n.execution_spec) {
            (StepType::Command, ExecutionSpec::Command { .. }) => n.execution_spec.is_runnable(),
            (StepType::Script, ExecutionSpec::Script { asset_path, .. }) => {
                n.execution_spec.is_runnable()
                    && ctx
                        .script_assets
                        .as_ref()
                        .is_none_or(|set| set.contains(asset_path))
            }
            (StepType::Command | StepType::Script, _) => false,
            _ => true,
        };
        if !runnable {
            violations.push(Violation {
                rule: Rule::ExecutableSpec,
                subject: n.step_id.clone(),
                message: format!("{} step has no runnable execution spec", n.step_type),
            });
        }
    }

    for n in &graph.nodes {
        let ancestors = graph.ancestors(&n.step_id);
        for input in &n.inputs {
            if input.invocation_supplied || ctx.invocation_inputs.contains(&input.name) {
                continue;
            }
            let produced = graph.nodes.iter().any(|p| {
                ancestors.contains(&p.step_id) && p.outputs.iter().any(|o| o.name == input.name)
            });
            if !produced {
                violations.push(Violation {
                    rule: Rule::InputUnproduced,
                    subject: n.step_id.clone(),
                    message: format!("input {} is not produced upstream", input.name),
                });
            }
        }
    }

    ValidationReport {
        ok: violations.is_empty(),
        violations,
        repaired: Vec::new(),
    }
}
