#![allow(dead_code)]

use std::fs;
use std::path::Path;

use skillc_core::lowering::{ExecutionSpec, StepType, WorkflowGraph, WorkflowNode};

pub fn write_tree(dir: &Path, files: &[(String, Vec<u8>)]) {
    for (p, c) in files {
        let full = dir.join(p);
        fs::create_dir_all(full.parent().unwrap()).unwrap();
        fs::write(full, c).unwrap();
    }
}

pub fn step_id(i: usize) -> String {
    format!("s{:03}", i + 1)
}

/// A command graph over `n` nodes with the given `(from, to)` index edges
/// mirrored into dependencies.
pub fn command_graph(n: usize, edges: &[(usize, usize)], command: impl Fn(usize) -> String) -> WorkflowGraph {
    let mut g = WorkflowGraph::default();
    for i in 0..n {
        let mut node = WorkflowNode::new(step_id(i), format!("step {i}"), StepType::Command);
        node.execution_spec = ExecutionSpec::Command { template: command(i) };
        node.cacheable = true;
        g.nodes.push(node);
    }
    for &(a, b) in edges {
        g.edges.push((step_id(a), step_id(b)));
        g.nodes[b].dependencies.push(step_id(a));
    }
    g
}
