//! Acceptance suite. Each criterion runs in isolation and prints one
//! `PASS`/`FAIL` line; the process fails if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::Value;
use sha2::{Digest as _, Sha256};

use skillc_core::compile::compile_package;
use skillc_core::contract::{build_fallback_capsule, ActionPolicy, Outcome, ValidationLevel};
use skillc_core::digest::Digest;
use skillc_core::judge::DeterministicJudge;
use skillc_core::lowering::{
    normalize_graph, validate_graph, ExecutionSpec, Rule, StepType, ValidationContext, WorkflowGraph, WorkflowNode,
};
use skillc_core::package::{canonical_package_hash, load_package, CompilationInput};
use skillc_core::provenance::Grounding;
use skillc_core::risk::RiskFlag;
use skillc_core::runtime::{
    get_skill_asset, invoke, run_workflow, search_skill_docs, Contribution, DisclosureStage, ExecutionState,
    InvocationRequest, NodeStatus, RunContext, Status,
};
use skillc_core::sandbox::SandboxConfig;
use skillc_core::shape::{classify, Predicates, Shape, ShapeThresholds, StructuralFeatures};
use skillc_core::store::{artifact_dir, check_validity, load_artifact, store_artifact, CompiledArtifact, StoreError};

type Files = Vec<(String, Vec<u8>)>;

const SEED: u64 = 0x5eed_c0de;

fn write_tree(dir: &Path, files: &[(String, Vec<u8>)]) {
    for (p, c) in files {
        let full = dir.join(p);
        fs::create_dir_all(full.parent().unwrap()).unwrap();
        fs::write(full, c).unwrap();
    }
}

fn text(p: &str, c: &str) -> (String, Vec<u8>) {
    (p.to_string(), c.as_bytes().to_vec())
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

// ------------------------------------------------------------------ corpus

struct Fixture {
    name: &'static str,
    shape: &'static str,
    token: String,
    files: Files,
}

const CANARY: &str = "canary_destructive";

fn corpus() -> Vec<Fixture> {
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut blob = vec![0u8; (1 << 20) + 4099];
    rng.fill(blob.as_mut_slice());
    let notes = |token: &str| {
        text(
            "docs/notes.md",
            &format!(
                "# Notes\n\nGeneral background on the files this skill touches.\n\n## Rare detail\n\nThe marker {token} appears only here.\n\n## More\n\nOrdinary closing remarks about formats.\n"
            ),
        )
    };
    let mut out = vec![
        Fixture {
            name: "echo-tools",
            shape: "dispatcher",
            token: "qzxplanted001".into(),
            files: vec![
                text("SKILL.md", "---\nname: echo-tools\ndescription: Echo text, shout it, or wipe scratch space.\n---\n# Echo tools\n\nUse the scripts in `tools/` to echo or transform text.\n"),
                text("tools/echo.sh", "#!/bin/sh\necho \"$@\"\n"),
                text("tools/shout.sh", "#!/bin/sh\necho \"$@\" | tr a-z A-Z\n"),
                text("tools/wipe.sh", &format!("#!/bin/sh\nrm -rf ./scratch\ntouch {CANARY}\n")),
                ("assets/blob.bin".into(), blob),
            ],
        },
        Fixture {
            name: "report-flow",
            shape: "workflow",
            token: "qzxplanted002".into(),
            files: vec![text(
                "SKILL.md",
                &format!("---\nname: report-flow\ndescription: Build a report and tidy up.\n---\n# Report flow\n\n1. Write the report:\n   ```bash\n   echo building > report.txt\n   ```\n2. Show it:\n   ```bash\n   cat report.txt\n   ```\n3. Clean up:\n   ```bash\n   rm -rf scratch && touch {CANARY}\n   ```\n"),
            )],
        },
        Fixture {
            name: "style-guide",
            shape: "reference",
            token: "qzxplanted003".into(),
            files: vec![text(
                "SKILL.md",
                &format!(
                    "---\nname: style-guide\ndescription: House style for prose.\n---\n# Style guide\n\n## Examples\n\n{}",
                    "Write plainly and keep sentences short so readers can follow the argument.\n".repeat(10)
                ),
            )],
        },
        Fixture {
            name: "tiny",
            shape: "insufficient",
            token: "qzxplanted004".into(),
            files: vec![text("SKILL.md", "# Tiny\n")],
        },
        Fixture {
            name: "py-tools",
            shape: "dispatcher",
            token: "qzxplanted005".into(),
            files: vec![
                text("SKILL.md", "---\nname: py-tools\ndescription: Count words or fetch a page.\n---\n# Python tools\n\nRun the helpers in `scripts/`.\n"),
                text(
                    "scripts/count.py",
                    "import argparse\n\np = argparse.ArgumentParser()\np.add_argument('--text', required=True)\na = p.parse_args()\nprint(len(a.text.split()))\n",
                ),
                text("scripts/fetch.py", "import urllib.request\nprint(urllib.request.urlopen('https://example.com').read()[:10])\n"),
            ],
        },
    ];
    for f in &mut out {
        let n = notes(&f.token);
        f.files.push(n);
    }
    out
}

fn compile(dir: &Path) -> CompiledArtifact {
    let input = CompilationInput::new(load_package(dir).unwrap());
    compile_package(&input, &mut DeterministicJudge::default(), &[]).unwrap().artifact
}

/// Compiles every fixture into `store`, returning the artifacts loaded back from disk.
fn stored_corpus(root: &Path) -> Vec<(Fixture, PathBuf, CompiledArtifact)> {
    let store = root.join("store");
    corpus()
        .into_iter()
        .map(|f| {
            let dir = root.join(f.name);
            write_tree(&dir, &f.files);
            let a = compile(&dir);
            assert_eq!(a.shape(), f.shape, "{}", f.name);
            store_artifact(&a, &store).unwrap();
            let loaded = load_artifact(&a.package_hash, &store).unwrap();
            (f, dir, loaded)
        })
        .collect()
}

// ------------------------------------------------------------------ criteria

fn random_package(rng: &mut StdRng) -> Files {
    let words = ["alpha", "beta", "gamma", "delta", "run", "check", "notes", "data", "é", "ü"];
    let mut entry = String::from("# Skill\n\n");
    while entry.len() < rng.gen_range(64..600) {
        entry.push_str(words.choose(rng).unwrap());
        entry.push(if rng.gen_bool(0.1) { '\n' } else { ' ' });
    }
    let mut files = vec![("SKILL.md".to_string(), entry.into_bytes())];
    let exts = ["md", "py", "sh", "bin", "txt", "json"];
    let mut paths = BTreeSet::new();
    for _ in 0..rng.gen_range(0..8) {
        let depth = rng.gen_range(0..3);
        let mut p: Vec<String> = (0..depth).map(|_| format!("d{}", rng.gen_range(0..3))).collect();
        p.push(format!("f{}.{}", rng.gen_range(0..50), exts.choose(rng).unwrap()));
        paths.insert(p.join("/"));
    }
    for p in paths {
        let len = rng.gen_range(1..400);
        let bytes: Vec<u8> = if p.ends_with(".bin") {
            (0..len).map(|_| rng.gen()).collect()
        } else {
            (0..len).map(|_| rng.gen_range(b' '..b'~')).collect()
        };
        files.push((p, bytes));
    }
    files
}

/// Flips one byte while keeping `SKILL.md` valid UTF-8.
fn mutate(files: &mut Files, rng: &mut StdRng) -> String {
    let i = rng.gen_range(0..files.len());
    let (path, bytes) = &mut files[i];
    let at = rng.gen_range(0..bytes.len());
    if path == "SKILL.md" {
        let ascii: Vec<usize> = bytes.iter().enumerate().filter(|(_, b)| b.is_ascii_alphanumeric()).map(|(k, _)| k).collect();
        let k = *ascii.choose(rng).unwrap();
        bytes[k] = if bytes[k] == b'x' { b'y' } else { b'x' };
    } else {
        bytes[at] ^= 1 << rng.gen_range(0..8);
    }
    path.clone()
}

fn hash_determinism() -> String {
    let mut rng = StdRng::seed_from_u64(SEED + 1);
    let (mut permutations, mut mutations) = (0, 0);
    for _ in 0..60 {
        let files = random_package(&mut rng);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_tree(a.path(), &files);
        let mut shuffled = files.clone();
        shuffled.shuffle(&mut rng);
        write_tree(b.path(), &shuffled);
        let pa = load_package(a.path()).unwrap();
        let pb = load_package(b.path()).unwrap();
        assert_eq!(pa.package_hash, pb.package_hash, "write order changed the hash");
        let mut records = pa.assets.clone();
        records.shuffle(&mut rng);
        records.sort_by(|x, y| x.path.as_bytes().cmp(y.path.as_bytes()));
        assert_eq!(canonical_package_hash(pa.entry_document.as_bytes(), &records).unwrap(), pa.package_hash);
        permutations += 1;

        for _ in 0..3 {
            let mut changed = files.clone();
            let path = mutate(&mut changed, &mut rng);
            let c = tempfile::tempdir().unwrap();
            write_tree(c.path(), &changed);
            assert_ne!(load_package(c.path()).unwrap().package_hash, pa.package_hash, "mutation of {path} kept the hash");
            mutations += 1;
        }
    }
    format!("{permutations} packages permuted, {mutations} mutations detected")
}

fn artifact_validity() -> String {
    let mut rng = StdRng::seed_from_u64(SEED + 2);
    let store = tempfile::tempdir().unwrap();
    let mut stale = 0;
    let mut stored = Vec::new();
    for _ in 0..20 {
        let files = random_package(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &files);
        let artifact = compile(dir.path());
        assert!(check_validity(&artifact, &load_package(dir.path()).unwrap()));
        let mut changed = files.clone();
        mutate(&mut changed, &mut rng);
        write_tree(dir.path(), &changed);
        assert!(!check_validity(&artifact, &load_package(dir.path()).unwrap()));
        stale += 1;
        store_artifact(&artifact, store.path()).unwrap();
        stored.push(artifact.package_hash.clone());
    }
    let mut flips = 0;
    for _ in 0..40 {
        let hash = stored.choose(&mut rng).unwrap();
        let files = files_under(&artifact_dir(store.path(), hash));
        let file = files.choose(&mut rng).unwrap();
        let original = fs::read(file).unwrap();
        if original.is_empty() {
            continue;
        }
        let mut bytes = original.clone();
        let at = rng.gen_range(0..bytes.len());
        bytes[at] ^= 1 << rng.gen_range(0..8);
        fs::write(file, &bytes).unwrap();
        let res = load_artifact(hash, store.path());
        assert!(matches!(res, Err(StoreError::CorruptArtifact(_))), "flip in {} gave {res:?}", file.display());
        fs::write(file, &original).unwrap();
        load_artifact(hash, store.path()).unwrap();
        flips += 1;
    }
    assert!(flips >= 20);
    format!("{stale} stale artifacts rejected, {flips} byte flips detected")
}

fn classifier_priority() -> String {
    let t = ShapeThresholds::default();
    for mask in 0u8..16 {
        let (w, d, r, floor) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0, mask & 8 != 0);
        let f = StructuralFeatures {
            heading_count: 2,
            ordered_list_blocks: w as usize,
            command_blocks: w as usize,
            script_asset_count: if d { 2 } else { 0 },
            prose_ratio: if r { 0.8 } else { 0.2 },
            reference_section_count: r as usize,
            entry_byte_length: if floor { 10 } else { 500 },
            ..Default::default()
        };
        let p = Predicates::evaluate(&f, &t);
        assert_eq!((p.workflow, p.dispatcher, p.reference, p.below_floor), (w, d, r, floor), "mask {mask}");
        let expected = if floor {
            Shape::Insufficient
        } else if w {
            Shape::Workflow
        } else if d {
            Shape::Dispatcher
        } else if r {
            Shape::Reference
        } else {
            Shape::Insufficient
        };
        let got = classify(&f, &mut DeterministicJudge::default(), &Grounding::default());
        assert_eq!(got.shape, expected, "mask {mask:04b}");
        if got.shape == Shape::Insufficient {
            assert!(got.diagnostic.is_some());
        }
    }
    "16 predicate combinations".into()
}

fn step_id(i: usize) -> String {
    format!("s{:03}", i + 1)
}

fn all_edges(g: &WorkflowGraph) -> BTreeSet<(String, String)> {
    let mut e: BTreeSet<_> = g.edges.iter().cloned().collect();
    for n in &g.nodes {
        for d in &n.dependencies {
            e.insert((d.clone(), n.step_id.clone()));
        }
    }
    e
}

fn dfs_cycle(g: &WorkflowGraph) -> bool {
    let ids: BTreeSet<&str> = g.nodes.iter().map(|n| n.step_id.as_str()).collect();
    let mut adj: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (a, b) in all_edges(g) {
        if ids.contains(a.as_str()) && ids.contains(b.as_str()) {
            adj.entry(a).or_default().push(b);
        }
    }
    fn visit(v: &str, adj: &BTreeMap<String, Vec<String>>, color: &mut BTreeMap<String, u8>) -> bool {
        color.insert(v.to_string(), 1);
        for w in adj.get(v).into_iter().flatten() {
            match color.get(w).copied().unwrap_or(0) {
                1 => return true,
                0 if visit(w, adj, color) => return true,
                _ => {}
            }
        }
        color.insert(v.to_string(), 2);
        false
    }
    let mut color = BTreeMap::new();
    ids.iter().any(|v| color.get(*v).copied().unwrap_or(0) == 0 && visit(v, &adj, &mut color))
}

fn random_dag(rng: &mut StdRng, n: usize) -> Vec<(usize, usize)> {
    let density = rng.gen_range(0.05..0.4);
    let mut edges = Vec::new();
    for b in 1..n {
        for a in 0..b {
            if rng.gen_bool(density) {
                edges.push((a, b));
            }
        }
    }
    edges
}

fn command_graph(n: usize, edges: &[(usize, usize)], command: impl Fn(usize) -> String) -> WorkflowGraph {
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

fn graph_oracles() -> String {
    let mut rng = StdRng::seed_from_u64(SEED + 4);
    let (mut cyclic, mut dangling) = (0, 0);
    for _ in 0..300 {
        let n = rng.gen_range(1..=50);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        };
        let mut edges: Vec<(usize, usize)> = random_dag(&mut rng, n).into_iter().map(|(a, b)| (perm[a], perm[b])).collect();
        if rng.gen_bool(0.4) && n > 0 {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            edges.push((a, b));
            edges.push((b, a));
        }
        let mut g = command_graph(n, &edges, |i| format!("echo {i}"));
        if rng.gen_bool(0.3) {
            let k = rng.gen_range(0..n);
            if rng.gen_bool(0.5) {
                g.edges.push((step_id(k), "ghost".into()));
            } else {
                g.nodes[k].dependencies.push("ghost".into());
            }
        }
        let report = validate_graph(&g, &ValidationContext::default());
        let ids: BTreeSet<&str> = g.nodes.iter().map(|x| x.step_id.as_str()).collect();
        let has_dangling = all_edges(&g).iter().any(|(a, b)| !ids.contains(a.as_str()) || !ids.contains(b.as_str()));
        let has_cycle = dfs_cycle(&g);
        assert_eq!(report.has(Rule::Acyclic), has_cycle, "acyclic verdict, n={n}");
        assert_eq!(report.has(Rule::EdgeTargetExists), has_dangling, "edge verdict, n={n}");
        cyclic += has_cycle as usize;
        dangling += has_dangling as usize;
    }
    assert!(cyclic > 30 && dangling > 30);
    format!("300 graphs, {cyclic} cyclic, {dangling} dangling")
}

fn lossless_deopt() -> String {
    let root = tempfile::tempdir().unwrap();
    let mut checked = 0;
    let mut largest = 0;
    for (f, dir, a) in stored_corpus(root.path()) {
        for (path, _) in &f.files {
            if path == "SKILL.md" {
                continue;
            }
            let source = fs::read(dir.join(path)).unwrap();
            let got = get_skill_asset(&a.capsule, path).unwrap();
            assert_eq!(Sha256::digest(&got), Sha256::digest(&source), "{}: {path}", f.name);
            largest = largest.max(got.len());
            checked += 1;
        }
        let hits = search_skill_docs(&a.capsule, &f.token, 5);
        assert!(!hits.is_empty() && hits[0].text.contains(&f.token), "{}: planted token not at rank 1", f.name);
    }
    assert!(largest >= 1 << 20);
    format!("{checked} assets byte-identical (largest {largest} bytes), planted tokens at rank 1")
}

fn check_schema(v: &Value, operators: &[String]) {
    let obj = v.as_object().expect("envelope is an object");
    let keys: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
    let want: BTreeSet<&str> =
        ["status", "contribution_type", "selected_operator", "output", "trace", "continuation_required"].into();
    assert_eq!(keys, want);
    assert!(["ok", "blocked", "error"].contains(&obj["status"].as_str().unwrap()));
    assert!(["executed", "guidance", "fallback", "partial"].contains(&obj["contribution_type"].as_str().unwrap()));
    match &obj["selected_operator"] {
        Value::Null => {}
        Value::String(s) => assert!(operators.contains(s), "unknown selected operator {s}"),
        other => panic!("selected_operator {other}"),
    }
    assert!(obj["continuation_required"].is_boolean());
    let trace = obj["trace"].as_array().unwrap();
    assert!(!trace.is_empty());
    for t in trace {
        assert!(t["event"].is_string());
        let ts = t["timestamp"].as_str().unwrap();
        assert!(ts.len() >= 20 && ts.as_bytes()[4] == b'-' && ts.as_bytes()[10] == b'T', "timestamp {ts}");
    }
}

fn envelope_fuzz() -> String {
    let mut rng = StdRng::seed_from_u64(SEED + 6);
    let root = tempfile::tempdir().unwrap();
    let corpus = stored_corpus(root.path());
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut denied_seen = 0;
    for i in 0..600 {
        let (f, _, artifact) = corpus.choose(&mut rng).unwrap();
        let mut artifact = artifact.clone();
        if rng.gen_bool(0.5) {
            let mut deny: BTreeSet<RiskFlag> = RiskFlag::ALL.iter().copied().filter(|_| rng.gen_bool(0.4)).collect();
            if rng.gen_bool(0.5) {
                deny.insert(RiskFlag::Destructive);
            }
            let guidance = RiskFlag::ALL.iter().copied().filter(|r| !deny.contains(r) && rng.gen_bool(0.3)).collect();
            artifact.contract.action_policy = ActionPolicy {
                default_outcome: *[Outcome::Execute, Outcome::Execute, Outcome::Guidance, Outcome::Blocked].choose(&mut rng).unwrap(),
                deny_risks: deny,
                guidance_risks: guidance,
                min_validation_for_execute: *[ValidationLevel::Syntactic, ValidationLevel::ExecutableTest].choose(&mut rng).unwrap(),
            };
        }
        let policy = artifact.contract.action_policy.clone();
        let names = artifact.contract.operator_names();
        let ws = root.path().join(format!("ws_{}", f.name));
        fs::create_dir_all(&ws).unwrap();

        let mut req = InvocationRequest::new(&ws);
        match rng.gen_range(0..10) {
            0 => {}
            1 => req.requested_operator = Some(format!("bogus_{i}")),
            _ => req.requested_operator = Some(names.choose(&mut rng).unwrap().clone()),
        }
        let intents = ["", "echo this", "wipe scratch", "write the report", "count words", "guide", "workflow", "fetch page"];
        req.intent_text = intents.choose(&mut rng).unwrap().to_string();
        let asset_paths: Vec<String> = f.files.iter().map(|(p, _)| p.clone()).collect();
        for _ in 0..rng.gen_range(0..7) {
            let (k, v) = match rng.gen_range(0..7) {
                0 => ("path".to_string(), asset_paths.choose(&mut rng).unwrap().clone()),
                1 => ("path".into(), "../../etc/passwd".into()),
                2 => ("query".into(), f.token.clone()),
                3 => ("limit".into(), rng.gen_range(0..4).to_string()),
                4 => ("limit".into(), "many".into()),
                5 => ("text".into(), "a b c".into()),
                _ => ("args".into(), format!("hello {i}")),
            };
            req.named_arguments.insert(k, v);
        }
        req.disclosure_stage = *[DisclosureStage::Handle, DisclosureStage::Summary, DisclosureStage::Full].choose(&mut rng).unwrap();
        if rng.gen_bool(0.2) {
            req.completed_steps.push("s002".into());
        }
        let cfg = SandboxConfig { timeout: Duration::from_secs(20), ..SandboxConfig::default() };

        let env = invoke(&artifact, &req, &cfg);
        env.check_invariants().unwrap();
        check_schema(&serde_json::to_value(&env).unwrap(), &names);
        if env.status == Status::Blocked || env.contribution_type == Contribution::Guidance {
            assert!(env.continuation_required, "{}: blocked or guidance without continuation", f.name);
        }
        let op = env.selected_operator.as_deref().and_then(|n| artifact.contract.operator(n));
        if let Some(op) = op {
            if !op.risk.is_disjoint(&policy.deny_risks) {
                denied_seen += 1;
                assert!(!env.trace.iter().any(|t| t.event == "executed" || t.event == "node_started"), "denied {} executed", op.name);
            }
        }
        if let Some(nodes) = workflow_nodes(&artifact) {
            for t in env.trace.iter().filter(|t| t.event == "node_started") {
                let node = nodes.iter().find(|n| Some(&n.step_id) == t.step_id.as_ref()).unwrap();
                assert!(node.risk.is_disjoint(&policy.deny_risks), "denied node {} started", node.step_id);
            }
        }
        if policy.deny_risks.contains(&RiskFlag::Destructive) {
            assert!(!ws.join(CANARY).exists(), "destructive operator ran under a denying policy");
        }
        let _ = fs::remove_file(ws.join(CANARY));
        let key = match (env.status, env.contribution_type) {
            (Status::Blocked, _) => "blocked",
            (Status::Error, _) => "error",
            (_, Contribution::Executed) => "executed",
            (_, Contribution::Guidance) => "guidance",
            (_, Contribution::Fallback) => "fallback",
            (_, Contribution::Partial) => "partial",
        };
        *counts.entry(key).or_default() += 1;
    }
    assert!(denied_seen > 0 && counts.get("executed").copied().unwrap_or(0) > 0);
    format!("600 invocations, {denied_seen} on denied operators, outcomes {counts:?}")
}

fn workflow_nodes(a: &CompiledArtifact) -> Option<Vec<WorkflowNode>> {
    match &a.lowering_payload {
        skillc_core::lowering::LoweringOutput::Workflow { graph, .. } => Some(graph.nodes.clone()),
        _ => None,
    }
}

fn reachable(edges: &[(usize, usize)], from: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        for &(a, b) in edges {
            if a == v && seen.insert(b) {
                queue.push_back(b);
            }
        }
    }
    seen
}

fn resume_minimality() -> String {
    let mut rng = StdRng::seed_from_u64(SEED + 7);
    let pkg = tempfile::tempdir().unwrap();
    fs::write(pkg.path().join("SKILL.md"), "# W\n").unwrap();
    let capsule = build_fallback_capsule(&load_package(pkg.path()).unwrap()).unwrap();
    let policy = ActionPolicy::default();
    let cfg = SandboxConfig::default();
    let mut total = 0;
    for round in 0..50 {
        let n = rng.gen_range(2..=9);
        let edges = random_dag(&mut rng, n);
        let failing = rng.gen_range(0..n);
        let g = command_graph(n, &edges, |i| {
            if i == failing {
                format!("test -e fixed_{}", step_id(i))
            } else {
                format!("echo {i}")
            }
        });
        let (g, _) = normalize_graph(&g);
        let report = validate_graph(&g, &ValidationContext::default());
        assert!(report.ok, "{report:?}");

        let ws = tempfile::tempdir().unwrap();
        let hash = Digest::of(format!("resume-{round}").as_bytes());
        let ctx = RunContext { capsule: &capsule, policy: &policy, hash: &hash, workspace: ws.path(), operator: "workflow" };
        let ids: Vec<String> = g.nodes.iter().map(|x| x.step_id.clone()).collect();
        let req = InvocationRequest::new(ws.path());
        let failed = step_id(failing);

        let (env, state) = run_workflow(&g, &ids, ExecutionState::default(), &req, &cfg, &ctx);
        assert_eq!(env.status, Status::Error);
        assert_eq!(state.status(&failed), NodeStatus::Failed);

        fs::write(ws.path().join(format!("fixed_{failed}")), "").unwrap();
        let (env, state) = run_workflow(&g, &ids, ExecutionState::load(ws.path(), &hash), &req, &cfg, &ctx);
        assert_eq!(env.status, Status::Ok);
        let executed: BTreeSet<String> = serde_json::from_value(env.output["executed_steps"].clone()).unwrap();
        let cone = reachable(&edges, failing);
        let mut expected: BTreeSet<String> = cone.iter().map(|&i| step_id(i)).collect();
        expected.insert(failed.clone());
        assert_eq!(executed.len(), 1 + cone.len());
        assert_eq!(executed, expected);
        assert!(ids.iter().all(|id| state.status(id) == NodeStatus::Succeeded));
        total += executed.len();
    }
    format!("50 DAGs, {total} nodes re-executed, all equal to 1 + descendants")
}

fn skillc(args: &[&str]) -> (i32, Vec<u8>, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_skillc"))
        .args(args)
        .env_remove("SKILLC_JUDGE_ENDPOINT")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), out.stdout, String::from_utf8_lossy(&out.stderr).into_owned())
}

fn long_prose(seed: u64, bytes: usize) -> String {
    let mut rng = StdRng::seed_from_u64(seed);
    let words = [
        "the", "layout", "of", "each", "document", "should", "follow", "house", "rules", "for", "spacing", "tables",
        "figures", "and", "citations", "when", "in", "doubt", "prefer", "clarity", "over", "brevity",
    ];
    let mut s = String::new();
    while s.len() < bytes {
        for _ in 0..rng.gen_range(8..16) {
            s.push_str(words.choose(&mut rng).unwrap());
            s.push(' ');
        }
        s.push_str(".\n");
        if rng.gen_bool(0.15) {
            s.push('\n');
        }
    }
    s
}

fn disclosure_corpus() -> Vec<Files> {
    let script = |i: usize| text(&format!("tools/tool{i}.sh"), &format!("#!/bin/sh\n# Tool {i}: print a label.\necho tool{i} \"$@\"\n"));
    vec![
        vec![text("SKILL.md", &format!("---\nname: big-guide\ndescription: Long house style guide.\n---\n# Guide\n\n## Examples\n\n{}", long_prose(1, 9000)))],
        vec![
            text("SKILL.md", &format!("---\nname: many-tools\ndescription: Label files with small tools.\n---\n# Tools\n\nUse the scripts in `tools/`.\n\n{}", long_prose(2, 3000))),
            script(1),
            script(2),
            script(3),
            script(4),
            text("docs/usage.md", &format!("# Usage\n\n{}", long_prose(3, 6000))),
        ],
        vec![text(
            "SKILL.md",
            &format!(
                "---\nname: long-flow\ndescription: Prepare, build and check output.\n---\n# Flow\n\n{}\n\n1. Prepare:\n   ```bash\n   echo prep > prep.txt\n   ```\n2. Build:\n   ```bash\n   cat prep.txt\n   ```\n3. Check the result carefully.\n\n{}",
                long_prose(4, 4500),
                long_prose(5, 4500)
            ),
        )],
        vec![
            text("SKILL.md", &format!("---\nname: table-ref\ndescription: Reference tables.\n---\n# Reference\n\n| a | b |\n|---|---|\n| 1 | 2 |\n\n{}", long_prose(6, 5000))),
            text("docs/more.md", &format!("# More\n\n{}", long_prose(7, 5000))),
        ],
        vec![text("SKILL.md", &format!("---\nname: plain-notes\ndescription: Loose notes.\n---\n{}", long_prose(8, 8500)))],
        vec![
            text("SKILL.md", &format!("---\nname: py-helpers\ndescription: Python helpers.\n---\n# Helpers\n\nRun the helpers in `scripts/`.\n\n{}", long_prose(9, 4000))),
            text("scripts/a.py", "import argparse\np = argparse.ArgumentParser()\np.add_argument('--name')\nprint(p.parse_args().name)\n"),
            text("scripts/b.py", "print('b')\n"),
            text("docs/ref.md", &format!("# Ref\n\n{}", long_prose(10, 5000))),
        ],
    ]
}

fn disclosure_reduction() -> String {
    let root = tempfile::tempdir().unwrap();
    let mut worst_handle: f64 = 0.0;
    let mut worst_full: f64 = 0.0;
    let corpus = disclosure_corpus();
    for (i, files) in corpus.iter().enumerate() {
        let text_bytes: usize = files.iter().map(|(_, b)| b.len()).sum();
        assert!(text_bytes >= 8 * 1024);
        let dir = root.path().join(format!("p{i}"));
        write_tree(&dir, files);
        let (code, out, err) = skillc(&["--json", "measure", dir.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
        let v: Value = serde_json::from_slice(&out).unwrap();
        let raw = v["raw_tokens"].as_u64().unwrap();
        assert_eq!(raw as usize, text_bytes.div_ceil(4));
        let handle = v["handle_tokens"].as_u64().unwrap() as f64 / raw as f64;
        let full = v["full_tokens"].as_u64().unwrap() as f64 / raw as f64;
        assert!(handle <= 0.10, "package {i}: handle {:.1}% of raw", handle * 100.0);
        assert!(full <= 0.60, "package {i}: full {:.1}% of raw", full * 100.0);
        worst_handle = worst_handle.max(handle);
        worst_full = worst_full.max(full);
    }
    format!(
        "{} packages, worst handle {:.2}%, worst full {:.2}% of raw tokens",
        corpus.len(),
        worst_handle * 100.0,
        worst_full * 100.0
    )
}

fn cli_round_trip() -> String {
    let root = tempfile::tempdir().unwrap();
    let store = root.path().join("store");
    let ws = root.path().join("ws");
    fs::create_dir_all(&ws).unwrap();
    let base = ["--store", store.to_str().unwrap(), "--workspace", ws.to_str().unwrap()];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        skillc(&args)
    };
    let mut steps = 0;
    for f in corpus() {
        let dir = root.path().join(f.name);
        write_tree(&dir, &f.files);
        let (code, out, err) = run(&["compile", dir.to_str().unwrap()]);
        let want = if f.shape == "insufficient" { 2 } else { 0 };
        assert_eq!(code, want, "compile {}: {err}", f.name);
        let hash = String::from_utf8(out).unwrap().trim().to_string();
        assert_eq!(hash.len(), 64);
        let (code, out, _) = run(&["compile", dir.to_str().unwrap(), "--json"]);
        assert_eq!(code, want);
        let v: Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(v["hash"], hash.as_str());
        assert_eq!(v["reused"], true);

        let (code, out, err) = run(&["--json", "inspect", &hash]);
        assert_eq!(code, 0, "{err}");
        let report: Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(report["shape"], f.shape);

        for (path, bytes) in &f.files {
            if path == "SKILL.md" {
                continue;
            }
            let (code, out, err) = run(&["get", &hash, path]);
            assert_eq!(code, 0, "{err}");
            assert_eq!(Sha256::digest(&out), Sha256::digest(bytes), "{}: {path}", f.name);
        }
        let (code, out, _) = run(&["--json", "search", &hash, &f.token]);
        assert_eq!(code, 0);
        let hits: Value = serde_json::from_slice(&out).unwrap();
        assert!(hits[0]["text"].as_str().unwrap().contains(&f.token));
        steps += 1;
    }

    let echo_dir = root.path().join("echo-tools");
    let hash = {
        let (_, out, _) = run(&["compile", echo_dir.to_str().unwrap()]);
        String::from_utf8(out).unwrap().trim().to_string()
    };
    let (code, out, err) = run(&["run", &hash, "--op", "echo", "--arg", "args=hello round trip"]);
    assert_eq!(code, 0, "{err}");
    let env: Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(env["status"], "ok");
    assert_eq!(env["contribution_type"], "executed");
    assert_eq!(env["output"]["record"]["stdout"], "hello round trip\n");

    let (code, out, _) = run(&["run", &hash, "--op", "wipe"]);
    assert_eq!(code, 3);
    assert_eq!(serde_json::from_slice::<Value>(&out).unwrap()["continuation_required"], true);
    assert!(!ws.join(CANARY).exists());

    let (code, _, _) = run(&["run", &hash, "--op", "get_skill_asset", "--arg", "path=tools/echo.sh"]);
    assert_eq!(code, 0);
    let (code, _, _) = run(&["run", &hash, "--op", "no_such_op"]);
    assert_eq!(code, 1);
    let (code, _, _) = run(&["inspect", &"0".repeat(64)]);
    assert_eq!(code, 1);

    let policy = root.path().join("policy.json");
    fs::write(&policy, r#"{"default_outcome":"guidance","deny_risks":["destructive"],"guidance_risks":[],"min_validation_for_execute":"syntactic"}"#).unwrap();
    let (code, out, _) = run(&["--policy", policy.to_str().unwrap(), "run", &hash, "--op", "echo"]);
    assert_eq!(code, 4);
    assert_eq!(serde_json::from_slice::<Value>(&out).unwrap()["contribution_type"], "guidance");

    let out_file = root.path().join("blob.out");
    let (code, _, _) = run(&["get", &hash, "assets/blob.bin", "--out", out_file.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(fs::read(&out_file).unwrap(), fs::read(echo_dir.join("assets/blob.bin")).unwrap());
    format!("{steps} fixtures round-tripped; exit codes 0/1/2/3/4 observed")
}

fn main() {
    let criteria: Vec<(&str, &str, u64, fn() -> String)> = vec![
        ("1", "hash determinism and sensitivity", 10, hash_determinism),
        ("2", "artifact validity binding", 10, artifact_validity),
        ("3", "classifier priority order", 5, classifier_priority),
        ("4", "graph validation oracle equivalence", 30, graph_oracles),
        ("5", "lossless deoptimization", 20, lossless_deopt),
        ("6", "envelope totality and policy soundness", 60, envelope_fuzz),
        ("7", "resume minimality", 30, resume_minimality),
        ("8", "disclosure reduction", 10, disclosure_reduction),
        ("9", "end-to-end CLI round trip", 120, cli_round_trip),
    ];
    let suite = Instant::now();
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) if secs <= limit as f64 => println!("PASS criterion {id}: {name}: {detail} ({secs:.2}s)"),
            Ok(detail) => {
                failed += 1;
                println!("FAIL criterion {id}: {name}: {detail}, took {secs:.2}s over the {limit}s limit");
            }
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL criterion {id}: {name}: {msg} ({secs:.2}s)");
            }
        }
    }
    let total = suite.elapsed().as_secs_f64();
    println!("acceptance suite wall-clock {total:.2}s");
    if failed > 0 || total > 120.0 {
        std::process::exit(1);
    }
}
