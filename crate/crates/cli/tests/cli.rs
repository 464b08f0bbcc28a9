//! Exit codes and output of individual commands.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn skillc(args: &[&str]) -> (i32, Vec<u8>, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_skillc"))
        .args(args)
        .env_remove("SKILLC_JUDGE_ENDPOINT")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), out.stdout, String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(dir: &Path, files: &[(&str, &str)]) {
    for (p, c) in files {
        let full = dir.join(p);
        fs::create_dir_all(full.parent().unwrap()).unwrap();
        fs::write(full, c).unwrap();
    }
}

fn count_files(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() { count_files(&p) } else { 1 }
        })
        .sum()
}

#[test]
fn missing_entry_is_an_error() {
    let root = tempfile::tempdir().unwrap();
    let store = root.path().join("store");
    let (code, _, err) = skillc(&["--store", store.to_str().unwrap(), "compile", root.path().to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("SKILL.md"), "{err}");
}

#[test]
fn empty_entry_degrades_and_still_stores() {
    let root = tempfile::tempdir().unwrap();
    let skill = root.path().join("skill");
    write(&skill, &[("SKILL.md", "")]);
    let store = root.path().join("store");
    let (code, out, err) = skillc(&["--store", store.to_str().unwrap(), "compile", skill.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("missing entry content"), "{err}");
    let hash = String::from_utf8(out).unwrap().trim().to_string();

    let (code, out, _) = skillc(&["--store", store.to_str().unwrap(), "assets", &hash]);
    assert_eq!(code, 0);
    assert_eq!(String::from_utf8(out).unwrap(), "path\ttype\tsize\tdigest\n");
    let (code, out, _) = skillc(&["--store", store.to_str().unwrap(), "--json", "assets", &hash]);
    assert_eq!(code, 0);
    assert_eq!(serde_json::from_slice::<Value>(&out).unwrap(), Value::Array(vec![]));

    let ws = root.path().join("ws");
    fs::create_dir_all(&ws).unwrap();
    let (code, out, _) = skillc(&["--store", store.to_str().unwrap(), "--workspace", ws.to_str().unwrap(), "run", &hash]);
    assert_eq!(code, 4);
    let env: Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(env["contribution_type"], "guidance");
    assert_eq!(env["continuation_required"], true);
}

#[test]
fn compile_is_idempotent() {
    let root = tempfile::tempdir().unwrap();
    let skill = root.path().join("skill");
    write(
        &skill,
        &[
            ("SKILL.md", "---\nname: t\ndescription: Tools.\n---\n# Tools\n\nUse the scripts in `tools/` for the job at hand.\n"),
            ("tools/a.sh", "#!/bin/sh\necho a\n"),
            ("tools/b.sh", "#!/bin/sh\necho b\n"),
        ],
    );
    let store = root.path().join("store");
    let args = ["--store", store.to_str().unwrap(), "compile", skill.to_str().unwrap()];
    let (c1, h1, _) = skillc(&args);
    let files = count_files(&store);
    let manifest = fs::read(store.join(String::from_utf8_lossy(&h1).trim()).join("manifest.json")).unwrap();
    let (c2, h2, _) = skillc(&args);
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(h1, h2);
    assert_eq!(count_files(&store), files);
    assert_eq!(fs::read(store.join(String::from_utf8_lossy(&h1).trim()).join("manifest.json")).unwrap(), manifest);
}

#[test]
fn inspect_reports_and_detects_corruption() {
    let root = tempfile::tempdir().unwrap();
    let skill = root.path().join("skill");
    write(
        &skill,
        &[
            ("SKILL.md", "---\nname: t\ndescription: Tools.\n---\n# Tools\n\nUse the scripts in `tools/` for the job at hand.\n"),
            ("tools/a.sh", "#!/bin/sh\necho a\n"),
            ("tools/b.sh", "#!/bin/sh\necho b\n"),
        ],
    );
    let store = root.path().join("store");
    let s = store.to_str().unwrap();
    let (_, out, _) = skillc(&["--store", s, "compile", skill.to_str().unwrap()]);
    let hash = String::from_utf8(out).unwrap().trim().to_string();

    let (code, out, _) = skillc(&["--store", s, "inspect", &hash]);
    assert_eq!(code, 0);
    let report = String::from_utf8(out).unwrap();
    for name in ["a", "b", "list_skill_assets", "get_skill_asset", "search_skill_docs"] {
        assert!(report.contains(name));
    }
    assert!(report.contains("capsule assets: 2"));
    let (code, out, _) = skillc(&["--store", s, "--json", "inspect", &hash[..12]]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(v["shape"], "dispatcher");
    assert_eq!(v["validation_level"], "syntactic");
    assert_eq!(v["operators"].as_array().unwrap().len(), 5);

    let contract = store.join(&hash).join("contract.json");
    let mut bytes = fs::read(&contract).unwrap();
    bytes[10] ^= 1;
    fs::write(&contract, bytes).unwrap();
    let (code, _, err) = skillc(&["--store", s, "inspect", &hash]);
    assert_eq!(code, 1);
    assert!(err.contains("corrupt"), "{err}");

    let (code, _, _) = skillc(&["--store", s, "inspect", "not-a-hash"]);
    assert_eq!(code, 1);
}

#[test]
fn measure_counts_the_entry_alone() {
    let root = tempfile::tempdir().unwrap();
    let entry = "---\nname: solo\ndescription: Solo.\n---\n# Solo\n\nSome words.\n";
    write(root.path(), &[("SKILL.md", entry)]);
    let (code, out, _) = skillc(&["--json", "measure", root.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(v["raw_tokens"].as_u64().unwrap() as usize, entry.len().div_ceil(4));
    let (h, s, f) = (v["handle_tokens"].as_u64().unwrap(), v["summary_tokens"].as_u64().unwrap(), v["full_tokens"].as_u64().unwrap());
    assert!(h <= s && s <= f);

    let (_, again, _) = skillc(&["--json", "measure", root.path().to_str().unwrap()]);
    assert_eq!(out, again);
}

#[test]
fn large_package_discloses_less_than_raw() {
    let root = tempfile::tempdir().unwrap();
    let body = "Keep captions short and put units in column headers of every table.\n".repeat(130);
    write(root.path(), &[("SKILL.md", &format!("---\nname: guide\ndescription: Table style.\n---\n# Guide\n\n## Examples\n\n{body}"))]);
    let (_, out, _) = skillc(&["--json", "measure", root.path().to_str().unwrap()]);
    let v: Value = serde_json::from_slice(&out).unwrap();
    let raw = v["raw_tokens"].as_u64().unwrap();
    assert!(v["handle_tokens"].as_u64().unwrap() <= v["full_tokens"].as_u64().unwrap());
    assert!(v["full_tokens"].as_u64().unwrap() <= raw);
    assert!(v["handle_reduction_pct"].as_f64().unwrap() >= 90.0);
}

#[test]
fn bad_policy_override_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let skill = root.path().join("skill");
    write(&skill, &[("SKILL.md", "")]);
    let store = root.path().join("store");
    let s = store.to_str().unwrap();
    let (_, out, _) = skillc(&["--store", s, "compile", skill.to_str().unwrap()]);
    let hash = String::from_utf8(out).unwrap().trim().to_string();
    let policy = root.path().join("p.json");
    fs::write(&policy, r#"{"default_outcome":"execute","deny_risks":["network"],"guidance_risks":["network"],"min_validation_for_execute":"syntactic"}"#).unwrap();
    let (code, _, err) = skillc(&["--store", s, "--policy", policy.to_str().unwrap(), "run", &hash]);
    assert_eq!(code, 1);
    assert!(err.contains("network"), "{err}");
}
