//! `skillc`: compile skill packages into boundary contracts, inspect them,
//! invoke them through the guarded runtime, and recover source material.
//!
//! Machine-readable output goes to standard output as JSON; diagnostics go
//! to standard error.
//!
//! Exit codes: `compile` 0 ok, 2 insufficient (artifact still stored);
//! `run` 0 ok, 3 blocked, 4 guidance or awaiting continuation; 1 on any
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::json;

use skillc_core::compile::{compile_dir, compile_package};
use skillc_core::contract::ActionPolicy;
use skillc_core::digest::Digest;
use skillc_core::judge::judge_from_env;
use skillc_core::package::{load_package, AssetType, CompilationInput, CompilePolicy};
use skillc_core::runtime::{
    disclose, estimate_tokens, get_skill_asset, invoke, list_skill_assets, search_skill_docs, Contribution,
    DisclosureStage, InvocationRequest, Status,
};
use skillc_core::sandbox::SandboxConfig;
use skillc_core::store::{list_artifacts, load_artifact, CompiledArtifact};

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_INSUFFICIENT: u8 = 2;
const EXIT_BLOCKED: u8 = 3;
const EXIT_GUIDANCE: u8 = 4;

#[derive(Parser)]
#[command(name = "skillc", version, about = "Boundary-first skill compiler and runtime")]
struct Cli {
    /// Artifact store directory.
    #[arg(long, global = true, default_value = "./.skillc_store")]
    store: PathBuf,

    /// Workspace for invocations (defaults to the current directory).
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,

    /// JSON file overriding the contract's action policy.
    #[arg(long, global = true)]
    policy: Option<PathBuf>,

    /// Machine-readable output everywhere.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a skill directory and store the artifact.
    Compile {
        dir: PathBuf,
        /// Recompile even when an artifact for the same hash is stored.
        #[arg(long)]
        no_cache: bool,
    },
    /// Print an artifact report.
    Inspect { hash: String },
    /// Invoke an artifact and print the envelope.
    Run {
        hash: String,
        /// Operator to run; otherwise selected from `--intent`.
        #[arg(long = "op")]
        op: Option<String>,
        /// Named argument `key=value`; repeatable.
        #[arg(long = "arg", value_parser = parse_kv)]
        args: Vec<(String, String)>,
        #[arg(long, default_value = "")]
        intent: String,
        /// Workflow step the caller completed by hand; repeatable.
        #[arg(long = "done")]
        done: Vec<String>,
        /// Per-process timeout in seconds.
        #[arg(long)]
        timeout: Option<u64>,
    },
    /// List the capsule's original assets.
    Assets { hash: String },
    /// Write one original asset to standard output or `--out`.
    Get {
        hash: String,
        path: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search the capsule's text.
    Search {
        hash: String,
        query: String,
        #[arg(long, default_value_t = 5)]
        limit: usize,
    },
    /// Estimated-token accounting for each disclosure stage.
    Measure { dir: PathBuf },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

struct Ctx {
    store: PathBuf,
    workspace: PathBuf,
    policy: Option<PathBuf>,
    json: bool,
}

impl Ctx {
    fn print(&self, value: &serde_json::Value) {
        let text = if self.json {
            serde_json::to_string(value)
        } else {
            serde_json::to_string_pretty(value)
        };
        let _ = writeln!(std::io::stdout().lock(), "{}", text.expect("json values serialize"));
    }

    /// Full hash, or a unique prefix of a stored one.
    fn resolve(&self, hash: &str) -> Result<Digest, String> {
        if let Some(d) = Digest::parse(hash) {
            return Ok(d);
        }
        let matches: Vec<Digest> = list_artifacts(&self.store)
            .into_iter()
            .filter(|d| !hash.is_empty() && d.as_str().starts_with(hash))
            .collect();
        match matches.as_slice() {
            [one] => Ok(one.clone()),
            [] => Err(format!("artifact not found: {hash}")),
            _ => Err(format!("ambiguous hash prefix: {hash}")),
        }
    }

    fn load(&self, hash: &str) -> Result<CompiledArtifact, String> {
        let digest = self.resolve(hash)?;
        let mut artifact = load_artifact(&digest, &self.store).map_err(|e| e.to_string())?;
        if let Some(path) = &self.policy {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let policy: ActionPolicy =
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            policy.validate()?;
            artifact.contract.action_policy = policy;
        }
        Ok(artifact)
    }
}

fn cmd_compile(ctx: &Ctx, dir: &Path, no_cache: bool) -> Result<u8, String> {
    let policy = CompilePolicy { cache_reuse: !no_cache, ..CompilePolicy::default() };
    let mut judge = judge_from_env();
    let out = compile_dir(&absolute(dir), &ctx.store, policy, judge.as_mut()).map_err(|e| e.to_string())?;
    let a = &out.artifact;
    let diagnostic = out
        .decision
        .as_ref()
        .and_then(|d| d.diagnostic.clone())
        .or_else(|| a.compile_metadata.notes.iter().find_map(|n| n.strip_prefix("diagnostic: ").map(str::to_string)));
    if ctx.json {
        ctx.print(&json!({
            "hash": a.package_hash.as_str(),
            "shape": a.shape(),
            "handle": a.summary.handle,
            "reused": out.reused,
            "diagnostic": diagnostic,
        }));
    } else {
        println!("{}", a.package_hash);
        eprintln!("shape: {}{}", a.shape(), if out.reused { " (cached)" } else { "" });
        if let Some(d) = &diagnostic {
            eprintln!("diagnostic: {d}");
        }
    }
    Ok(if a.shape() == "insufficient" { EXIT_INSUFFICIENT } else { EXIT_OK })
}

fn cmd_inspect(ctx: &Ctx, hash: &str) -> Result<u8, String> {
    let a = ctx.load(hash)?;
    let c = &a.contract;
    if ctx.json {
        let ops: Vec<_> = c
            .operators
            .iter()
            .map(|o| {
                json!({
                    "name": o.name,
                    "kind": o.kind.as_str(),
                    "risk": o.risk,
                    "evidence": o.evidence_level().as_str(),
                    "arguments": o.argument_schema,
                })
            })
            .collect();
        ctx.print(&json!({
            "hash": a.package_hash.as_str(),
            "summary": a.summary,
            "shape": a.shape(),
            "operators": ops,
            "risk_flags": c.risk_flags,
            "validation_level": c.validation_level.as_str(),
            "capsule_assets": a.capsule.assets.len(),
            "compile_metadata": a.compile_metadata,
        }));
    } else {
        println!("{}", disclose(&a, DisclosureStage::Full).trim_end());
        println!("shape: {}", a.shape());
        println!("capsule assets: {}", a.capsule.assets.len());
        println!("compiled by {} at {}", a.compile_metadata.compiler_version, a.compile_metadata.timestamp);
    }
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    ctx: &Ctx,
    hash: &str,
    op: Option<String>,
    args: Vec<(String, String)>,
    intent: String,
    done: Vec<String>,
    timeout: Option<u64>,
) -> Result<u8, String> {
    let a = ctx.load(hash)?;
    let mut request = InvocationRequest::new(&ctx.workspace);
    request.requested_operator = op;
    request.named_arguments = args.into_iter().collect();
    request.intent_text = intent;
    request.completed_steps = done;
    let mut cfg = SandboxConfig::default();
    if let Some(t) = timeout {
        cfg.timeout = Duration::from_secs(t);
    }
    let env = invoke(&a, &request, &cfg);
    ctx.print(&serde_json::to_value(&env).expect("envelopes serialize"));
    Ok(match (env.status, env.contribution_type) {
        (Status::Error, _) => EXIT_ERROR,
        (Status::Blocked, _) => EXIT_BLOCKED,
        (Status::Ok, Contribution::Guidance | Contribution::Partial) => EXIT_GUIDANCE,
        (Status::Ok, _) => EXIT_OK,
    })
}

fn cmd_assets(ctx: &Ctx, hash: &str) -> Result<u8, String> {
    let a = ctx.load(hash)?;
    let records = list_skill_assets(&a.capsule);
    if ctx.json {
        ctx.print(&serde_json::to_value(&records).expect("records serialize"));
    } else {
        println!("path\ttype\tsize\tdigest");
        for r in records {
            println!("{}\t{}\t{}\t{}", r.path, r.asset_type.as_str(), r.size, r.digest);
        }
    }
    Ok(EXIT_OK)
}

fn cmd_get(ctx: &Ctx, hash: &str, path: &str, out: Option<&Path>) -> Result<u8, String> {
    let a = ctx.load(hash)?;
    let bytes = get_skill_asset(&a.capsule, path).map_err(|e| e.to_string())?;
    match out {
        Some(p) => fs::write(p, &bytes).map_err(|e| format!("{}: {e}", p.display()))?,
        None => std::io::stdout().write_all(&bytes).map_err(|e| e.to_string())?,
    }
    Ok(EXIT_OK)
}

fn cmd_search(ctx: &Ctx, hash: &str, query: &str, limit: usize) -> Result<u8, String> {
    let a = ctx.load(hash)?;
    let hits = search_skill_docs(&a.capsule, query, limit.max(1));
    if ctx.json {
        ctx.print(&serde_json::to_value(&hits).expect("hits serialize"));
    } else {
        for (rank, h) in hits.iter().enumerate() {
            let first = h.text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
            println!("{}\t{}\t{}\t{}\t{}", rank + 1, h.chunk_id, h.score, h.provenance.asset_path, first);
        }
    }
    Ok(EXIT_OK)
}

fn percent_saved(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * (1.0 - part as f64 / whole as f64)
    }
}

fn cmd_measure(ctx: &Ctx, dir: &Path) -> Result<u8, String> {
    let package = load_package(&absolute(dir)).map_err(|e| e.to_string())?;
    let mut raw_bytes = package.entry_document.len();
    for r in package.assets.iter().filter(|r| r.asset_type != AssetType::Binary) {
        raw_bytes += r.size as usize;
    }
    let raw = raw_bytes.div_ceil(4);
    let mut judge = judge_from_env();
    let input = CompilationInput::new(package);
    let out = compile_package(&input, judge.as_mut(), &[]).map_err(|e| e.to_string())?;
    let a = &out.artifact;
    let stage = |s| estimate_tokens(disclose(a, s).as_bytes());
    let (h, s, f) = (stage(DisclosureStage::Handle), stage(DisclosureStage::Summary), stage(DisclosureStage::Full));
    if ctx.json {
        ctx.print(&json!({
            "raw_tokens": raw,
            "handle_tokens": h,
            "summary_tokens": s,
            "full_tokens": f,
            "handle_reduction_pct": percent_saved(h, raw),
            "summary_reduction_pct": percent_saved(s, raw),
            "full_reduction_pct": percent_saved(f, raw),
        }));
    } else {
        println!("stage\ttokens\treduction");
        println!("raw\t{raw}\t-");
        for (name, t) in [("handle", h), ("summary", s), ("full", f)] {
            println!("{name}\t{t}\t{:.2}%", percent_saved(t, raw));
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        store: absolute(&cli.store),
        workspace: absolute(&cli.workspace.clone().unwrap_or_else(|| PathBuf::from("."))),
        policy: cli.policy.as_deref().map(absolute),
        json: cli.json,
    };
    let result = match cli.command {
        Command::Compile { dir, no_cache } => cmd_compile(&ctx, &dir, no_cache),
        Command::Inspect { hash } => cmd_inspect(&ctx, &hash),
        Command::Run { hash, op, args, intent, done, timeout } => cmd_run(&ctx, &hash, op, args, intent, done, timeout),
        Command::Assets { hash } => cmd_assets(&ctx, &hash),
        Command::Get { hash, path, out } => cmd_get(&ctx, &hash, &path, out.as_deref()),
        Command::Search { hash, query, limit } => cmd_search(&ctx, &hash, &query, limit),
        Command::Measure { dir } => cmd_measure(&ctx, &dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if ctx.json {
                println!("{}", json!({ "error": e }));
            }
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
