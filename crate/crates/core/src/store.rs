//! Content-addressed artifact store.
//!
//! Each artifact lives in `<root>/<package_hash>/` and carries a manifest
//! holding the sha256 of every other file plus a digest of the manifest
//! itself. Writes go to a sibling temp directory that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{BoundaryContract, BoundarySummary, CapsuleAsset, FallbackCapsule, PackageIdentity};
use crate::digest::Digest;
use crate::lowering::{LoweringOutput, ReferenceIndex};
use crate::package::{is_safe_relative_path, EnvironmentFingerprint, SkillPackage};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONTRACT_FILE: &str = "contract.json";
pub const LOWERING_FILE: &str = "lowering.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ENTRY_FILE: &str = "capsule/ENTRY.md";
pub const INDEX_FILE: &str = "capsule/index.json";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("artifact not found: {0}")]
    NotFound(String),
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),
    #[error("store conflict: {0}")]
    StoreConflict(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

fn io_err(context: &Path, e: io::Error) -> StoreError {
    StoreError::Io(format!("{}: {e}", context.display()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileMetadata {
    pub compiler_version: String,
    pub judge_identity: String,
    /// RFC 3339.
    pub timestamp: String,
    pub environment: EnvironmentFingerprint,
    /// Compile-time diagnostics worth keeping (demotions, adaptation mode).
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledArtifact {
    pub package_hash: Digest,
    pub summary: BoundarySummary,
    pub contract: BoundaryContract,
    pub lowering_payload: LoweringOutput,
    pub capsule: FallbackCapsule,
    pub compile_metadata: CompileMetadata,
}

impl CompiledArtifact {
    pub fn shape(&self) -> &'static str {
        match self.lowering_payload {
            LoweringOutput::Workflow { .. } => "workflow",
            LoweringOutput::Dispatcher(_) => "dispatcher",
            LoweringOutput::Reference(_) => "reference",
            LoweringOutput::Insufficient(_) => "insufficient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestBody {
    format: u32,
    package_hash: Digest,
    compile_metadata: CompileMetadata,
    files: BTreeMap<String, Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    body: ManifestBody,
    manifest_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CapsuleIndex {
    capsule_id: Digest,
    assets: Vec<CapsuleAsset>,
    text_index: ReferenceIndex,
    package_identity: PackageIdentity,
}

/// Compact JSON with lexicographically sorted keys.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("artifact types serialize");
    serde_json::to_vec(&v).expect("json values serialize")
}

fn parse<T: DeserializeOwned>(name: &str, bytes: &[u8]) -> Result<T, StoreError> {
    serde_json::from_slice(bytes).map_err(|e| StoreError::CorruptArtifact(format!("{name}: {e}")))
}

/// Every file of the artifact except the manifest, keyed by relative path.
fn render_files(artifact: &CompiledArtifact) -> Result<BTreeMap<String, Vec<u8>>, StoreError> {
    let mut files = BTreeMap::new();
    files.insert(CONTRACT_FILE.to_string(), canonical_json(&artifact.contract));
    files.insert(LOWERING_FILE.to_string(), canonical_json(&artifact.lowering_payload));
    files.insert(SUMMARY_FILE.to_string(), canonical_json(&artifact.summary));
    files.insert(ENTRY_FILE.to_string(), artifact.capsule.entry_document.as_bytes().to_vec());
    let index = CapsuleIndex {
        capsule_id: artifact.capsule.capsule_id.clone(),
        assets: artifact.capsule.assets.clone(),
        text_index: artifact.capsule.text_index.clone(),
        package_identity: artifact.capsule.package_identity.clone(),
    };
    files.insert(INDEX_FILE.to_string(), canonical_json(&index));
    for asset in &artifact.capsule.assets {
        let bytes = artifact
            .capsule
            .read_asset(&asset.record.path)
            .map_err(|e| StoreError::CorruptArtifact(e.to_string()))?;
        files.insert(asset.stored_path.clone(), bytes);
    }
    Ok(files)
}

fn digest_map(files: &BTreeMap<String, Vec<u8>>) -> BTreeMap<String, Digest> {
    files.iter().map(|(k, v)| (k.clone(), Digest::of(v))).collect()
}

fn render_manifest(body: ManifestBody) -> Vec<u8> {
    let manifest_digest = Digest::of(&canonical_json(&body));
    canonical_json(&Manifest { body, manifest_digest })
}

fn read_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| StoreError::CorruptArtifact(format!("{MANIFEST_FILE}: {e}")))?;
    let manifest: Manifest = parse(MANIFEST_FILE, &bytes)?;
    if Digest::of(&canonical_json(&manifest.body)) != manifest.manifest_digest {
        return Err(StoreError::CorruptArtifact(format!("{MANIFEST_FILE}: digest mismatch")));
    }
    if canonical_json(&manifest) != bytes {
        return Err(StoreError::CorruptArtifact(format!("{MANIFEST_FILE}: non-canonical encoding")));
    }
    Ok(manifest)
}

pub fn artifact_dir(store_root: &Path, hash: &Digest) -> PathBuf {
    store_root.join(hash.as_str())
}

/// Writes the artifact under `<store_root>/<hash>/`. Storing identical
/// content again is a no-op; metadata such as the timestamp is not part of
/// the comparison.
pub fn store_artifact(artifact: &CompiledArtifact, store_root: &Path) -> Result<PathBuf, StoreError> {
    if artifact.contract.fallback.capsule_id != artifact.package_hash {
        return Err(StoreError::CorruptArtifact("contract fallback does not name the package hash".into()));
    }
    let files = render_files(artifact)?;
    let digests = digest_map(&files);
    let target = artifact_dir(store_root, &artifact.package_hash);
    if target.exists() {
        return compare_existing(&target, &digests);
    }

    fs::create_dir_all(store_root).map_err(|e| io_err(store_root, e))?;
    let tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempdir_in(store_root)
        .map_err(|e| io_err(store_root, e))?;
    for (rel, bytes) in &files {
        let p = tmp.path().join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
    }
    let manifest = render_manifest(ManifestBody {
        format: FORMAT_VERSION,
        package_hash: artifact.package_hash.clone(),
        compile_metadata: artifact.compile_metadata.clone(),
        files: digests.clone(),
    });
    let mp = tmp.path().join(MANIFEST_FILE);
    fs::write(&mp, manifest).map_err(|e| io_err(&mp, e))?;

    match fs::rename(tmp.path(), &target) {
        Ok(()) => Ok(target),
        // Lost a race with another writer of the same hash.
        Err(_) if target.exists() => compare_existing(&target, &digests),
        Err(e) => Err(io_err(&target, e)),
    }
}

fn compare_existing(target: &Path, digests: &BTreeMap<String, Digest>) -> Result<PathBuf, StoreError> {
    match read_manifest(target) {
        Ok(m) if &m.body.files == digests => Ok(target.to_path_buf()),
        Ok(_) => Err(StoreError::StoreConflict(format!(
            "{} already holds different content",
            target.display()
        ))),
        Err(e) => Err(StoreError::StoreConflict(format!("{}: existing artifact unreadable ({e})", target.display()))),
    }
}

/// Loads and fully verifies an artifact: manifest self-digest, every file
/// digest, and the capsule records against the stored bytes.
pub fn load_artifact(hash: &Digest, store_root: &Path) -> Result<CompiledArtifact, StoreError> {
    let dir = artifact_dir(store_root, hash);
    if !dir.is_dir() {
        return Err(StoreError::NotFound(hash.to_string()));
    }
    let manifest = read_manifest(&dir)?;
    let body = &manifest.body;
    if body.format != FORMAT_VERSION {
        return Err(StoreError::CorruptArtifact(format!("unsupported format {}", body.format)));
    }
    if &body.package_hash != hash {
        return Err(StoreError::CorruptArtifact("manifest names a different package hash".into()));
    }
    let mut files: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for (rel, digest) in &body.files {
        if !is_safe_relative_path(rel) {
            return Err(StoreError::CorruptArtifact(format!("unsafe path {rel}")));
        }
        let bytes = fs::read(dir.join(rel)).map_err(|e| StoreError::CorruptArtifact(format!("{rel}: {e}")))?;
        if &Digest::of(&bytes) != digest {
            return Err(StoreError::CorruptArtifact(format!("{rel}: digest mismatch")));
        }
        files.insert(rel.as_str(), bytes);
    }
    let take = |name: &str| {
        files
            .get(name)
            .ok_or_else(|| StoreError::CorruptArtifact(format!("{name}: missing from manifest")))
    };
    let contract: BoundaryContract = parse(CONTRACT_FILE, take(CONTRACT_FILE)?)?;
    let lowering_payload: LoweringOutput = parse(LOWERING_FILE, take(LOWERING_FILE)?)?;
    let summary: BoundarySummary = parse(SUMMARY_FILE, take(SUMMARY_FILE)?)?;
    let index: CapsuleIndex = parse(INDEX_FILE, take(INDEX_FILE)?)?;
    let entry = String::from_utf8(take(ENTRY_FILE)?.clone())
        .map_err(|_| StoreError::CorruptArtifact(format!("{ENTRY_FILE}: not UTF-8")))?;

    for asset in &index.assets {
        let stored = body
            .files
            .get(&asset.stored_path)
            .ok_or_else(|| StoreError::CorruptArtifact(format!("{}: missing from manifest", asset.stored_path)))?;
        if stored != &asset.record.digest {
            return Err(StoreError::CorruptArtifact(format!("{}: capsule record disagrees", asset.record.path)));
        }
    }
    if &index.capsule_id != hash || &contract.fallback.capsule_id != hash {
        return Err(StoreError::CorruptArtifact("capsule id does not match the package hash".into()));
    }

    let mut capsule = FallbackCapsule::from_parts(
        index.capsule_id,
        entry,
        index.assets,
        index.text_index,
        index.package_identity,
    );
    capsule.attach_dir(dir);
    Ok(CompiledArtifact {
        package_hash: hash.clone(),
        summary,
        contract,
        lowering_payload,
        capsule,
        compile_metadata: manifest.body.compile_metadata,
    })
}

/// An artifact is valid only for the exact package it was compiled from.
pub fn check_validity(artifact: &CompiledArtifact, current: &SkillPackage) -> bool {
    artifact.package_hash == current.package_hash
}

/// Hashes with a stored artifact directory, sorted.
pub fn list_artifacts(store_root: &Path) -> Vec<Digest> {
    let mut out: Vec<Digest> = fs::read_dir(store_root)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| Digest::parse(&e.file_name().to_string_lossy()))
        .collect();
    out.sort();
    out
}
