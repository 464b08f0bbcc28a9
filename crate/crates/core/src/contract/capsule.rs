//! Fallback capsule: the source package kept byte-for-byte behind the
//! compiled boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;
use crate::lowering::{lower_reference, ReferenceIndex};
use crate::package::{AssetRecord, PackageError, PackageMetadata, SkillPackage};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CapsuleError {
    #[error("asset not found: {0}")]
    AssetNotFound(String),
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),
    #[error("unreadable asset {path}: {reason}")]
    UnreadableAsset { path: String, reason: String },
}

impl From<PackageError> for CapsuleError {
    fn from(e: PackageError) -> Self {
        match e {
            PackageError::UnreadableAsset { path, reason } => CapsuleError::UnreadableAsset { path, reason },
            PackageError::AssetChanged { path } => CapsuleError::UnreadableAsset {
                path,
                reason: "changed since the package was loaded".to_string(),
            },
            other => CapsuleError::UnreadableAsset {
                path: String::new(),
                reason: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleAsset {
    pub record: AssetRecord,
    /// Location relative to the artifact directory.
    pub stored_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageIdentity {
    pub metadata: PackageMetadata,
    pub package_hash: Digest,
}

/// Where capsule bytes live. Not serialized: a loaded capsule is attached
/// to its artifact directory, a freshly built one holds bytes in memory.
#[derive(Debug, Clone, Default)]
enum Source {
    #[default]
    Detached,
    Memory(Arc<BTreeMap<String, Vec<u8>>>),
    Dir(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FallbackCapsule {
    pub capsule_id: Digest,
    pub entry_document: String,
    pub assets: Vec<CapsuleAsset>,
    pub text_index: ReferenceIndex,
    pub package_identity: PackageIdentity,
    #[serde(skip)]
    source: Source,
}

impl PartialEq for FallbackCapsule {
    fn eq(&self, other: &Self) -> bool {
        self.capsule_id == other.capsule_id
            && self.entry_document == other.entry_document
            && self.assets == other.assets
            && self.text_index == other.text_index
            && self.package_identity == other.package_identity
    }
}

pub fn stored_asset_path(path: &str) -> String {
    format!("capsule/assets/{path}")
}

impl FallbackCapsule {
    /// Reassembles a capsule from stored parts; bytes must be attached.
    pub fn from_parts(
        capsule_id: Digest,
        entry_document: String,
        assets: Vec<CapsuleAsset>,
        text_index: ReferenceIndex,
        package_identity: PackageIdentity,
    ) -> Self {
        FallbackCapsule {
            capsule_id,
            entry_document,
            assets,
            text_index,
            package_identity,
            source: Source::Detached,
        }
    }

    /// Reads capsule bytes from an artifact directory from now on.
    pub fn attach_dir(&mut self, dir: PathBuf) {
        self.source = Source::Dir(dir);
    }

    pub fn records(&self) -> impl Iterator<Item = &AssetRecord> {
        self.assets.iter().map(|a| &a.record)
    }

    /// Asset bytes, verified against the recorded digest before return.
    pub fn read_asset(&self, path: &str) -> Result<Vec<u8>, CapsuleError> {
        let asset = self
            .assets
            .iter()
            .find(|a| a.record.path == path)
            .ok_or_else(|| CapsuleError::AssetNotFound(path.to_string()))?;
        let bytes = match &self.source {
            Source::Memory(map) => map
                .get(path)
                .cloned()
                .ok_or_else(|| CapsuleError::CorruptArtifact(format!("{path}: bytes missing")))?,
            Source::Dir(dir) => fs::read(dir.join(&asset.stored_path))
                .map_err(|e| CapsuleError::CorruptArtifact(format!("{}: {e}", asset.stored_path)))?,
            Source::Detached => {
                return Err(CapsuleError::CorruptArtifact(format!(
                    "{path}: capsule has no attached storage"
                )))
            }
        };
        if bytes.len() as u64 != asset.record.size || Digest::of(&bytes) != asset.record.digest {
            return Err(CapsuleError::CorruptArtifact(format!("{path}: digest mismatch")));
        }
        Ok(bytes)
    }
}

/// Captures the entry document, every asset's bytes, and a text index.
pub fn build_fallback_capsule(package: &SkillPackage) -> Result<FallbackCapsule, CapsuleError> {
    let mut bytes = BTreeMap::new();
    let mut assets = Vec::with_capacity(package.assets.len());
    for record in &package.assets {
        bytes.insert(record.path.clone(), package.read_asset(record)?);
        assets.push(CapsuleAsset {
            record: record.clone(),
            stored_path: stored_asset_path(&record.path),
        });
    }
    Ok(FallbackCapsule {
        capsule_id: package.package_hash.clone(),
        entry_document: package.entry_document.clone(),
        assets,
        text_index: lower_reference(package),
        package_identity: PackageIdentity {
            metadata: package.metadata.clone(),
            package_hash: package.package_hash.clone(),
        },
        source: Source::Memory(Arc::new(bytes)),
    })
}
