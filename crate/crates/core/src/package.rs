//! Skill packages as compilation inputs.
//!
//! A package is a directory holding an entry `SKILL.md` plus bundled assets.
//! Loading records every asset (path, inferred type, size, digest) in
//! canonical order and derives the package hash that keys every compiled
//! artifact. The hash is taken over a line-oriented manifest encoding:
//!
//! ```text
//! ENTRY\n<entry byte length>\n<entry bytes>\n
//! ASSET\n<path>\n<asset type>\n<size>\n<digest hex>\n   (once per asset)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::digest::{Digest, DigestWriter};

pub const ENTRY_FILE_NAME: &str = "SKILL.md";

/// Directory segments never treated as package content.
const EXCLUDED_NAMES: &[&str] = &[".git", ".DS_Store", ".skillc_store", ".skillc_state"];

/// Upper bound on sanitized identifiers so handles stay compact.
const MAX_NAME_BYTES: usize = 64;

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("no SKILL.md entry document found under {0}")]
    MissingEntryDocument(PathBuf),
    #[error("unreadable asset `{path}`: {reason}")]
    UnreadableAsset { path: String, reason: String },
    #[error("path `{0}` resolves outside the package root")]
    PathEscape(String),
    #[error("entry document is not valid UTF-8")]
    EntryNotUtf8,
    #[error("asset records are not in canonical order at `{0}`")]
    UnsortedAssets(String),
    #[error("asset `{path}` changed on disk since the package was loaded")]
    AssetChanged { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetType {
    Script,
    Template,
    Config,
    Data,
    Document,
    Binary,
    Other,
}

impl AssetType {
    pub fn as_str(self) -> &'static str {
        match self {
            AssetType::Script => "script",
            AssetType::Template => "template",
            AssetType::Config => "config",
            AssetType::Data => "data",
            AssetType::Document => "document",
            AssetType::Binary => "binary",
            AssetType::Other => "other",
        }
    }
}

impl fmt::Display for AssetType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetRecord {
    /// Package-relative, forward-slash separated.
    pub path: String,
    pub asset_type: AssetType,
    pub size: u64,
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageMetadata {
    pub name: String,
    pub description: String,
    pub declared_version: String,
    pub source_root: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillPackage {
    pub entry_document: String,
    /// File name the entry was found under (case may differ from `SKILL.md`).
    pub entry_file_name: String,
    pub assets: Vec<AssetRecord>,
    pub metadata: PackageMetadata,
    pub package_hash: Digest,
}

impl SkillPackage {
    pub fn asset(&self, path: &str) -> Option<&AssetRecord> {
        self.assets
            .binary_search_by(|a| a.path.as_bytes().cmp(path.as_bytes()))
            .ok()
            .map(|i| &self.assets[i])
    }

    pub fn source_root(&self) -> &Path {
        Path::new(&self.metadata.source_root)
    }

    /// Reads an asset's bytes from the source tree, verifying them against
    /// the digest recorded at load time.
    pub fn read_asset(&self, record: &AssetRecord) -> Result<Vec<u8>, PackageError> {
        let full = self.source_root().join(&record.path);
        let bytes = fs::read(&full).map_err(|e| PackageError::UnreadableAsset {
            path: record.path.clone(),
            reason: e.to_string(),
        })?;
        if Digest::of(&bytes) != record.digest {
            return Err(PackageError::AssetChanged {
                path: record.path.clone(),
            });
        }
        Ok(bytes)
    }

    /// Entry document plus every asset that decodes as text.
    pub fn text_documents(&self) -> Vec<(String, String)> {
        let mut docs = Vec::new();
        for record in &self.assets {
            if record.asset_type == AssetType::Binary {
                continue;
            }
            if let Ok(bytes) = self.read_asset(record) {
                if let Some(text) = decode_text(&bytes) {
                    docs.push((record.path.clone(), text));
                }
            }
        }
        docs
    }
}

/// Tool the compiled artifact may rely on at runtime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub arguments: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentFingerprint {
    pub platform: String,
    pub capabilities: BTreeMap<String, String>,
}

impl EnvironmentFingerprint {
    pub fn current() -> Self {
        let mut capabilities = BTreeMap::new();
        capabilities.insert("arch".to_string(), std::env::consts::ARCH.to_string());
        capabilities.insert("family".to_string(), std::env::consts::FAMILY.to_string());
        EnvironmentFingerprint {
            platform: std::env::consts::OS.to_string(),
            capabilities,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompilePolicy {
    pub sandbox_required: bool,
    pub cache_reuse: bool,
    pub task_bound_adaptation: bool,
}

impl Default for CompilePolicy {
    fn default() -> Self {
        CompilePolicy {
            sandbox_required: true,
            cache_reuse: true,
            task_bound_adaptation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompilationInput {
    pub package: SkillPackage,
    pub tool_interface: Vec<ToolDescriptor>,
    pub environment: EnvironmentFingerprint,
    pub policy: CompilePolicy,
}

impl CompilationInput {
    pub fn new(package: SkillPackage) -> Self {
        CompilationInput {
            package,
            tool_interface: Vec::new(),
            environment: EnvironmentFingerprint::current(),
            policy: CompilePolicy::default(),
        }
    }

    /// Adds a tool descriptor; names must stay unique.
    pub fn with_tool(mut self, tool: ToolDescriptor) -> Result<Self, String> {
        if self.tool_interface.iter().any(|t| t.name == tool.name) {
            return Err(format!("duplicate tool `{}`", tool.name));
        }
        self.tool_interface.push(tool);
        Ok(self)
    }
}

/// Loads the package rooted at `root`.
pub fn load_package(root: &Path) -> Result<SkillPackage, PackageError> {
    let root = root
        .canonicalize()
        .map_err(|_| PackageError::MissingEntryDocument(root.to_path_buf()))?;
    if !root.is_dir() {
        return Err(PackageError::MissingEntryDocument(root));
    }
    let entry_file_name = find_entry(&root)?;
    let entry_bytes =
        fs::read(root.join(&entry_file_name)).map_err(|e| PackageError::UnreadableAsset {
            path: entry_file_name.clone(),
            reason: e.to_string(),
        })?;
    let entry_document = String::from_utf8(entry_bytes).map_err(|_| PackageError::EntryNotUtf8)?;

    let mut assets = Vec::new();
    let walker = WalkDir::new(&root)
        .follow_links(false)
        .min_depth(1)
        .into_iter()
        .filter_entry(|e| !is_excluded(e.file_name().to_str().unwrap_or("")));
    for entry in walker {
        let entry = entry.map_err(|e| PackageError::UnreadableAsset {
            path: e
                .path()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            reason: e.to_string(),
        })?;
        let rel = relative_path(&root, entry.path())?;
        if rel == entry_file_name {
            continue;
        }
        let file_type = entry.file_type();
        let target = if file_type.is_symlink() {
            let resolved = entry
                .path()
                .canonicalize()
                .map_err(|_| PackageError::PathEscape(rel.clone()))?;
            if !resolved.starts_with(&root) || resolved == root {
                return Err(PackageError::PathEscape(rel));
            }
            if !resolved.is_file() {
                continue;
            }
            resolved
        } else if file_type.is_file() {
            entry.path().to_path_buf()
        } else {
            continue;
        };
        let bytes = fs::read(&target).map_err(|e| PackageError::UnreadableAsset {
            path: rel.clone(),
            reason: e.to_string(),
        })?;
        let head = &bytes[..bytes.len().min(512)];
        assets.push(AssetRecord {
            asset_type: infer_asset_type(&rel, head),
            size: bytes.len() as u64,
            digest: Digest::of(&bytes),
            path: rel,
        });
    }
    assets.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));

    let package_hash = canonical_package_hash(entry_document.as_bytes(), &assets)?;
    let metadata = extract_metadata(&entry_document, &root);
    Ok(SkillPackage {
        entry_document,
        entry_file_name,
        assets,
        metadata,
        package_hash,
    })
}

fn find_entry(root: &Path) -> Result<String, PackageError> {
    if root.join(ENTRY_FILE_NAME).is_file() {
        return Ok(ENTRY_FILE_NAME.to_string());
    }
    let mut candidates: Vec<String> = fs::read_dir(root)
        .map_err(|_| PackageError::MissingEntryDocument(root.to_path_buf()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter(|n| n.eq_ignore_ascii_case(ENTRY_FILE_NAME))
        .collect();
    candidates.sort();
    candidates
        .into_iter()
        .next()
        .ok_or_else(|| PackageError::MissingEntryDocument(root.to_path_buf()))
}

fn is_excluded(name: &str) -> bool {
    EXCLUDED_NAMES.contains(&name) || name.starts_with("._")
}

fn relative_path(root: &Path, path: &Path) -> Result<String, PackageError> {
    let rel = path
        .strip_prefix(root)
        .map_err(|_| PackageError::PathEscape(path.display().to_string()))?;
    let mut parts = Vec::new();
    for component in rel.components() {
        match component {
            Component::Normal(seg) => match seg.to_str() {
                Some(s) => parts.push(s),
                None => {
                    return Err(PackageError::UnreadableAsset {
                        path: rel.display().to_string(),
                        reason: "path is not valid UTF-8".to_string(),
                    })
                }
            },
            _ => return Err(PackageError::PathEscape(rel.display().to_string())),
        }
    }
    Ok(parts.join("/"))
}

/// True when `path` is a safe package-relative path: no `..`, no absolute
/// prefix, no empty segments.
pub fn is_safe_relative_path(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\\')
        && path.split('/').all(|s| !s.is_empty() && s != "." && s != "..")
}

/// Classifies an asset from its path and leading bytes.
pub fn infer_asset_type(path: &str, head: &[u8]) -> AssetType {
    let file_name = path.rsplit('/').next().unwrap_or(path);
    let ext = file_name
        .rsplit_once('.')
        .filter(|(stem, _)| !stem.is_empty())
        .map(|(_, ext)| ext.to_ascii_lowercase());
    if let Some(ext) = ext.as_deref() {
        match ext {
            "py" | "sh" | "rb" | "js" => return AssetType::Script,
            "docx" | "pptx" | "xlsx" | "tmpl" | "jinja" => return AssetType::Template,
            "json" | "yaml" | "yml" | "toml" | "ini" => return AssetType::Config,
            "csv" | "npy" | "parquet" => return AssetType::Data,
            "md" | "txt" | "rst" | "pdf" => return AssetType::Document,
            _ => {}
        }
    }
    if head.starts_with(b"#!") {
        return AssetType::Script;
    }
    const MAGIC: &[&[u8]] = &[
        b"\x89PNG",
        b"\xff\xd8\xff",
        b"GIF8",
        b"PK\x03\x04",
        b"\x7fELF",
        b"\x1f\x8b",
        b"%PDF",
        b"\x00asm",
        b"BZh",
        b"\xfd7zXZ",
    ];
    if MAGIC.iter().any(|m| head.starts_with(m)) {
        return AssetType::Binary;
    }
    AssetType::Other
}

/// Hashes the canonical manifest encoding of an entry document and its
/// asset records. Records must be strictly ascending by path bytes.
pub fn canonical_package_hash(entry: &[u8], assets: &[AssetRecord]) -> Result<Digest, PackageError> {
    for pair in assets.windows(2) {
        if pair[0].path.as_bytes() >= pair[1].path.as_bytes() {
            return Err(PackageError::UnsortedAssets(pair[1].path.clone()));
        }
    }
    let mut w = DigestWriter::new();
    w.update(b"ENTRY\n");
    w.update(entry.len().to_string().as_bytes());
    w.update(b"\n");
    w.update(entry);
    w.update(b"\n");
    for a in assets {
        w.update(b"ASSET\n");
        w.update(a.path.as_bytes());
        w.update(b"\n");
        w.update(a.asset_type.as_str().as_bytes());
        w.update(b"\n");
        w.update(a.size.to_string().as_bytes());
        w.update(b"\n");
        w.update(a.digest.as_str().as_bytes());
        w.update(b"\n");
    }
    Ok(w.finish())
}

/// Lowercase, non-alphanumerics to `_`, repeats collapsed, trimmed.
/// Empty results become `skill`.
pub fn sanitize_name(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for c in raw.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    let mut name = out.trim_matches('_').to_string();
    if name.len() > MAX_NAME_BYTES {
        name.truncate(MAX_NAME_BYTES);
        name = name.trim_end_matches('_').to_string();
    }
    if name.is_empty() {
        "skill".to_string()
    } else {
        name
    }
}

/// Byte length of a leading `---` frontmatter block, including both fences.
pub fn frontmatter_span(entry: &str) -> Option<(usize, &str)> {
    let first_end = entry.find('\n')?;
    if entry[..first_end].trim_end() != "---" {
        return None;
    }
    let mut offset = first_end + 1;
    while offset < entry.len() {
        let line_end = entry[offset..]
            .find('\n')
            .map(|i| offset + i + 1)
            .unwrap_or(entry.len());
        if entry[offset..line_end].trim_end() == "---" {
            return Some((line_end, &entry[first_end + 1..offset]));
        }
        offset = line_end;
    }
    None
}

fn extract_metadata(entry: &str, root: &Path) -> PackageMetadata {
    let mut name = None;
    let mut description = String::new();
    let mut declared_version = String::new();
    if let Some((_, body)) = frontmatter_span(entry) {
        for line in body.lines() {
            let Some((key, value)) = line.split_once(':') else {
                continue;
            };
            let value = unquote(value.trim());
            match key.trim() {
                "name" => name = Some(value),
                "description" => description = value,
                "version" => declared_version = value,
                _ => {}
            }
        }
    }
    let raw_name = name.unwrap_or_else(|| {
        root.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("")
            .to_string()
    });
    PackageMetadata {
        name: sanitize_name(&raw_name),
        description,
        declared_version,
        source_root: root.display().to_string(),
    }
}

fn unquote(value: &str) -> String {
    let v = value.trim();
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return v[1..v.len() - 1].to_string();
        }
    }
    v.to_string()
}

/// Decodes bytes as text when they are UTF-8 without NUL bytes.
pub fn decode_text(bytes: &[u8]) -> Option<String> {
    if bytes.contains(&0) {
        return None;
    }
    String::from_utf8(bytes.to_vec()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(path: &str, bytes: &[u8], ty: AssetType) -> AssetRecord {
        AssetRecord {
            path: path.to_string(),
            asset_type: ty,
            size: bytes.len() as u64,
            digest: Digest::of(bytes),
        }
    }

    #[test]
    fn asset_type_table() {
        assert_eq!(infer_asset_type("scripts/run.py", b""), AssetType::Script);
        assert_eq!(infer_asset_type("template.docx", b"PK\x03\x04"), AssetType::Template);
        assert_eq!(infer_asset_type("bin/tool", b"#!/bin/sh\n"), AssetType::Script);
        assert_eq!(infer_asset_type("conf.YAML", b""), AssetType::Config);
        assert_eq!(infer_asset_type("data/x.csv", b""), AssetType::Data);
        assert_eq!(infer_asset_type("notes.txt", b""), AssetType::Document);
        assert_eq!(infer_asset_type("logo.png", b"\x89PNG\r\n"), AssetType::Binary);
        assert_eq!(infer_asset_type("blob", b"\x7fELF"), AssetType::Binary);
        assert_eq!(infer_asset_type("LICENSE", b"MIT"), AssetType::Other);
        assert_eq!(infer_asset_type(".env", b"A=1"), AssetType::Other);
    }

    #[test]
    fn empty_manifest_hash_matches_oracle() {
        // sha256(b"ENTRY\n0\n\n") computed with Python hashlib.
        assert_eq!(
            canonical_package_hash(b"", &[]).unwrap().as_str(),
            "048a15e251eae7d717e75303a1436dfe0cda67d64f0594f8eb8c307e8e627fae"
        );
    }

    #[test]
    fn one_asset_manifest_hash_matches_oracle() {
        let assets = vec![record("scripts/run.sh", b"echo hi\n", AssetType::Script)];
        assert_eq!(
            canonical_package_hash(b"# Demo\n", &assets).unwrap().as_str(),
            "7b4eba68a9c69746e8336ba3b86499e28f30938136361a211d8f8a8c1e045edb"
        );
        let flipped = vec![record("scripts/run.sh", b"echo hj\n", AssetType::Script)];
        assert_eq!(
            canonical_package_hash(b"# Demo\n", &flipped).unwrap().as_str(),
            "b29d168e53d9d2e9d3a46400b3de3c20984140e2104c40279a5ccb83a8a211d4"
        );
    }

    #[test]
    fn unsorted_assets_rejected() {
        let assets = vec![
            record("b", b"", AssetType::Other),
            record("a", b"", AssetType::Other),
        ];
        assert!(matches!(
            canonical_package_hash(b"", &assets),
            Err(PackageError::UnsortedAssets(p)) if p == "a"
        ));
    }

    #[test]
    fn sanitize_rules() {
        assert_eq!(sanitize_name("Mesh Analysis!"), "mesh_analysis");
        assert_eq!(sanitize_name("pptx"), "pptx");
        assert_eq!(sanitize_name("--a--b--"), "a_b");
        assert_eq!(sanitize_name("!!!"), "skill");
        assert!(sanitize_name(&"x".repeat(500)).len() <= MAX_NAME_BYTES);
    }

    #[test]
    fn frontmatter_is_parsed() {
        let entry = "---\nname: \"Offer Letter\"\ndescription: Fill templates\nversion: 1.2\n---\n# Body\n";
        let meta = extract_metadata(entry, Path::new("/tmp/whatever"));
        assert_eq!(meta.name, "offer_letter");
        assert_eq!(meta.description, "Fill templates");
        assert_eq!(meta.declared_version, "1.2");
        assert_eq!(frontmatter_span(entry).unwrap().0, entry.find("# Body").unwrap());
    }

    #[test]
    fn safe_paths() {
        assert!(is_safe_relative_path("a/b.txt"));
        assert!(!is_safe_relative_path("../a"));
        assert!(!is_safe_relative_path("/etc/passwd"));
        assert!(!is_safe_relative_path("a//b"));
    }
}
