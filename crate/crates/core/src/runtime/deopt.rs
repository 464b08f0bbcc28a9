//! Deoptimization operators over the fallback capsule.

use crate::contract::{CapsuleError, FallbackCapsule};
use crate::lowering::SearchHit;
use crate::package::AssetRecord;

/// The capsule's asset records in canonical (byte-wise path) order.
pub fn list_skill_assets(capsule: &FallbackCapsule) -> Vec<AssetRecord> {
    let mut records: Vec<AssetRecord> = capsule.records().cloned().collect();
    records.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
    records
}

/// Exact original bytes, digest-verified before return.
pub fn get_skill_asset(capsule: &FallbackCapsule, path: &str) -> Result<Vec<u8>, CapsuleError> {
    capsule.read_asset(path)
}

/// Ranked chunks for `query`; at most `limit` hits, none for an empty query.
pub fn search_skill_docs(capsule: &FallbackCapsule, query: &str, limit: usize) -> Vec<SearchHit> {
    if limit == 0 {
        return Vec::new();
    }
    capsule.text_index.search(query, limit)
}
