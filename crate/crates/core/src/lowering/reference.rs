//! Heading-aligned chunking and an inverted term index.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::markdown::{self, LineKind};
use crate::package::SkillPackage;
use crate::provenance::{SourceDoc, SourceRef, MAX_QUOTE_BYTES};
use crate::terms::terms;

/// Largest chunk in bytes, unless a single line is longer.
pub const CHUNK_BUDGET: usize = 600;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub asset_path: SourceDoc,
    pub byte_start: usize,
    pub byte_end: usize,
    pub text: String,
    pub heading_path: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceIndex {
    pub chunks: Vec<Chunk>,
    pub term_index: BTreeMap<String, Vec<String>>,
    /// Assets that were not indexed (binary or undecodable).
    pub unindexed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub chunk_id: String,
    pub score: u64,
    pub text: String,
    pub provenance: SourceRef,
}

/// Splits a document into `(start, end, heading_path)` ranges: first at
/// headings, then at line boundaries so no chunk exceeds [`CHUNK_BUDGET`].
/// A single line longer than the budget is cut at a char boundary.
pub fn chunk_document(doc: &str) -> Vec<(usize, usize, Vec<String>)> {
    if doc.is_empty() {
        return Vec::new();
    }
    let scan = markdown::scan(doc);
    let mut cuts: Vec<(usize, Vec<String>)> = vec![(0, Vec::new())];
    let mut stack: Vec<(u8, String)> = Vec::new();
    for (i, kind) in scan.kinds.iter().enumerate() {
        if let LineKind::Heading(level) = *kind {
            while stack.last().is_some_and(|(l, _)| *l >= level) {
                stack.pop();
            }
            stack.push((level, markdown::heading_text(scan.lines[i].text).to_string()));
            let path: Vec<String> = stack.iter().map(|(_, t)| t.clone()).collect();
            let start = scan.lines[i].start;
            if start == 0 {
                cuts[0].1 = path;
            } else {
                cuts.push((start, path));
            }
        }
    }

    let mut out = Vec::new();
    for (k, (start, path)) in cuts.iter().enumerate() {
        let end = cuts.get(k + 1).map(|c| c.0).unwrap_or(doc.len());
        let mut s = *start;
        while end - s > CHUNK_BUDGET {
            let mut limit = s + CHUNK_BUDGET;
            while !doc.is_char_boundary(limit) {
                limit -= 1;
            }
            let cut = match doc[s..limit].rfind('\n') {
                Some(rel) => s + rel + 1,
                None => limit,
            };
            out.push((s, cut, path.clone()));
            s = cut;
        }
        if s < end {
            out.push((s, end, path.clone()));
        }
    }
    out
}

impl ReferenceIndex {
    /// Builds an index over documents in the given order.
    pub fn build(docs: &[(SourceDoc, String)], unindexed: Vec<String>) -> Self {
        let mut index = ReferenceIndex {
            unindexed,
            ..Default::default()
        };
        for (doc, text) in docs {
            for (start, end, heading_path) in chunk_document(text) {
                let chunk_id = format!("c{:05}", index.chunks.len() + 1);
                let body = &text[start..end];
                let unique: BTreeSet<String> = terms(body).collect();
                for t in unique {
                    index.term_index.entry(t).or_default().push(chunk_id.clone());
                }
                index.chunks.push(Chunk {
                    chunk_id,
                    asset_path: doc.clone(),
                    byte_start: start,
                    byte_end: end,
                    text: body.to_string(),
                    heading_path,
                });
            }
        }
        index
    }

    pub fn chunk(&self, id: &str) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.chunk_id == id)
    }

    /// Ranks chunks by summed term frequency of the query terms; ties go
    /// to the lower chunk id. An empty query yields nothing.
    pub fn search(&self, query: &str, limit: usize) -> Vec<SearchHit> {
        let qterms: BTreeSet<String> = terms(query).collect();
        if qterms.is_empty() || limit == 0 {
            return Vec::new();
        }
        let mut candidates = BTreeSet::new();
        for t in &qterms {
            if let Some(post) = self.term_index.get(t) {
                candidates.extend(post.iter().map(String::as_str));
            }
        }
        let mut scored: Vec<(u64, &Chunk)> = candidates
            .into_iter()
            .filter_map(|id| self.chunk(id))
            .map(|c| {
                let score = terms(&c.text).filter(|t| qterms.contains(t)).count() as u64;
                (score, c)
            })
            .filter(|(s, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.chunk_id.cmp(&b.1.chunk_id)));
        scored
            .into_iter()
            .take(limit)
            .map(|(score, c)| {
                let mut end = c.text.len().min(MAX_QUOTE_BYTES);
                while !c.text.is_char_boundary(end) {
                    end -= 1;
                }
                SearchHit {
                    chunk_id: c.chunk_id.clone(),
                    score,
                    text: c.text.clone(),
                    provenance: SourceRef {
                        asset_path: c.asset_path.clone(),
                        byte_start: c.byte_start,
                        byte_end: c.byte_start + end,
                        quote: c.text[..end].to_string(),
                    },
                }
            })
            .collect()
    }
}

/// Indexes the entry document and every text asset.
pub fn lower_reference(package: &SkillPackage) -> ReferenceIndex {
    let texts = package.text_documents();
    let indexed: BTreeSet<&str> = texts.iter().map(|(p, _)| p.as_str()).collect();
    let unindexed = package
        .assets
        .iter()
        .filter(|a| !indexed.contains(a.path.as_str()))
        .map(|a| a.path.clone())
        .collect();
    let mut docs = vec![(SourceDoc::Entry, package.entry_document.clone())];
    docs.extend(texts.into_iter().map(|(p, t)| (SourceDoc::Asset(p), t)));
    ReferenceIndex::build(&docs, unindexed)
}
