//! Byte-exact references back into package text.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Longest quote kept in a [`SourceRef`].
pub const MAX_QUOTE_BYTES: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDoc {
    Entry,
    Asset(String),
}

impl fmt::Display for SourceDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceDoc::Entry => f.write_str("ENTRY"),
            SourceDoc::Asset(p) => f.write_str(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceRef {
    pub asset_path: SourceDoc,
    pub byte_start: usize,
    pub byte_end: usize,
    pub quote: String,
}

impl SourceRef {
    /// References `text[start..end]`, shrunk to at most [`MAX_QUOTE_BYTES`]
    /// and to char boundaries. Returns `None` for empty ranges.
    pub fn capture(doc: SourceDoc, text: &str, start: usize, end: usize) -> Option<SourceRef> {
        let mut start = start.min(text.len());
        while !text.is_char_boundary(start) {
            start -= 1;
        }
        let mut end = end.min(text.len()).min(start + MAX_QUOTE_BYTES);
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        // Trim trailing line breaks so quotes stay on one logical span.
        while end > start && matches!(text.as_bytes()[end - 1], b'\n' | b'\r') {
            end -= 1;
        }
        (start < end).then(|| SourceRef {
            asset_path: doc,
            byte_start: start,
            byte_end: end,
            quote: text[start..end].to_string(),
        })
    }

    /// True when the quote equals the referenced bytes of `text`.
    pub fn matches(&self, text: &str) -> bool {
        self.byte_start < self.byte_end
            && text.get(self.byte_start..self.byte_end) == Some(self.quote.as_str())
    }
}

/// The package text a judge may cite: entry document plus text assets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Grounding {
    docs: Vec<(SourceDoc, String)>,
}

impl Grounding {
    pub fn new(entry: &str, assets: Vec<(String, String)>) -> Self {
        let mut docs = vec![(SourceDoc::Entry, entry.to_string())];
        docs.extend(assets.into_iter().map(|(p, t)| (SourceDoc::Asset(p), t)));
        Grounding { docs }
    }

    pub fn entry(&self) -> &str {
        self.docs
            .iter()
            .find(|(d, _)| *d == SourceDoc::Entry)
            .map(|(_, t)| t.as_str())
            .unwrap_or("")
    }

    pub fn text(&self, doc: &SourceDoc) -> Option<&str> {
        self.docs.iter().find(|(d, _)| d == doc).map(|(_, t)| t.as_str())
    }

    /// Whether `span` occurs verbatim somewhere in the package text.
    pub fn contains(&self, span: &str) -> bool {
        !span.is_empty() && self.docs.iter().any(|(_, t)| t.contains(span))
    }

    /// First occurrence of `span`, as a reference.
    pub fn locate(&self, span: &str) -> Option<SourceRef> {
        if span.is_empty() {
            return None;
        }
        self.docs.iter().find_map(|(doc, text)| {
            let at = text.find(span)?;
            SourceRef::capture(doc.clone(), text, at, at + span.len())
        })
    }

    pub fn verify(&self, r: &SourceRef) -> bool {
        self.text(&r.asset_path).is_some_and(|t| r.matches(t))
    }
}
