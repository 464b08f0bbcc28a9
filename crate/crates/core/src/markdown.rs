//! Line-level markdown scanner.
//!
//! Only the structure the compiler needs is recognized: frontmatter, ATX
//! headings, fenced blocks, ordered-list items (with their attached
//! continuation lines and fences), table rows and display-math delimiters.
//! Every element keeps its byte range in the source so provenance can point
//! back at exact spans.

use crate::package::frontmatter_span;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Line<'a> {
    /// Line text without the trailing newline.
    pub text: &'a str,
    pub start: usize,
    /// Offset just past the trailing newline (or end of document).
    pub end: usize,
}

impl Line<'_> {
    pub fn content_end(&self) -> usize {
        self.start + self.text.len()
    }

    pub fn is_blank(&self) -> bool {
        self.text.trim().is_empty()
    }

    pub fn is_indented(&self) -> bool {
        self.text.starts_with(' ') || self.text.starts_with('\t')
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineKind {
    Frontmatter,
    FenceOpen(usize),
    FenceBody(usize),
    FenceClose(usize),
    Heading(u8),
    OrderedItem(u64),
    Bullet,
    TableRow,
    MathDelimiter,
    MathBody,
    Blank,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fence<'a> {
    /// Lowercased first word of the info string.
    pub lang: String,
    pub open_line: usize,
    /// Index of the closing line; `None` when the fence runs to the end.
    pub close_line: Option<usize>,
    pub body: &'a str,
    pub body_start: usize,
    /// Byte range of the whole block, delimiters included.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListItem<'a> {
    pub number: u64,
    pub line: usize,
    /// Text after the list marker on the item line.
    pub text: &'a str,
    pub text_start: usize,
    pub continuation: Vec<usize>,
    pub fences: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderedList<'a> {
    pub items: Vec<ListItem<'a>>,
}

#[derive(Debug, Clone)]
pub struct Scan<'a> {
    pub doc: &'a str,
    pub lines: Vec<Line<'a>>,
    pub kinds: Vec<LineKind>,
    pub fences: Vec<Fence<'a>>,
    pub lists: Vec<OrderedList<'a>>,
}

pub fn split_lines(doc: &str) -> Vec<Line<'_>> {
    let mut lines = Vec::new();
    let mut start = 0;
    while start < doc.len() {
        let end = doc[start..]
            .find('\n')
            .map(|i| start + i + 1)
            .unwrap_or(doc.len());
        let mut text = &doc[start..end];
        text = text.strip_suffix('\n').unwrap_or(text);
        text = text.strip_suffix('\r').unwrap_or(text);
        lines.push(Line { text, start, end });
        start = end;
    }
    lines
}

fn fence_marker(text: &str) -> Option<(char, usize, &str)> {
    let t = text.trim_start();
    let c = t.chars().next()?;
    if c != '`' && c != '~' {
        return None;
    }
    let n = t.chars().take_while(|&x| x == c).count();
    if n < 3 {
        return None;
    }
    let info = &t[n..];
    if c == '`' && info.contains('`') {
        return None;
    }
    Some((c, n, info.trim()))
}

pub fn heading_level(text: &str) -> Option<u8> {
    let lead = text.len() - text.trim_start_matches(' ').len();
    if lead > 3 {
        return None;
    }
    let t = &text[lead..];
    let hashes = t.chars().take_while(|&c| c == '#').count();
    if hashes == 0 || hashes > 6 {
        return None;
    }
    let rest = &t[hashes..];
    (rest.is_empty() || rest.starts_with(' ') || rest.starts_with('\t')).then_some(hashes as u8)
}

/// Heading text without the `#` marker.
pub fn heading_text(text: &str) -> &str {
    text.trim_start().trim_start_matches('#').trim().trim_end_matches('#').trim()
}

/// Parses `N. ` / `N) ` list markers (up to three leading spaces).
/// Returns the item number and the byte offset of the item text.
pub fn ordered_marker(text: &str) -> Option<(u64, usize)> {
    let lead = text.len() - text.trim_start_matches(' ').len();
    if lead > 3 {
        return None;
    }
    let t = &text[lead..];
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || digits > 9 {
        return None;
    }
    let rest = &t[digits..];
    let mut chars = rest.chars();
    match (chars.next(), chars.next()) {
        (Some('.') | Some(')'), Some(' ') | Some('\t')) => {
            let number = t[..digits].parse().ok()?;
            Some((number, lead + digits + 2))
        }
        _ => None,
    }
}

fn is_bullet(text: &str) -> bool {
    let t = text.trim_start();
    (t.starts_with("- ") || t.starts_with("* ") || t.starts_with("+ ")) && !t.starts_with("---")
}

pub fn scan(doc: &str) -> Scan<'_> {
    let lines = split_lines(doc);
    let mut kinds = vec![LineKind::Text; lines.len()];
    let mut fences: Vec<Fence<'_>> = Vec::new();

    let mut i = 0;
    if let Some((fm_end, _)) = frontmatter_span(doc) {
        while i < lines.len() && lines[i].start < fm_end {
            kinds[i] = LineKind::Frontmatter;
            i += 1;
        }
    }

    while i < lines.len() {
        let line = lines[i];
        if let Some((c, n, info)) = fence_marker(line.text) {
            let idx = fences.len();
            kinds[i] = LineKind::FenceOpen(idx);
            let mut close = None;
            let mut j = i + 1;
            while j < lines.len() {
                if let Some((c2, n2, info2)) = fence_marker(lines[j].text) {
                    if c2 == c && n2 >= n && info2.is_empty() {
                        close = Some(j);
                        break;
                    }
                }
                kinds[j] = LineKind::FenceBody(idx);
                j += 1;
            }
            let body_start = line.end;
            let body_end = match close {
                Some(c) => lines[c].start,
                None => doc.len(),
            };
            let end = match close {
                Some(c) => {
                    kinds[c] = LineKind::FenceClose(idx);
                    lines[c].end
                }
                None => doc.len(),
            };
            fences.push(Fence {
                lang: info
                    .split_whitespace()
                    .next()
                    .unwrap_or("")
                    .trim_start_matches('{')
                    .trim_end_matches('}')
                    .to_ascii_lowercase(),
                open_line: i,
                close_line: close,
                body: &doc[body_start..body_end.max(body_start)],
                body_start,
                start: line.start,
                end,
            });
            i = close.map(|c| c + 1).unwrap_or(lines.len());
            continue;
        }
        kinds[i] = if line.is_blank() {
            LineKind::Blank
        } else if let Some(level) = heading_level(line.text) {
            LineKind::Heading(level)
        } else if let Some((n, _)) = ordered_marker(line.text) {
            LineKind::OrderedItem(n)
        } else if line.text.trim_start().starts_with('|') {
            LineKind::TableRow
        } else if line.text.trim_start().starts_with("$$") {
            LineKind::MathDelimiter
        } else if is_bullet(line.text) {
            LineKind::Bullet
        } else {
            LineKind::Text
        };
        i += 1;
    }

    mark_math_blocks(&lines, &mut kinds);
    let lists = group_lists(&lines, &kinds, &fences);
    Scan {
        doc,
        lines,
        kinds,
        fences,
        lists,
    }
}

/// Lines between an opening and closing `$$` belong to the math block.
fn mark_math_blocks(lines: &[Line<'_>], kinds: &mut [LineKind]) {
    let mut open = false;
    for (line, kind) in lines.iter().zip(kinds.iter_mut()) {
        match kind {
            LineKind::MathDelimiter => {
                let t = line.text.trim();
                let inline = t.len() > 4 && t.ends_with("$$");
                if !inline {
                    open = !open;
                }
            }
            LineKind::FenceOpen(_) | LineKind::FenceBody(_) | LineKind::FenceClose(_) | LineKind::Frontmatter => {}
            _ if open => *kind = LineKind::MathBody,
            _ => {}
        }
    }
}

/// Groups ordered items into maximal lists. An item absorbs blank lines,
/// indented lines, lazy continuation text and fenced blocks until the next
/// item, heading, table, or an unindented paragraph after a blank line.
/// A marker numbered `1` after earlier items starts a new list.
fn group_lists<'a>(lines: &[Line<'a>], kinds: &[LineKind], fences: &[Fence<'a>]) -> Vec<OrderedList<'a>> {
    let mut lists: Vec<OrderedList<'a>> = Vec::new();
    let mut current: Option<OrderedList<'a>> = None;
    let mut prev_blank = false;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        match kinds[i] {
            LineKind::OrderedItem(n) => {
                if let Some(list) = current.as_ref() {
                    if n == 1 && !list.items.is_empty() {
                        lists.extend(current.take());
                    }
                }
                let (_, offset) = ordered_marker(line.text).expect("classified as ordered item");
                let item = ListItem {
                    number: n,
                    line: i,
                    text: line.text[offset..].trim_end(),
                    text_start: line.start + offset,
                    continuation: Vec::new(),
                    fences: Vec::new(),
                };
                current.get_or_insert_with(|| OrderedList { items: Vec::new() }).items.push(item);
                prev_blank = false;
            }
            LineKind::Blank => prev_blank = true,
            LineKind::FenceOpen(f) => {
                if let Some(list) = current.as_mut() {
                    list.items.last_mut().expect("list has items").fences.push(f);
                }
                i = fences[f].close_line.map(|c| c + 1).unwrap_or(lines.len());
                prev_blank = false;
                continue;
            }
            LineKind::Text | LineKind::Bullet | LineKind::MathDelimiter => {
                if let Some(list) = current.as_mut() {
                    if line.is_indented() || !prev_blank {
                        list.items.last_mut().expect("list has items").continuation.push(i);
                    } else {
                        lists.extend(current.take());
                    }
                }
                prev_blank = false;
            }
            _ => {
                lists.extend(current.take());
                prev_blank = false;
            }
        }
        i += 1;
    }
    lists.extend(current);
    lists
}

impl<'a> Scan<'a> {
    pub fn headings(&self) -> impl Iterator<Item = (usize, u8, &'a str)> + '_ {
        self.kinds.iter().enumerate().filter_map(|(i, k)| match k {
            LineKind::Heading(level) => Some((i, *level, heading_text(self.lines[i].text))),
            _ => None,
        })
    }

    /// Nearest heading text at or above line `idx`.
    pub fn heading_above(&self, idx: usize) -> Option<&'a str> {
        (0..=idx.min(self.lines.len().saturating_sub(1)))
            .rev()
            .find_map(|i| match self.kinds[i] {
                LineKind::Heading(_) => Some(heading_text(self.lines[i].text)),
                _ => None,
            })
    }

    /// Full text of a list item: the item line plus continuation lines.
    pub fn item_text(&self, item: &ListItem<'a>) -> String {
        let mut text = item.text.to_string();
        for &c in &item.continuation {
            text.push(' ');
            text.push_str(self.lines[c].text.trim());
        }
        text
    }
}

/// Backtick code spans with their byte offsets relative to `text`.
pub fn code_spans(text: &str) -> Vec<(usize, &str)> {
    let mut spans = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'`' {
            let ticks = bytes[i..].iter().take_while(|&&b| b == b'`').count();
            let open_end = i + ticks;
            let delim = &text[i..open_end];
            if let Some(rel) = text[open_end..].find(delim) {
                let close = open_end + rel;
                let inner = &text[open_end..close];
                if !inner.trim().is_empty() {
                    spans.push((open_end, inner.trim()));
                }
                i = close + ticks;
                continue;
            }
            i = open_end;
            continue;
        }
        i += 1;
    }
    spans
}
