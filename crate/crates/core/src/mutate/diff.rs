//! Model responses: SEARCH/REPLACE hunks and fenced full rewrites.
//!
//! Hunk grammar:
//!
//! ```text
//! <<<<<<< SEARCH
//! exact text currently in the writable region
//! =======
//! replacement text
//! >>>>>>> REPLACE
//! ```
//!
//! Each search text must occur exactly once in the region at the moment the
//! hunk is applied. Hunks apply left to right.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::block::{BlockError, EvolveBlock};

const SEARCH: &str = "<<<<<<< SEARCH";
const DIVIDER: &str = "=======";
const REPLACE: &str = ">>>>>>> REPLACE";
const RATIONALE_LIMIT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MutationKind {
    Diff,
    FullRewrite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationResponse {
    pub kind: MutationKind,
    pub payload: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub search: String,
    pub replace: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiffError {
    #[error("unterminated SEARCH/REPLACE block starting at line {0}")]
    Unterminated(usize),
    #[error("empty search text in hunk {0}")]
    EmptySearch(usize),
    #[error("no SEARCH/REPLACE blocks found")]
    NoHunks,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("ambiguous or missing hunk: hunk {index} matched {matches} times")]
    Hunk { index: usize, matches: usize },
    #[error("{0}")]
    Diff(#[from] DiffError),
    #[error("edit would corrupt markers: {0}")]
    Block(#[from] BlockError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unparseable response: {reason}")]
pub struct UnparseableResponse {
    pub reason: String,
    pub raw: String,
}

fn is_marker(line: &str, marker: &str) -> bool {
    line.trim_end().trim_start() == marker
}

/// Extracts every SEARCH/REPLACE hunk from `text`; anything outside hunks
/// is ignored.
pub fn parse_hunks(text: &str) -> Result<Vec<Hunk>, DiffError> {
    enum State {
        Outside,
        Search(usize),
        Replace(usize),
    }
    let mut hunks = Vec::new();
    let mut state = State::Outside;
    let mut search: Vec<&str> = Vec::new();
    let mut replace: Vec<&str> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        state = match state {
            State::Outside if is_marker(raw, SEARCH) => {
                search.clear();
                replace.clear();
                State::Search(lineno + 1)
            }
            State::Outside => State::Outside,
            State::Search(start) if is_marker(raw, DIVIDER) => State::Replace(start),
            State::Search(start) => {
                search.push(raw);
                State::Search(start)
            }
            State::Replace(_) if is_marker(raw, REPLACE) => {
                if search.iter().all(|l| l.is_empty()) {
                    return Err(DiffError::EmptySearch(hunks.len()));
                }
                hunks.push(Hunk {
                    search: search.join("\n"),
                    replace: replace.join("\n"),
                });
                State::Outside
            }
            State::Replace(start) => {
                replace.push(raw);
                State::Replace(start)
            }
        };
    }
    match state {
        State::Outside if hunks.is_empty() => Err(DiffError::NoHunks),
        State::Outside => Ok(hunks),
        State::Search(start) | State::Replace(start) => Err(DiffError::Unterminated(start)),
    }
}

fn render_hunks(hunks: &[Hunk]) -> String {
    let mut out = String::new();
    for h in hunks {
        out.push_str(SEARCH);
        out.push('\n');
        out.push_str(&h.search);
        out.push('\n');
        out.push_str(DIVIDER);
        out.push('\n');
        if !h.replace.is_empty() {
            out.push_str(&h.replace);
            out.push('\n');
        }
        out.push_str(REPLACE);
        out.push('\n');
    }
    out
}

fn count_occurrences(haystack: &str, needle: &str) -> (usize, Option<usize>) {
    let mut count = 0;
    let mut first = None;
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let at = from + pos;
        count += 1;
        first.get_or_insert(at);
        // advance one char so overlapping matches are counted
        from = at + haystack[at..].chars().next().map_or(1, char::len_utf8);
        if from > haystack.len() {
            break;
        }
    }
    (count, first)
}

/// Applies hunks left to right; each search text must match exactly once.
pub fn apply_hunks(body: &str, hunks: &[Hunk]) -> Result<String, ApplyError> {
    let mut current = body.to_string();
    for (index, h) in hunks.iter().enumerate() {
        let (matches, first) = count_occurrences(&current, &h.search);
        match (matches, first) {
            (1, Some(at)) => {
                current.replace_range(at..at + h.search.len(), &h.replace);
            }
            _ => return Err(ApplyError::Hunk { index, matches }),
        }
    }
    Ok(current)
}

fn first_fenced_block(text: &str) -> Option<(usize, String)> {
    let mut lines = text.split_inclusive('\n');
    let mut offset = 0;
    let mut open_at = None;
    for line in lines.by_ref() {
        if line.trim_start().starts_with("```") {
            open_at = Some(offset);
            break;
        }
        offset += line.len();
    }
    let open_at = open_at?;
    let mut body = String::new();
    for line in lines {
        if line.trim_start().starts_with("```") {
            return Some((open_at, body));
        }
        body.push_str(line);
    }
    None
}

fn rationale_from(prelude: &str) -> String {
    let text = prelude
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("```"))
        .collect::<Vec<_>>()
        .join(" ");
    text.chars().take(RATIONALE_LIMIT).collect()
}

/// Classifies a raw model answer.
///
/// In diff mode, any SEARCH/REPLACE hunk makes the answer a diff. Otherwise
/// the first fenced code block is taken as a full rewrite of the region.
pub fn parse_response(raw: &str, diff_mode: bool) -> Result<MutationResponse, UnparseableResponse> {
    let unparseable = |reason: String| UnparseableResponse {
        reason,
        raw: raw.to_string(),
    };
    let mut search_at = None;
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        if is_marker(line, SEARCH) {
            search_at = Some(offset);
            break;
        }
        offset += line.len();
    }
    if let (true, Some(at)) = (diff_mode, search_at) {
        let hunks = parse_hunks(raw).map_err(|e| unparseable(e.to_string()))?;
        return Ok(MutationResponse {
            kind: MutationKind::Diff,
            payload: render_hunks(&hunks),
            rationale: rationale_from(&raw[..at]),
        });
    }
    match first_fenced_block(raw) {
        Some((at, code)) => Ok(MutationResponse {
            kind: MutationKind::FullRewrite,
            payload: code,
            rationale: rationale_from(&raw[..at]),
        }),
        None => Err(unparseable(
            "expected SEARCH/REPLACE blocks or a fenced code block".to_string(),
        )),
    }
}

/// Produces the new file text for `response` applied to the block body.
/// Bytes outside the body are never touched.
pub fn apply_mutation(
    block: &EvolveBlock,
    response: &MutationResponse,
) -> Result<String, ApplyError> {
    let new_body = match response.kind {
        MutationKind::FullRewrite => response.payload.clone(),
        MutationKind::Diff => apply_hunks(&block.body, &parse_hunks(&response.payload)?)?,
    };
    Ok(block.with_body(&new_body)?.reassemble())
}

/// One-line description of an edit, used when the model gave no rationale.
pub fn summarize(response: &MutationResponse) -> String {
    if !response.rationale.is_empty() {
        return response.rationale.clone();
    }
    match response.kind {
        MutationKind::FullRewrite => {
            format!("full rewrite ({} lines)", response.payload.lines().count())
        }
        MutationKind::Diff => {
            let hunks = parse_hunks(&response.payload).unwrap_or_default();
            let first = hunks
                .first()
                .map(|h| h.replace.lines().next().unwrap_or("").trim().to_string())
                .unwrap_or_default();
            format!("{} hunk(s): {}", hunks.len(), first)
        }
    }
}
