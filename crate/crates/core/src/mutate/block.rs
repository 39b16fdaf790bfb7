//! `EVOLVE-BLOCK` marker handling.
//!
//! A source file carries exactly one editable region:
//!
//! ```text
//! // EVOLVE-BLOCK-START
//! ...editable...
//! // EVOLVE-BLOCK-END
//! ```
//!
//! Everything outside the region, marker lines included, is kept verbatim.

use thiserror::Error;

pub const START_MARKER: &str = "EVOLVE-BLOCK-START";
pub const END_MARKER: &str = "EVOLVE-BLOCK-END";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("no evolve block")]
    NoBlock,
    #[error("multiple evolve blocks")]
    MultipleBlocks,
    #[error("malformed markers")]
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvolveBlock {
    pub prefix: String,
    /// Full START marker line, including its line terminator.
    pub start_marker: String,
    pub body: String,
    /// Full END marker line, including its terminator when present.
    pub end_marker: String,
    pub suffix: String,
}

impl EvolveBlock {
    pub fn parse(source: &str) -> Result<Self, BlockError> {
        let mut starts = Vec::new();
        let mut ends = Vec::new();
        let mut offset = 0;
        for line in source.split_inclusive('\n') {
            if line.contains(START_MARKER) {
                starts.push((offset, line.len()));
            } else if line.contains(END_MARKER) {
                ends.push((offset, line.len()));
            }
            offset += line.len();
        }
        let ((s_at, s_len), (e_at, e_len)) = match (starts.as_slice(), ends.as_slice()) {
            ([], []) => return Err(BlockError::NoBlock),
            ([s], [e]) => (*s, *e),
            (s, e) if s.len() > 1 || e.len() > 1 => return Err(BlockError::MultipleBlocks),
            _ => return Err(BlockError::Malformed),
        };
        if e_at < s_at {
            return Err(BlockError::Malformed);
        }
        Ok(Self {
            prefix: source[..s_at].to_string(),
            start_marker: source[s_at..s_at + s_len].to_string(),
            body: source[s_at + s_len..e_at].to_string(),
            end_marker: source[e_at..e_at + e_len].to_string(),
            suffix: source[e_at + e_len..].to_string(),
        })
    }

    pub fn reassemble(&self) -> String {
        let mut out = String::with_capacity(
            self.prefix.len()
                + self.start_marker.len()
                + self.body.len()
                + self.end_marker.len()
                + self.suffix.len(),
        );
        out.push_str(&self.prefix);
        out.push_str(&self.start_marker);
        out.push_str(&self.body);
        out.push_str(&self.end_marker);
        out.push_str(&self.suffix);
        out
    }

    /// Text outside the editable region, markers excluded.
    pub fn frozen_text(&self) -> String {
        format!("{}{}", self.prefix, self.suffix)
    }

    /// Same file with a different editable body.
    ///
    /// A non-empty body always ends in a newline so the END marker stays on
    /// its own line. Bodies that contain marker text are rejected.
    pub fn with_body(&self, body: &str) -> Result<Self, BlockError> {
        if body.contains(START_MARKER) || body.contains(END_MARKER) {
            return Err(BlockError::MultipleBlocks);
        }
        let mut body = body.to_string();
        if !body.is_empty() && !body.ends_with('\n') {
            body.push('\n');
        }
        Ok(Self {
            body,
            ..self.clone()
        })
    }
}
