//! Search/replace edit blocks.
//!
//! ```text
//! <<<<<<< SEARCH
//! exact text to find
//! =======
//! replacement text
//! >>>>>>> REPLACE
//! ```
//!
//! Payloads are the lines strictly between marker lines, joined by `\n`
//! (the newline before the next marker is not part of the payload).

use thiserror::Error;

pub const SEARCH_MARKER: &str = "<<<<<<< SEARCH";
pub const DIVIDER_MARKER: &str = "=======";
pub const REPLACE_MARKER: &str = ">>>>>>> REPLACE";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EditError {
    #[error("completion contains no search/replace blocks")]
    NoEdits,
    #[error("malformed edit script at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("edit script is empty")]
    EmptyScript,
    #[error("search text of block {block} not found in source")]
    FailedMatch { block: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditBlock {
    pub search: String,
    pub replace: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EditScript {
    pub blocks: Vec<EditBlock>,
}

/// Result of applying a script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedEdit {
    pub source: String,
    /// Indices of blocks whose search text occurred more than once; the
    /// first occurrence was replaced.
    pub ambiguous_blocks: Vec<usize>,
}

fn is_marker(line: &str, marker: &str) -> bool {
    line.strip_suffix('\r').unwrap_or(line) == marker
}

enum State {
    Outside,
    Search { start: usize, lines: Vec<String> },
    Replace { start: usize, search: String, lines: Vec<String> },
}

pub fn parse_edit_script(completion: &str) -> Result<EditScript, EditError> {
    let mut blocks = Vec::new();
    let mut state = State::Outside;
    for (idx, line) in completion.split('\n').enumerate() {
        let line_no = idx + 1;
        state = match state {
            State::Outside => {
                if is_marker(line, SEARCH_MARKER) {
                    State::Search { start: line_no, lines: Vec::new() }
                } else {
                    State::Outside
                }
            }
            State::Search { start, mut lines } => {
                if is_marker(line, DIVIDER_MARKER) {
                    let search = lines.join("\n");
                    if search.is_empty() {
                        return Err(EditError::Malformed {
                            line: start,
                            reason: "empty SEARCH section".into(),
                        });
                    }
                    State::Replace { start, search, lines: Vec::new() }
                } else if is_marker(line, SEARCH_MARKER) || is_marker(line, REPLACE_MARKER) {
                    return Err(EditError::Malformed {
                        line: line_no,
                        reason: format!("expected `{DIVIDER_MARKER}` before this marker"),
                    });
                } else {
                    lines.push(line.to_string());
                    State::Search { start, lines }
                }
            }
            State::Replace { start, search, mut lines } => {
                if is_marker(line, REPLACE_MARKER) {
                    blocks.push(EditBlock {
                        search,
                        replace: lines.join("\n"),
                    });
                    State::Outside
                } else if is_marker(line, SEARCH_MARKER) {
                    return Err(EditError::Malformed {
                        line: line_no,
                        reason: format!("expected `{REPLACE_MARKER}` before a new block"),
                    });
                } else {
                    lines.push(line.to_string());
                    State::Replace { start, search, lines }
                }
            }
        };
    }
    match state {
        State::Outside if blocks.is_empty() => Err(EditError::NoEdits),
        State::Outside => Ok(EditScript { blocks }),
        State::Search { start, .. } | State::Replace { start, .. } => Err(EditError::Malformed {
            line: start,
            reason: "unterminated block".into(),
        }),
    }
}

impl EditScript {
    /// Renders the blocks back into marker form.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            for part in [SEARCH_MARKER, "\n", &b.search, "\n", DIVIDER_MARKER, "\n"] {
                out.push_str(part);
            }
            if !b.replace.is_empty() {
                out.push_str(&b.replace);
                out.push('\n');
            }
            out.push_str(REPLACE_MARKER);
            out.push('\n');
        }
        out
    }
}

/// Applies blocks in order against the evolving text.
pub fn apply_edit_script(source: &str, script: &EditScript) -> Result<AppliedEdit, EditError> {
    if script.blocks.is_empty() {
        return Err(EditError::EmptyScript);
    }
    let mut text = source.to_string();
    let mut ambiguous_blocks = Vec::new();
    for (i, block) in script.blocks.iter().enumerate() {
        let pos = text.find(&block.search).ok_or(EditError::FailedMatch { block: i })?;
        let next = pos + text[pos..].chars().next().map_or(1, char::len_utf8);
        if text[next..].contains(&block.search) {
            ambiguous_blocks.push(i);
        }
        text.replace_range(pos..pos + block.search.len(), &block.replace);
    }
    Ok(AppliedEdit {
        source: text,
        ambiguous_blocks,
    })
}
