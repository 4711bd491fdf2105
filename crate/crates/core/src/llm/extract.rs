use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three text representations pulled from one response.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawGeneration {
    pub idea_text: String,
    pub math_text: String,
    pub program_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("response has no ```math block")]
    MissingMathBlock,
}

/// All labeled fenced blocks in order of appearance, as (label, body).
///
/// A block opens on a line whose trimmed text is three backticks followed by
/// a label, and closes on a line that is exactly three backticks after
/// trimming. An unclosed block runs to the end of the text. Labels are
/// lowercased; unlabeled blocks are skipped.
pub fn fenced_blocks(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut open: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        match open.as_mut() {
            Some((_, body)) => {
                if trimmed == "```" {
                    let (label, body) = open.take().expect("block is open");
                    out.push((label, body.join("\n").trim().to_string()));
                } else {
                    body.push(line);
                }
            }
            None => {
                if let Some(rest) = trimmed.strip_prefix("```") {
                    let label = rest.trim().to_ascii_lowercase();
                    open = Some((label, Vec::new()));
                }
            }
        }
    }
    if let Some((label, body)) = open {
        out.push((label, body.join("\n").trim().to_string()));
    }
    out.retain(|(label, _)| !label.is_empty());
    out
}

/// Body of the first block carrying `label`.
pub fn fenced_block(text: &str, label: &str) -> Option<String> {
    let label = label.to_ascii_lowercase();
    fenced_blocks(text)
        .into_iter()
        .find(|(l, _)| *l == label)
        .map(|(_, body)| body)
}

pub fn extract_blocks(response: &str) -> Result<RawGeneration, ExtractError> {
    let blocks = fenced_blocks(response);
    let first = |label: &str| {
        blocks
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, body)| body.clone())
    };
    let math_text = first("math").ok_or(ExtractError::MissingMathBlock)?;
    Ok(RawGeneration {
        idea_text: first("idea").unwrap_or_default(),
        math_text,
        program_text: first("code").unwrap_or_default(),
    })
}
