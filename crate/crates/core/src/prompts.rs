//! Prompt templates with `{name}` placeholders.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::solution::Operator;

/// Every template, keyed by file stem. Defaults ship with the crate; a
/// directory may override any subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    templates: BTreeMap<String, String>,
}

const DEFAULTS: [(&str, &str); 11] = [
    ("system", include_str!("../prompts/system.txt")),
    ("inspire", include_str!("../prompts/inspire.txt")),
    ("think", include_str!("../prompts/think.txt")),
    ("solve", include_str!("../prompts/solve.txt")),
    ("summarize", include_str!("../prompts/summarize.txt")),
    ("format_contract", include_str!("../prompts/format_contract.txt")),
    ("init", include_str!("../prompts/init.txt")),
    ("pos_crossover", include_str!("../prompts/pos_crossover.txt")),
    ("neg_crossover", include_str!("../prompts/neg_crossover.txt")),
    ("pos_mutation", include_str!("../prompts/pos_mutation.txt")),
    ("neg_mutation", include_str!("../prompts/neg_mutation.txt")),
];

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.trim_end().to_string()))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Defaults overridden by `<dir>/<name>.txt` where present. Files with
    /// unknown names are an error, so typos do not pass silently.
    pub fn load(dir: &Path) -> std::io::Result<PromptSet> {
        let mut set = PromptSet::default();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            if !set.templates.contains_key(&stem) {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("unknown prompt template {}", path.display()),
                ));
            }
            let text = std::fs::read_to_string(&path)?;
            set.templates.insert(stem, text.trim_end().to_string());
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &str {
        self.templates
            .get(name)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("no prompt template named {name}"))
    }

    pub fn set(&mut self, name: &str, text: impl Into<String>) {
        self.templates.insert(name.to_string(), text.into());
    }

    pub fn operator(&self, op: Operator) -> &str {
        self.get(op.name())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

/// Replaces `{name}` with its value in one left-to-right pass; substituted
/// text is never rescanned, and unknown placeholders are left as written.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let substituted = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match substituted {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
