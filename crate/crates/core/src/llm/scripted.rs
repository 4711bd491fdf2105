use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendCursor, ChatRequest, GatewayError, Tag};

/// Responses by phase tag, optionally gated on a prompt substring. Each rule
/// cycles through its own responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(default)]
    pub tag: Option<Tag>,
    #[serde(default)]
    pub contains: Option<String>,
    pub responses: Vec<String>,
}

impl ScriptRule {
    fn matches(&self, request: &ChatRequest) -> bool {
        if self.responses.is_empty() {
            return false;
        }
        if self.tag.is_some_and(|t| t != request.tag) {
            return false;
        }
        match &self.contains {
            Some(needle) => request.messages.iter().any(|m| m.content.contains(needle.as_str())),
            None => true,
        }
    }
}

/// Fixture file contents. Rules are tried first, in order; a request no rule
/// matches takes the next entry of `responses`. When `prompt_hashes` is set
/// and the backend is strict, request `seq` must hash to `prompt_hashes[seq]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedFixture {
    #[serde(default)]
    pub responses: Vec<String>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub prompt_hashes: Option<Vec<String>>,
}

impl ScriptedFixture {
    pub fn sequence(responses: Vec<String>) -> Self {
        ScriptedFixture {
            responses,
            ..Default::default()
        }
    }
}

pub struct ScriptedBackend {
    fixture: ScriptedFixture,
    strict: bool,
    state: Mutex<BackendCursor>,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptedFixture) -> Self {
        let hits = vec![0; fixture.rules.len()];
        ScriptedBackend {
            fixture,
            strict: false,
            state: Mutex::new(BackendCursor {
                served: 0,
                rule_hits: hits,
            }),
        }
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn complete(&self, request: &ChatRequest, seq: u64) -> Result<String, GatewayError> {
        if self.strict {
            if let Some(expected) = self
                .fixture
                .prompt_hashes
                .as_ref()
                .and_then(|h| h.get(seq as usize))
            {
                let actual = request.prompt_hash();
                if *expected != actual {
                    return Err(GatewayError::Divergence {
                        seq,
                        detail: format!("prompt hash {actual} differs from fixture {expected}"),
                    });
                }
            }
        }
        let mut state = self.state.lock().expect("scripted state poisoned");
        if let Some(idx) = self.fixture.rules.iter().position(|r| r.matches(request)) {
            let rule = &self.fixture.rules[idx];
            let hit = state.rule_hits[idx];
            state.rule_hits[idx] += 1;
            return Ok(rule.responses[(hit % rule.responses.len() as u64) as usize].clone());
        }
        let next = state.served as usize;
        match self.fixture.responses.get(next) {
            Some(text) => {
                state.served += 1;
                Ok(text.clone())
            }
            None => Err(GatewayError::BackendUnavailable(format!(
                "scripted responses exhausted after {next} (request {seq}, tag {:?})",
                request.tag
            ))),
        }
    }

    fn cursor(&self) -> BackendCursor {
        self.state.lock().expect("scripted state poisoned").clone()
    }

    fn seek(&self, cursor: &BackendCursor) {
        let mut state = self.state.lock().expect("scripted state poisoned");
        state.served = cursor.served;
        for (slot, hit) in state.rule_hits.iter_mut().zip(&cursor.rule_hits) {
            *slot = *hit;
        }
    }
}
