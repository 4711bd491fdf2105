use super::{Backend, BackendCursor, ChatRequest, GatewayError, TranscriptEntry};

/// Re-serves a recorded transcript by request sequence number. The phase tag
/// must match the recording; strict mode also compares prompt hashes.
pub struct ReplayBackend {
    entries: Vec<TranscriptEntry>,
    strict: bool,
}

impl ReplayBackend {
    pub fn new(entries: Vec<TranscriptEntry>, strict: bool) -> Self {
        ReplayBackend { entries, strict }
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> String {
        "replay".into()
    }

    fn complete(&self, request: &ChatRequest, seq: u64) -> Result<String, GatewayError> {
        let entry = self
            .entries
            .get(seq as usize)
            .ok_or(GatewayError::TranscriptExhausted { seq })?;
        if entry.request.tag != request.tag {
            return Err(GatewayError::Divergence {
                seq,
                detail: format!(
                    "recorded tag {:?}, requested {:?}",
                    entry.request.tag, request.tag
                ),
            });
        }
        if self.strict && entry.prompt_hash != request.prompt_hash() {
            return Err(GatewayError::Divergence {
                seq,
                detail: "prompt hash differs from the recording".into(),
            });
        }
        Ok(entry.response.clone())
    }

    fn cursor(&self) -> BackendCursor {
        BackendCursor::default()
    }
}
