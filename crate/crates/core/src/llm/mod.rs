//! Text-generation backends behind one gateway that validates requests,
//! records every exchange in an append-only transcript, and enforces the
//! response limits.

mod extract;
mod live;
mod replay;
mod scripted;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use extract::{extract_blocks, fenced_block, fenced_blocks, ExtractError, RawGeneration};
pub use live::{LiveBackend, API_KEY_ENV};
pub use replay::ReplayBackend;
pub use scripted::{ScriptRule, ScriptedBackend, ScriptedFixture};

pub const DEFAULT_MAX_RESPONSE_CHARS: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Engine phase that issued a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Init,
    Inspire,
    Think,
    Solve,
    Crossover,
    Mutation,
    Summarize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub tag: Tag,
}

impl ChatRequest {
    pub fn new(tag: Tag, messages: Vec<Message>, temperature: f64, max_tokens: u32) -> Self {
        ChatRequest {
            messages,
            temperature,
            max_tokens,
            tag,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("no user message".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// All message contents joined, for substring matching.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// SHA-256 over roles and contents.
    pub fn prompt_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            hasher.update(serde_json::to_string(&m.role).expect("role serializes").as_bytes());
            hasher.update([0u8]);
            hasher.update(m.content.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub request: ChatRequest,
    pub prompt_hash: String,
    pub response: String,
    pub latency_ms: u64,
    pub backend_id: String,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("response rejected: {0}")]
    ResponseRejected(String),
    #[error("transcript exhausted at request {seq}")]
    TranscriptExhausted { seq: u64 },
    #[error("request {seq} diverges from the recording: {detail}")]
    Divergence { seq: u64, detail: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transcript i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    /// Errors that abort a run, as opposed to a bad candidate.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, GatewayError::ResponseRejected(_))
    }
}

/// Backend position, checkpointed so scripted runs resume exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCursor {
    pub served: u64,
    #[serde(default)]
    pub rule_hits: Vec<u64>,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> String;

    /// `seq` is the request's position in the transcript.
    fn complete(&self, request: &ChatRequest, seq: u64) -> Result<String, GatewayError>;

    /// Whether requests may be issued concurrently.
    fn concurrent(&self) -> bool {
        false
    }

    /// Whether wall-clock latency is meaningful (zero is recorded otherwise,
    /// keeping deterministic transcripts byte-stable).
    fn measures_latency(&self) -> bool {
        false
    }

    fn cursor(&self) -> BackendCursor {
        BackendCursor::default()
    }

    fn seek(&self, _cursor: &BackendCursor) {}
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    transcript: Vec<TranscriptEntry>,
    sink: Option<BufWriter<File>>,
    max_response_chars: usize,
    max_inflight: usize,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Gateway {
        Gateway {
            backend,
            transcript: Vec::new(),
            sink: None,
            max_response_chars: DEFAULT_MAX_RESPONSE_CHARS,
            max_inflight: 4,
        }
    }

    pub fn scripted(responses: Vec<String>) -> Gateway {
        Gateway::new(Box::new(ScriptedBackend::new(ScriptedFixture::sequence(responses))))
    }

    pub fn with_max_inflight(mut self, n: usize) -> Self {
        self.max_inflight = n.max(1);
        self
    }

    pub fn with_max_response_chars(mut self, n: usize) -> Self {
        self.max_response_chars = n;
        self
    }

    /// Appends every new entry as one JSON line to `file`.
    pub fn with_sink(mut self, file: File) -> Self {
        self.sink = Some(BufWriter::new(file));
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn cursor(&self) -> BackendCursor {
        self.backend.cursor()
    }

    /// Restores a checkpointed position: prior entries and backend cursor.
    pub fn resume(&mut self, entries: Vec<TranscriptEntry>, cursor: &BackendCursor) {
        self.transcript = entries;
        self.backend.seek(cursor);
    }

    pub fn complete(&mut self, request: ChatRequest) -> Result<String, GatewayError> {
        self.complete_batch(vec![request])?
            .pop()
            .expect("one response per request")
    }

    /// Issues several independent requests. The outer error is fatal; each
    /// inner result may be a per-response rejection. Entries are recorded in
    /// request order regardless of completion order.
    #[allow(clippy::type_complexity)]
    pub fn complete_batch(
        &mut self,
        requests: Vec<ChatRequest>,
    ) -> Result<Vec<Result<String, GatewayError>>, GatewayError> {
        for r in &requests {
            r.validate()?;
        }
        let base = self.transcript.len() as u64;
        let backend = self.backend.as_ref();
        let timed = |req: &ChatRequest, seq: u64| {
            let start = Instant::now();
            let out = backend.complete(req, seq);
            (out, start.elapsed().as_millis() as u64)
        };
        let results: Vec<(Result<String, GatewayError>, u64)> =
            if backend.concurrent() && self.max_inflight > 1 && requests.len() > 1 {
                let mut all = Vec::with_capacity(requests.len());
                for (chunk_idx, chunk) in requests.chunks(self.max_inflight).enumerate() {
                    let offset = base + (chunk_idx * self.max_inflight) as u64;
                    let chunk_results: Vec<_> = std::thread::scope(|s| {
                        let handles: Vec<_> = chunk
                            .iter()
                            .enumerate()
                            .map(|(i, req)| s.spawn(move || timed(req, offset + i as u64)))
                            .collect();
                        handles
                            .into_iter()
                            .map(|h| h.join().expect("request thread panicked"))
                            .collect()
                    });
                    all.extend(chunk_results);
                }
                all
            } else {
                let mut all = Vec::with_capacity(requests.len());
                for (i, req) in requests.iter().enumerate() {
                    let r = timed(req, base + i as u64);
                    let failed = r.0.is_err();
                    all.push(r);
                    if failed {
                        break;
                    }
                }
                all
            };

        let mut out = Vec::with_capacity(results.len());
        for (request, (result, latency)) in requests.into_iter().zip(results) {
            let response = result?;
            let entry = TranscriptEntry {
                seq: self.transcript.len() as u64,
                prompt_hash: request.prompt_hash(),
                request,
                response,
                latency_ms: if self.backend.measures_latency() { latency } else { 0 },
                backend_id: self.backend.id(),
            };
            self.record(entry)?;
            let text = &self.transcript.last().expect("just recorded").response;
            out.push(self.check_response(text).map(|_| text.clone()));
        }
        Ok(out)
    }

    fn check_response(&self, text: &str) -> Result<(), GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::ResponseRejected("empty response".into()));
        }
        let chars = text.chars().count();
        if chars > self.max_response_chars {
            return Err(GatewayError::ResponseRejected(format!(
                "response has {chars} characters, limit is {}",
                self.max_response_chars
            )));
        }
        Ok(())
    }

    fn record(&mut self, entry: TranscriptEntry) -> Result<(), GatewayError> {
        if let Some(sink) = self.sink.as_mut() {
            let line = serde_json::to_string(&entry).expect("entry serializes");
            writeln!(sink, "{line}")?;
            sink.flush()?;
        }
        self.transcript.push(entry);
        Ok(())
    }
}

/// Reads a JSON-lines transcript.
pub fn read_transcript(text: &str) -> Result<Vec<TranscriptEntry>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(tag: Tag, text: &str) -> ChatRequest {
        ChatRequest::new(tag, vec![Message::user(text)], 0.9, 256)
    }

    #[test]
    fn scripted_serves_in_order_then_exhausts() {
        let mut gw = Gateway::scripted(vec!["A".into(), "B".into()]);
        assert_eq!(gw.complete(req(Tag::Inspire, "x")).unwrap(), "A");
        assert_eq!(gw.complete(req(Tag::Think, "y")).unwrap(), "B");
        assert!(matches!(
            gw.complete(req(Tag::Solve, "z")),
            Err(GatewayError::BackendUnavailable(_))
        ));
        assert_eq!(gw.transcript().len(), 2);
        assert_eq!(gw.transcript()[1].seq, 1);
        assert_eq!(gw.transcript()[1].latency_ms, 0);
    }

    #[test]
    fn request_validation() {
        let mut gw = Gateway::scripted(vec!["A".into()]);
        let no_user = ChatRequest::new(Tag::Inspire, vec![Message::system("s")], 0.5, 10);
        assert!(matches!(gw.complete(no_user), Err(GatewayError::InvalidRequest(_))));
        let mut hot = req(Tag::Inspire, "x");
        hot.temperature = 2.5;
        assert!(matches!(gw.complete(hot), Err(GatewayError::InvalidRequest(_))));
        assert!(gw.transcript().is_empty());
    }

    #[test]
    fn rejections_are_recorded_but_not_fatal() {
        let mut gw = Gateway::scripted(vec!["  ".into(), "0123456789".into(), "ok".into()])
            .with_max_response_chars(5);
        let out = gw
            .complete_batch(vec![req(Tag::Solve, "a"), req(Tag::Solve, "b"), req(Tag::Solve, "c")])
            .unwrap();
        assert!(matches!(out[0], Err(GatewayError::ResponseRejected(_))));
        assert!(matches!(out[1], Err(GatewayError::ResponseRejected(_))));
        assert_eq!(out[2].as_ref().unwrap(), "ok");
        assert_eq!(gw.transcript().len(), 3);
    }

    #[test]
    fn prompt_hash_tracks_content() {
        let a = req(Tag::Solve, "hello");
        let b = req(Tag::Solve, "hello!");
        assert_ne!(a.prompt_hash(), b.prompt_hash());
        assert_eq!(a.prompt_hash(), req(Tag::Think, "hello").prompt_hash());
        assert_eq!(a.prompt_hash().len(), 64);
    }

    #[test]
    fn transcript_sink_and_reader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut gw = Gateway::scripted(vec!["A".into(), "B".into()])
            .with_sink(File::create(&path).unwrap());
        gw.complete(req(Tag::Inspire, "x")).unwrap();
        gw.complete(req(Tag::Think, "y")).unwrap();
        let back = read_transcript(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, gw.transcript());
    }

    #[test]
    fn replay_reserves_recorded_responses() {
        let mut gw = Gateway::scripted(vec!["A".into(), "B".into()]);
        gw.complete(req(Tag::Inspire, "x")).unwrap();
        gw.complete(req(Tag::Think, "y")).unwrap();
        let entries = gw.transcript().to_vec();

        let mut replay = Gateway::new(Box::new(ReplayBackend::new(entries.clone(), false)));
        assert_eq!(replay.complete(req(Tag::Inspire, "edited")).unwrap(), "A");
        assert_eq!(replay.complete(req(Tag::Think, "y")).unwrap(), "B");
        assert!(matches!(
            replay.complete(req(Tag::Solve, "z")),
            Err(GatewayError::TranscriptExhausted { seq: 2 })
        ));

        let mut strict = Gateway::new(Box::new(ReplayBackend::new(entries.clone(), true)));
        assert!(matches!(
            strict.complete(req(Tag::Inspire, "edited")),
            Err(GatewayError::Divergence { seq: 0, .. })
        ));

        let mut wrong_phase = Gateway::new(Box::new(ReplayBackend::new(entries, false)));
        assert!(matches!(
            wrong_phase.complete(req(Tag::Solve, "x")),
            Err(GatewayError::Divergence { .. })
        ));
    }

    #[test]
    fn live_backend_against_stub_server() {
        let stub = crate::http::stub::serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"fixed text"}}]}"#.into(),
        )]);
        let backend = LiveBackend::new(
            &stub.url,
            "test-model",
            Some("secret".into()),
            crate::http::RetryPolicy::default(),
        )
        .unwrap();
        let mut gw = Gateway::new(Box::new(backend));
        assert_eq!(gw.complete(req(Tag::Solve, "q")).unwrap(), "fixed text");
        assert_eq!(gw.transcript().len(), 1);
        let bodies = stub.bodies.lock().unwrap();
        assert!(bodies[0].0.starts_with("/chat/completions"));
        assert!(bodies[0].0.contains("Bearer secret"));
        let sent: serde_json::Value = serde_json::from_str(&bodies[0].1).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["messages"][0]["content"], "q");
        assert_eq!(sent["max_tokens"], 256);
        assert!((sent["temperature"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn live_batch_runs_concurrently_and_records_in_order() {
        let reply = |t: &str| {
            (
                200,
                format!(r#"{{"choices":[{{"message":{{"content":"{t}"}}}}]}}"#),
            )
        };
        let stub = crate::http::stub::serve(vec![reply("r"), reply("r"), reply("r")]);
        let backend = LiveBackend::new(&stub.url, "m", None, crate::http::RetryPolicy::default()).unwrap();
        let mut gw = Gateway::new(Box::new(backend)).with_max_inflight(2);
        let out = gw
            .complete_batch(vec![req(Tag::Solve, "a"), req(Tag::Solve, "b"), req(Tag::Solve, "c")])
            .unwrap();
        assert_eq!(out.len(), 3);
        let prompts: Vec<String> = gw.transcript().iter().map(|e| e.request.prompt_text()).collect();
        assert_eq!(prompts, vec!["a", "b", "c"]);
        assert_eq!(
            gw.transcript().iter().map(|e| e.seq).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }
}
