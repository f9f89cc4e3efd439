use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;

use super::{ChatProvider, ChatRequest, ProviderError, ProviderReply, TokenUsage};

/// What the mock does for one call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockOutcome {
    Text(String),
    Status(u16),
    Timeout,
    Unreachable,
    ContextTooLong,
}

impl MockOutcome {
    pub fn text(s: impl Into<String>) -> Self {
        MockOutcome::Text(s.into())
    }

    pub fn status(code: u16) -> Self {
        MockOutcome::Status(code)
    }

    fn into_result(self, request: &ChatRequest) -> Result<ProviderReply, ProviderError> {
        match self {
            MockOutcome::Text(text) => Ok(ProviderReply {
                usage: TokenUsage {
                    input: word_count(&request.system) + word_count(&request.user),
                    output: word_count(&text),
                },
                text,
            }),
            MockOutcome::Status(status) => Err(ProviderError::Http {
                status,
                message: format!("mock status {status}"),
            }),
            MockOutcome::Timeout => Err(ProviderError::Timeout),
            MockOutcome::Unreachable => Err(ProviderError::Unreachable("mock connection refused".into())),
            MockOutcome::ContextTooLong => Err(ProviderError::ContextTooLong("mock context window exceeded".into())),
        }
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

type Responder = Box<dyn Fn(&ChatRequest) -> MockOutcome + Send + Sync>;

/// Deterministic scripted provider.
///
/// Each call is answered by, in order: the queue scripted for the request's
/// fingerprint, the global FIFO queue, the responder function, the fallback
/// outcome. With no script left the call fails as a malformed response.
#[derive(Default)]
pub struct MockProvider {
    by_fingerprint: Mutex<HashMap<String, VecDeque<MockOutcome>>>,
    queue: Mutex<VecDeque<MockOutcome>>,
    responder: Option<Responder>,
    fallback: Option<MockOutcome>,
    latency: Duration,
    calls: Mutex<Vec<ChatRequest>>,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Answers every otherwise-unscripted call by calling `f`. A pure `f`
    /// makes the provider deterministic per request.
    pub fn with_responder(mut self, f: impl Fn(&ChatRequest) -> MockOutcome + Send + Sync + 'static) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn with_fallback(mut self, outcome: MockOutcome) -> Self {
        self.fallback = Some(outcome);
        self
    }

    /// Sleeps this long before answering each call.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn push(&self, outcome: MockOutcome) {
        self.queue.lock().unwrap().push_back(outcome);
    }

    pub fn script_for(&self, fingerprint: impl Into<String>, outcomes: impl IntoIterator<Item = MockOutcome>) {
        self.by_fingerprint
            .lock()
            .unwrap()
            .entry(fingerprint.into())
            .or_default()
            .extend(outcomes);
    }

    pub fn calls(&self) -> Vec<ChatRequest> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    fn next_outcome(&self, request: &ChatRequest) -> Option<MockOutcome> {
        let fp = request.fingerprint();
        if let Some(outcome) = self.by_fingerprint.lock().unwrap().get_mut(&fp).and_then(VecDeque::pop_front) {
            return Some(outcome);
        }
        if let Some(outcome) = self.queue.lock().unwrap().pop_front() {
            return Some(outcome);
        }
        if let Some(responder) = &self.responder {
            return Some(responder(request));
        }
        self.fallback.clone()
    }
}

#[async_trait]
impl ChatProvider for MockProvider {
    async fn send(&self, request: &ChatRequest) -> Result<ProviderReply, ProviderError> {
        self.calls.lock().unwrap().push(request.clone());
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        match self.next_outcome(request) {
            Some(outcome) => outcome.into_result(request),
            None => Err(ProviderError::Malformed("mock provider has no scripted response".into())),
        }
    }
}
