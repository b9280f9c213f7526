use std::collections::VecDeque;
use std::sync::Mutex;

use super::{Backend, BackendError, GenerationRequest, GenerationResult};

/// Replays queued responses in order. The i-th call returns the i-th
/// response; every request is logged for inspection.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    state: Mutex<ScriptState>,
}

#[derive(Debug, Default)]
struct ScriptState {
    queue: VecDeque<String>,
    log: Vec<GenerationRequest>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            state: Mutex::new(ScriptState {
                queue: responses.into_iter().map(Into::into).collect(),
                log: Vec::new(),
            }),
        }
    }

    pub fn push(&self, response: impl Into<String>) {
        self.state.lock().unwrap().queue.push_back(response.into());
    }

    /// Number of generate calls received so far, including failed ones.
    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().log.len()
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().unwrap().queue.len()
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.state.lock().unwrap().log.clone()
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let mut state = self.state.lock().unwrap();
        state.log.push(req.clone());
        let calls = state.log.len();
        let text = state
            .queue
            .pop_front()
            .ok_or(BackendError::QueueExhausted { calls: calls - 1 })?;
        Ok(GenerationResult {
            text,
            latency_ms: 0.0,
            prompt_tokens: None,
            completion_tokens: None,
            backend_id: "scripted".into(),
            cached: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::DecodingParams;

    fn req() -> GenerationRequest {
        GenerationRequest::user_prompt("m", "p", DecodingParams::greedy())
    }

    #[test]
    fn replays_in_order_then_exhausts() {
        let b = ScriptedBackend::new(["hello", "world"]);
        assert_eq!(b.generate(&req()).unwrap().text, "hello");
        assert_eq!(b.generate(&req()).unwrap().text, "world");
        assert_eq!(
            b.generate(&req()).unwrap_err(),
            BackendError::QueueExhausted { calls: 2 }
        );
        assert_eq!(b.calls(), 3);
    }

    #[test]
    fn empty_queue_errors() {
        let b = ScriptedBackend::new(Vec::<String>::new());
        assert!(matches!(
            b.generate(&req()),
            Err(BackendError::QueueExhausted { calls: 0 })
        ));
    }
}
