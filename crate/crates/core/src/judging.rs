//! Helpers shared by every agent that asks a judge backend for a score.

use std::sync::OnceLock;

use regex::Regex;

use crate::backends::{BackendError, ChatClient, ChatRequest};

/// Maximum judge calls in flight per batch.
pub const MAX_IN_FLIGHT: usize = 8;

/// The first parseable real in `text`.
pub fn first_number(text: &str) -> Option<f64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"[-+]?(\d+(\.\d*)?|\.\d+)([eE][-+]?\d+)?").unwrap());
    re.find(text).and_then(|m| m.as_str().parse::<f64>().ok()).filter(|v| v.is_finite())
}

/// Clamps to [0, 1]; the flag reports whether clamping happened.
pub fn clamp_unit(v: f64) -> (f64, bool) {
    if v < 0.0 {
        (0.0, true)
    } else if v > 1.0 {
        (1.0, true)
    } else {
        (v, false)
    }
}

/// A clamped judge score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Judged {
    pub value: f64,
    pub clamped: bool,
}

/// Sends `prompt` to `judge` and reads a score from the reply.
pub async fn score(judge: &dyn ChatClient, system: &str, prompt: String) -> Result<Judged, BackendError> {
    score_with_reply(judge, system, prompt, 64).await.map(|(j, _)| j)
}

/// Like [`score`], also returning the reply text.
pub async fn score_with_reply(
    judge: &dyn ChatClient,
    system: &str,
    prompt: String,
    max_tokens: u32,
) -> Result<(Judged, String), BackendError> {
    let reply = judge.complete(&ChatRequest::new(system, prompt).with_max_tokens(max_tokens)).await?;
    let raw = first_number(&reply.text).ok_or_else(|| BackendError::ProtocolError {
        backend: judge.id().to_string(),
        reason: format!("no number in judge reply {:?}", reply.text),
    })?;
    let (value, clamped) = clamp_unit(raw);
    if clamped {
        tracing::warn!(judge = judge.id(), raw, "judge score outside [0,1] clamped to {value}");
    }
    Ok((Judged { value, clamped }, reply.text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_number_wins() {
        assert_eq!(first_number("score: 0.75 (of 1)"), Some(0.75));
        assert_eq!(first_number("1"), Some(1.0));
        assert_eq!(first_number("-0.2"), Some(-0.2));
        assert_eq!(first_number(".5"), Some(0.5));
        assert_eq!(first_number("1.4e0 then 2"), Some(1.4));
        assert_eq!(first_number("none"), None);
    }

    #[test]
    fn clamping() {
        assert_eq!(clamp_unit(1.4), (1.0, true));
        assert_eq!(clamp_unit(-3.0), (0.0, true));
        assert_eq!(clamp_unit(0.3), (0.3, false));
    }
}
