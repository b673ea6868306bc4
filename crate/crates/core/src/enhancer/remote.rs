//! Remote enhancer over a chat-completions style HTTP endpoint.
//!
//! Each requested condition is one request. The reply content must be a
//! list of `slot=value` lines (slot names as in [`AttributeLayout::slot_name`]);
//! anything else is a parse failure. Nothing synthetic is ever substituted
//! for a failed reply.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AugmentedCondition, AugmentedConditionSet, EditOp, Provenance, LLM_INSTRUCTIONS, VLM_INSTRUCTIONS};
use crate::condspace::{AttributeLayout, Condition, VALUE_LIMIT};
use crate::error::{Error, Result};

pub const VLM_TEMPLATE: &str = include_str!("../../assets/vlm_template.txt");
pub const LLM_TEMPLATE: &str = include_str!("../../assets/llm_template.txt");

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RemoteError {
    #[error("remote enhancer timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("remote enhancer returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("remote enhancer reply unparseable at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("remote enhancer transport error: {0}")]
    Transport(String),
    #[error("auth token variable {0} is not set")]
    MissingToken(String),
}

impl RemoteError {
    fn retryable(&self) -> bool {
        match self {
            RemoteError::Timeout { .. } | RemoteError::Transport(_) => true,
            RemoteError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Which instruction set and template the requests use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoteMode {
    /// Describe a generated sample from a perspective.
    Posterior,
    /// Edit the anchor without looking at samples.
    Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteEnhancerConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    pub token_env: Option<String>,
    pub mode: RemoteMode,
    /// Overrides the bundled template for the mode.
    pub template_path: Option<PathBuf>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// First backoff delay; doubled after each failed attempt.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteEnhancerConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            token_env: None,
            mode: RemoteMode::Posterior,
            template_path: None,
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_ms: 250,
            max_in_flight: 4,
        }
    }
}

impl RemoteEnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() {
            return Err(Error::config("enhancer.remote.endpoint", "must not be empty"));
        }
        if self.timeout_ms == 0 {
            return Err(Error::config("enhancer.remote.timeout_ms", "must be positive"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::config("enhancer.remote.max_in_flight", "must be at least 1"));
        }
        Ok(())
    }
}

struct Secret(String);

impl std::fmt::Debug for Secret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("<redacted>")
    }
}

#[derive(Debug)]
pub struct RemoteEnhancer {
    cfg: RemoteEnhancerConfig,
    layout: AttributeLayout,
    template: String,
    token: Option<Secret>,
    agent: ureq::Agent,
}

/// Outcome of one successful request.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteReply {
    pub condition: Condition,
    pub digest: String,
    pub retries: u32,
}

impl RemoteEnhancer {
    pub fn new(cfg: RemoteEnhancerConfig, layout: AttributeLayout) -> Result<Self> {
        cfg.validate()?;
        let template = match &cfg.template_path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => match cfg.mode {
                RemoteMode::Posterior => VLM_TEMPLATE.to_string(),
                RemoteMode::Prior => LLM_TEMPLATE.to_string(),
            },
        };
        let token = match &cfg.token_env {
            Some(var) => Some(Secret(
                std::env::var(var).map_err(|_| RemoteError::MissingToken(var.clone()))?,
            )),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            cfg,
            layout,
            template,
            token,
            agent,
        })
    }

    fn instruction(&self, k: usize) -> String {
        let set = match self.cfg.mode {
            RemoteMode::Posterior => VLM_INSTRUCTIONS,
            RemoteMode::Prior => LLM_INSTRUCTIONS,
        };
        let lines: Vec<&str> = set.lines().filter(|l| !l.trim().is_empty()).collect();
        lines[k % lines.len()].trim().to_string()
    }

    /// Fills the template for output `k`.
    pub fn render(&self, c: &Condition, k: usize, sample: Option<&[f64]>) -> String {
        let sample_text = match sample {
            Some(f) => f
                .iter()
                .enumerate()
                .map(|(a, v)| format!("{}={v:.6}", self.layout.slot_name(a)))
                .collect::<Vec<_>>()
                .join("\n"),
            None => "(not provided)".into(),
        };
        self.template
            .replace("{instruction}", &self.instruction(k))
            .replace("{condition}", &serialize_condition(c))
            .replace("{sample}", &sample_text)
    }

    fn request_once(&self, prompt: &str) -> std::result::Result<String, RemoteError> {
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut req = self.agent.post(&self.cfg.endpoint).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {}", token.0));
        }
        let mut resp = req.send_json(&body).map_err(transport_error)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport_error)?;
        if !(200..300).contains(&status) {
            let body: String = text.chars().take(200).collect();
            return Err(RemoteError::Status { status, body });
        }
        let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| RemoteError::Parse {
            line: 0,
            message: format!("reply is not JSON: {e}"),
        })?;
        json.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| RemoteError::Parse {
                line: 0,
                message: "reply has no choices[0].message.content string".into(),
            })
    }

    /// One condition, retried with exponential backoff.
    pub fn request(&self, c: &Condition, k: usize, sample: Option<&[f64]>) -> std::result::Result<RemoteReply, RemoteError> {
        let prompt = self.render(c, k, sample);
        let mut attempt = 0u32;
        loop {
            let outcome = self
                .request_once(&prompt)
                .and_then(|content| Ok((parse_condition(&content, c)?, content)));
            match outcome {
                Ok((condition, content)) => {
                    return Ok(RemoteReply {
                        condition,
                        digest: hex::encode(Sha256::digest(content.as_bytes())),
                        retries: attempt,
                    })
                }
                Err(e) if e.retryable() && attempt < self.cfg.max_retries => {
                    let delay = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(RemoteError::Timeout { .. }) => return Err(RemoteError::Timeout { attempts: attempt + 1 }),
                Err(e) => return Err(e),
            }
        }
    }

    /// `k` conditions, at most `max_in_flight` requests at a time.
    /// `samples[k]` (if given) is summarized in request `k`.
    pub fn enhance(
        &self,
        c: &Condition,
        k: usize,
        samples: Option<&[Vec<f64>]>,
    ) -> std::result::Result<AugmentedConditionSet, RemoteError> {
        let samples = samples.filter(|_| self.cfg.mode == RemoteMode::Posterior);
        let mut replies: Vec<RemoteReply> = Vec::with_capacity(k);
        let indices: Vec<usize> = (0..k).collect();
        for chunk in indices.chunks(self.cfg.max_in_flight) {
            let results: Vec<_> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&i| {
                        let sample = samples.and_then(|s| s.get(i % s.len().max(1))).map(Vec::as_slice);
                        scope.spawn(move || self.request(c, i, sample))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(RemoteError::Transport("worker panicked".into()))))
                    .collect()
            });
            for r in results {
                replies.push(r?);
            }
        }
        Ok(AugmentedConditionSet {
            items: replies
                .into_iter()
                .map(|r| AugmentedCondition {
                    condition: r.condition,
                    provenance: Provenance::Remote {
                        digest: r.digest,
                        retries: r.retries,
                    },
                })
                .collect(),
            saturated: false,
        })
    }
}

fn transport_error(e: ureq::Error) -> RemoteError {
    match e {
        ureq::Error::Timeout(_) => RemoteError::Timeout { attempts: 1 },
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            RemoteError::Timeout { attempts: 1 }
        }
        other => RemoteError::Transport(other.to_string()),
    }
}

/// `slot=value` lines for every present slot.
pub fn serialize_condition(c: &Condition) -> String {
    let layout = c.layout();
    c.present_slots()
        .map(|(a, v)| format!("{}={v:.6}", layout.slot_name(a)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Strict parser for a reply describing one condition. Blank lines are
/// ignored; every other line must be `slot=value` with a known slot name,
/// no repeats, and a value in range. Subject slots of `anchor` must
/// survive.
pub fn parse_condition(text: &str, anchor: &Condition) -> std::result::Result<Condition, RemoteError> {
    let layout = anchor.layout();
    let mut slots = vec![None; layout.len()];
    let fail = |line: usize, message: String| RemoteError::Parse { line, message };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (name, value) = line
            .split_once('=')
            .ok_or_else(|| fail(i + 1, format!("expected slot=value, got {line:?}")))?;
        let slot = layout
            .slot_by_name(name.trim())
            .ok_or_else(|| fail(i + 1, format!("unknown slot {:?}", name.trim())))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| fail(i + 1, format!("value {:?} is not a number", value.trim())))?;
        if !value.is_finite() || value.abs() > VALUE_LIMIT {
            return Err(fail(i + 1, format!("value {value} outside [-3, 3]")));
        }
        if slots[slot].replace(value).is_some() {
            return Err(fail(i + 1, format!("slot {} repeated", name.trim())));
        }
    }
    for (a, slot) in slots.iter().enumerate().take(layout.n_subject) {
        if anchor.get(a).is_some() && slot.is_none() {
            return Err(fail(0, format!("reply dropped subject slot {}", layout.slot_name(a))));
        }
    }
    Condition::new(layout, slots).map_err(|e| fail(0, e.to_string()))
}

/// Edit operation whose instruction is used for prior-mode request `k`.
pub fn prior_op(k: usize) -> EditOp {
    EditOp::ALL[k % EditOp::ALL.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor() -> Condition {
        Condition::new(AttributeLayout::new(1, 2).unwrap(), vec![Some(0.5), None, Some(-1.0)]).unwrap()
    }

    #[test]
    fn parser_accepts_strict_lines() {
        let c = parse_condition("subject0=0.25\n\n style1 = 1.5 \n", &anchor()).unwrap();
        assert_eq!(c.slots(), &[Some(0.25), None, Some(1.5)]);
    }

    #[test]
    fn parser_rejects_misbehavior() {
        let a = anchor();
        for bad in [
            "subject0: 0.2",
            "subject0=abc",
            "subject0=9",
            "colour=1",
            "subject0=1\nsubject0=2",
            "style0=1",
            "Sure! Here is the condition:\nsubject0=1",
        ] {
            assert!(matches!(parse_condition(bad, &a), Err(RemoteError::Parse { .. })), "{bad}");
        }
    }

    #[test]
    fn serialization_round_trips() {
        let a = anchor();
        assert_eq!(parse_condition(&serialize_condition(&a), &a).unwrap(), a);
    }

    #[test]
    fn templates_carry_instruction_and_condition() {
        let cfg = RemoteEnhancerConfig::default();
        let r = RemoteEnhancer::new(cfg, AttributeLayout::new(1, 2).unwrap()).unwrap();
        let text = r.render(&anchor(), 3, Some(&[0.1, 0.2, 0.3]));
        assert!(text.contains("Focus on lighting conditions and shadows."));
        assert!(text.contains("subject0=0.500000"));
        assert!(text.contains("style0=0.200000"));
        assert!(!text.contains('{'));
    }

    #[test]
    fn missing_token_is_reported_without_value() {
        let cfg = RemoteEnhancerConfig {
            token_env: Some("MVGRPO_TEST_TOKEN_THAT_IS_UNSET".into()),
            ..Default::default()
        };
        let err = RemoteEnhancer::new(cfg, AttributeLayout::default()).unwrap_err();
        assert!(err.to_string().contains("MVGRPO_TEST_TOKEN_THAT_IS_UNSET"));
    }

    #[test]
    fn debug_output_hides_token() {
        std::env::set_var("MVGRPO_TEST_TOKEN_SET", "hunter2");
        let cfg = RemoteEnhancerConfig {
            token_env: Some("MVGRPO_TEST_TOKEN_SET".into()),
            ..Default::default()
        };
        let r = RemoteEnhancer::new(cfg, AttributeLayout::default()).unwrap();
        assert!(!format!("{r:?}").contains("hunter2"));
    }
}
