//! Provider-agnostic chat completion with retries, a per-provider
//! concurrency cap and temperature pinned to zero.

mod http;
mod oracle;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpProvider;
pub use oracle::{match_metric, OracleError, OracleProvider};
pub use scripted::{FnProvider, ScriptEntry, ScriptFixture, ScriptedProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Planner,
    Reader,
    Normalizer,
    Coder,
    Synthesizer,
    Judge,
}

impl AgentRole {
    pub const ALL: [AgentRole; 6] = [
        AgentRole::Planner,
        AgentRole::Reader,
        AgentRole::Normalizer,
        AgentRole::Coder,
        AgentRole::Synthesizer,
        AgentRole::Judge,
    ];
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentRole::Planner => "planner",
            AgentRole::Reader => "reader",
            AgentRole::Normalizer => "normalizer",
            AgentRole::Coder => "coder",
            AgentRole::Synthesizer => "synthesizer",
            AgentRole::Judge => "judge",
        })
    }
}

/// Which document and sub-query a reader call is about. Providers that
/// answer from ground truth (the oracle) need it; model-backed providers
/// ignore it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderFocus {
    pub doc_id: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role: AgentRole,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<ReaderFocus>,
}

impl ChatRequest {
    pub fn new(role: AgentRole, system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            role,
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_output: 4096,
            focus: None,
        }
    }

    pub fn with_focus(mut self, doc_id: impl Into<String>, query: impl Into<String>) -> Self {
        self.focus = Some(ReaderFocus {
            doc_id: doc_id.into(),
            query: query.into(),
        });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub provider_id: String,
    pub latency_ms: u64,
    pub attempt: u32,
}

/// Failure of a single provider attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    /// Timeouts, connection resets, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("non-retryable (status {status:?}): {message}")]
    Fatal { status: Option<u16>, message: String },
}

impl ProviderError {
    pub fn fatal(message: impl Into<String>) -> Self {
        ProviderError::Fatal {
            status: None,
            message: message.into(),
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("[{role}] transport error after {attempts} attempt(s): {message}")]
    Transport {
        role: AgentRole,
        attempts: u32,
        message: String,
    },
    #[error("[{role}] protocol error (status {status:?}): {message}")]
    Protocol {
        role: AgentRole,
        status: Option<u16>,
        message: String,
    },
    #[error("[{role}] request temperature {temperature} is not 0")]
    NonZeroTemperature { role: AgentRole, temperature: f64 },
}

impl GatewayError {
    pub fn role(&self) -> AgentRole {
        match self {
            GatewayError::Transport { role, .. }
            | GatewayError::Protocol { role, .. }
            | GatewayError::NonZeroTemperature { role, .. } => *role,
        }
    }
}

/// Connection settings for an HTTP chat-completions endpoint, plus the
/// retry and concurrency limits every gateway applies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token. Empty
    /// means no auth header.
    #[serde(default)]
    pub auth_env_var: String,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism_limit: usize,
}

fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_parallelism() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayLimits {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub parallelism_limit: usize,
}

impl Default for GatewayLimits {
    fn default() -> Self {
        Self {
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
            parallelism_limit: default_parallelism(),
        }
    }
}

impl From<&ProviderConfig> for GatewayLimits {
    fn from(cfg: &ProviderConfig) -> Self {
        Self {
            max_retries: cfg.max_retries,
            backoff_base_ms: cfg.backoff_base_ms,
            parallelism_limit: cfg.parallelism_limit,
        }
    }
}

struct Semaphore {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(limit: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            limit: limit.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// A provider wrapped with retry, backoff and a concurrency cap. Shareable
/// across threads.
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    limits: GatewayLimits,
    slots: Semaphore,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.id())
            .field("limits", &self.limits)
            .finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>, limits: GatewayLimits) -> Self {
        Self {
            provider,
            slots: Semaphore::new(limits.parallelism_limit),
            limits,
        }
    }

    /// Gateway with default limits and no backoff delay, for deterministic
    /// in-process providers.
    pub fn local(provider: impl ChatProvider + 'static) -> Self {
        Self::new(
            Arc::new(provider),
            GatewayLimits {
                backoff_base_ms: 0,
                ..GatewayLimits::default()
            },
        )
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn limits(&self) -> GatewayLimits {
        self.limits
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if request.temperature != 0.0 {
            return Err(GatewayError::NonZeroTemperature {
                role: request.role,
                temperature: request.temperature,
            });
        }
        let started = Instant::now();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.slots.acquire();
                self.provider.send(request)
            };
            match outcome {
                Ok(text) => {
                    return Ok(ChatResponse {
                        text,
                        provider_id: self.provider.id().to_string(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt,
                    })
                }
                Err(ProviderError::Fatal { status, message }) => {
                    return Err(GatewayError::Protocol {
                        role: request.role,
                        status,
                        message,
                    })
                }
                Err(ProviderError::Transient(message)) => {
                    if attempt > self.limits.max_retries {
                        return Err(GatewayError::Transport {
                            role: request.role,
                            attempts: attempt,
                            message,
                        });
                    }
                    log::warn!("[{}] attempt {attempt} failed: {message}", request.role);
                    let delay = self
                        .limits
                        .backoff_base_ms
                        .saturating_mul(1u64 << (attempt - 1).min(16));
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
    }
}

/// Free-function form of [`Gateway::complete`].
pub fn complete(request: &ChatRequest, gateway: &Gateway) -> Result<ChatResponse, GatewayError> {
    gateway.complete(request)
}

/// One gateway per agent role, with a fallback for roles not configured.
#[derive(Debug, Clone)]
pub struct GatewaySet {
    default: Arc<Gateway>,
    by_role: BTreeMap<AgentRole, Arc<Gateway>>,
}

impl GatewaySet {
    pub fn new(default: Arc<Gateway>) -> Self {
        Self {
            default,
            by_role: BTreeMap::new(),
        }
    }

    pub fn with(mut self, role: AgentRole, gateway: Arc<Gateway>) -> Self {
        self.by_role.insert(role, gateway);
        self
    }

    pub fn for_role(&self, role: AgentRole) -> &Gateway {
        self.by_role.get(&role).unwrap_or(&self.default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn fast(provider: impl ChatProvider + 'static, max_retries: u32) -> Gateway {
        Gateway::new(
            Arc::new(provider),
            GatewayLimits {
                max_retries,
                backoff_base_ms: 1,
                parallelism_limit: 4,
            },
        )
    }

    #[test]
    fn scripted_reply_first_attempt() {
        let gw = fast(ScriptedProvider::new(vec![ScriptEntry::new("", "OK")]), 3);
        let resp = gw.complete(&ChatRequest::new(AgentRole::Reader, "", "anything")).unwrap();
        assert_eq!(resp.text, "OK");
        assert_eq!(resp.attempt, 1);
    }

    #[test]
    fn retries_until_success() {
        let provider = ScriptedProvider::new(vec![ScriptEntry::new("", "OK")]).fail_first(2);
        let gw = fast(provider, 3);
        let resp = gw.complete(&ChatRequest::new(AgentRole::Planner, "", "q")).unwrap();
        assert_eq!(resp.attempt, 3);
    }

    #[test]
    fn zero_retries_is_transport_error_with_role() {
        let provider = ScriptedProvider::new(vec![]).fail_first(1);
        let gw = fast(provider, 0);
        let err = gw.complete(&ChatRequest::new(AgentRole::Judge, "", "q")).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 1, .. }));
        assert_eq!(err.role(), AgentRole::Judge);
    }

    #[test]
    fn exhausted_retries() {
        let provider = ScriptedProvider::new(vec![]).fail_first(10);
        let gw = fast(provider, 2);
        let err = gw.complete(&ChatRequest::new(AgentRole::Coder, "", "q")).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }));
    }

    #[test]
    fn fatal_is_not_retried() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let provider = FnProvider::new("fatal", move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            Err(ProviderError::Fatal {
                status: Some(400),
                message: "bad request".into(),
            })
        });
        let gw = fast(provider, 5);
        let err = gw.complete(&ChatRequest::new(AgentRole::Reader, "", "q")).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol { status: Some(400), .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn nonzero_temperature_rejected() {
        let gw = fast(ScriptedProvider::new(vec![]), 0);
        let mut req = ChatRequest::new(AgentRole::Reader, "", "q");
        req.temperature = 0.7;
        assert!(matches!(
            gw.complete(&req),
            Err(GatewayError::NonZeroTemperature { .. })
        ));
    }

    #[test]
    fn in_flight_never_exceeds_limit() {
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (c, p) = (current.clone(), peak.clone());
        let provider = FnProvider::new("counting", move |_| {
            let now = c.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(3));
            c.fetch_sub(1, Ordering::SeqCst);
            Ok("x".into())
        });
        let gw = Gateway::new(
            Arc::new(provider),
            GatewayLimits {
                max_retries: 0,
                backoff_base_ms: 0,
                parallelism_limit: 3,
            },
        );
        std::thread::scope(|s| {
            for _ in 0..16 {
                s.spawn(|| {
                    for _ in 0..5 {
                        gw.complete(&ChatRequest::new(AgentRole::Reader, "", "q")).unwrap();
                    }
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
        assert!(peak.load(Ordering::SeqCst) >= 2);
    }

    #[test]
    fn gateway_set_falls_back_to_default() {
        let default = Arc::new(Gateway::local(ScriptedProvider::new(vec![]).with_fallback("default")));
        let judge = Arc::new(Gateway::local(ScriptedProvider::new(vec![]).with_fallback("judge")));
        let set = GatewaySet::new(default).with(AgentRole::Judge, judge);
        let req = |r| ChatRequest::new(r, "", "q");
        assert_eq!(set.for_role(AgentRole::Judge).complete(&req(AgentRole::Judge)).unwrap().text, "judge");
        assert_eq!(set.for_role(AgentRole::Coder).complete(&req(AgentRole::Coder)).unwrap().text, "default");
    }
}
