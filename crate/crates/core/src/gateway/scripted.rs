use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, ProviderError};

/// Reply used when no matcher fires.
pub const DEFAULT_FALLBACK: &str = "NO_SCRIPTED_REPLY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub matcher: String,
    pub reply: String,
}

impl ScriptEntry {
    pub fn new(matcher: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            matcher: matcher.into(),
            reply: reply.into(),
        }
    }
}

/// On-disk fixture of matcher/reply pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptFixture {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    pub entries: Vec<ScriptEntry>,
}

impl ScriptFixture {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let body = serde_json::to_string_pretty(self).expect("fixture serializes");
        std::fs::write(path, body + "\n")
    }
}

/// Replies with the first entry whose matcher is a substring of the user
/// prompt.
#[derive(Debug)]
pub struct ScriptedProvider {
    id: String,
    script: Vec<ScriptEntry>,
    fallback: String,
    failures_left: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new(script: Vec<ScriptEntry>) -> Self {
        Self {
            id: "scripted".into(),
            script,
            fallback: DEFAULT_FALLBACK.into(),
            failures_left: AtomicUsize::new(0),
        }
    }

    pub fn from_fixture(fixture: ScriptFixture) -> Self {
        let mut p = Self::new(fixture.entries);
        if let Some(fb) = fixture.fallback {
            p.fallback = fb;
        }
        p
    }

    pub fn with_fallback(mut self, fallback: impl Into<String>) -> Self {
        self.fallback = fallback.into();
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// The first `n` calls fail with a transient error.
    pub fn fail_first(self, n: usize) -> Self {
        self.failures_left.store(n, Ordering::SeqCst);
        self
    }

    pub fn reply_for(&self, user_prompt: &str) -> &str {
        self.script
            .iter()
            .find(|e| user_prompt.contains(&e.matcher))
            .map(|e| e.reply.as_str())
            .unwrap_or(&self.fallback)
    }
}

impl ChatProvider for ScriptedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let failing = self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failing {
            return Err(ProviderError::Transient("scripted failure".into()));
        }
        Ok(self.reply_for(&request.user_prompt).to_string())
    }
}

/// Provider backed by a closure. Used for deterministic rule-based agents
/// and test doubles.
pub struct FnProvider<F> {
    id: String,
    f: F,
}

impl<F> FnProvider<F>
where
    F: Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        Self { id: id.into(), f }
    }
}

impl<F> ChatProvider for FnProvider<F>
where
    F: Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        (self.f)(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::AgentRole;

    fn req(prompt: &str) -> ChatRequest {
        ChatRequest::new(AgentRole::Reader, "", prompt)
    }

    #[test]
    fn first_matching_entry_wins() {
        let p = ScriptedProvider::new(vec![
            ScriptEntry::new("total operating cost", "42"),
            ScriptEntry::new("operating", "never"),
        ]);
        assert_eq!(p.send(&req("What was the total operating cost?")).unwrap(), "42");
        assert_eq!(p.send(&req("What was the total operating cost?")).unwrap(), "42");
        assert_eq!(p.send(&req("revenue?")).unwrap(), DEFAULT_FALLBACK);
    }

    #[test]
    fn fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.json");
        let fx = ScriptFixture {
            fallback: Some("none".into()),
            entries: vec![ScriptEntry::new("a", "b")],
        };
        fx.save(&path).unwrap();
        let p = ScriptedProvider::from_fixture(ScriptFixture::load(&path).unwrap());
        assert_eq!(p.reply_for("xa"), "b");
        assert_eq!(p.reply_for("zz"), "none");
    }
}
