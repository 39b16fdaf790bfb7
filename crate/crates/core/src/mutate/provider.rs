//! Mutation providers: a chat-completion HTTP client and a deterministic
//! scripted stand-in for offline runs.

use std::path::Path;
use std::time::Duration;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::diff::{parse_response, MutationResponse, UnparseableResponse};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("endpoint unreachable after {attempts} attempt(s): {last}")]
    Unreachable { attempts: u32, last: String },
    #[error("malformed completion payload: {0}")]
    BadPayload(String),
    #[error("no scripted response matches call {call}")]
    NoScriptedResponse { call: u64 },
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProposeError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Unparseable(#[from] UnparseableResponse),
}

/// Source of candidate edits.
///
/// `calls_made` and `set_calls_made` expose the only state a provider keeps
/// between calls, so a run can be checkpointed and resumed.
pub trait MutationProvider: Send {
    fn complete(&mut self, prompt: &str) -> Result<String, ProviderError>;
    fn calls_made(&self) -> u64;
    fn set_calls_made(&mut self, calls: u64);
}

/// Asks `provider` for an edit and classifies the answer.
pub fn propose(
    provider: &mut dyn MutationProvider,
    prompt: &str,
    diff_mode: bool,
) -> Result<MutationResponse, ProposeError> {
    let raw = provider.complete(prompt)?;
    Ok(parse_response(&raw, diff_mode)?)
}

pub fn prompt_hash(prompt: &str) -> u64 {
    let digest = Sha256::digest(prompt.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Scripted provider
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptOrder {
    /// Call `i` returns the first matching entry at or after position
    /// `i mod len`, wrapping around.
    #[default]
    Sequential,
    /// Call `i` draws a matching entry by weight from a generator seeded
    /// with the run seed, the call index and the prompt hash.
    Seeded,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    /// Entry is eligible only if the prompt contains this text.
    #[serde(default)]
    pub when: Option<String>,
    /// Entry is ineligible if the prompt contains this text.
    #[serde(default)]
    pub unless: Option<String>,
    #[serde(default = "one")]
    pub weight: u32,
    /// Raw model answer to return.
    #[serde(default)]
    pub response: String,
    /// When set, the call fails with this message instead.
    #[serde(default)]
    pub fail: Option<String>,
}

impl ScriptEntry {
    pub fn respond(response: impl Into<String>) -> Self {
        Self {
            when: None,
            unless: None,
            weight: 1,
            response: response.into(),
            fail: None,
        }
    }

    pub fn when(mut self, needle: impl Into<String>) -> Self {
        self.when = Some(needle.into());
        self
    }

    pub fn unless(mut self, needle: impl Into<String>) -> Self {
        self.unless = Some(needle.into());
        self
    }

    pub fn weight(mut self, weight: u32) -> Self {
        self.weight = weight;
        self
    }

    fn matches(&self, prompt: &str) -> bool {
        self.when.as_deref().is_none_or(|w| prompt.contains(w))
            && self.unless.as_deref().is_none_or(|u| !prompt.contains(u))
    }
}

/// Scripted-mutator fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub order: ScriptOrder,
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    script: Script,
    seed: u64,
    calls: u64,
}

impl ScriptedProvider {
    pub fn new(script: Script, seed: u64) -> Self {
        Self {
            script,
            seed,
            calls: 0,
        }
    }

    pub fn sequential(entries: Vec<ScriptEntry>) -> Self {
        Self::new(
            Script {
                order: ScriptOrder::Sequential,
                entries,
            },
            0,
        )
    }

    /// The entry a given call would select. Pure in (seed, call, prompt).
    pub fn pick(&self, call: u64, prompt: &str) -> Option<&ScriptEntry> {
        let entries = &self.script.entries;
        if entries.is_empty() {
            return None;
        }
        match self.script.order {
            ScriptOrder::Sequential => {
                let n = entries.len();
                let start = (call % n as u64) as usize;
                (0..n)
                    .map(|off| &entries[(start + off) % n])
                    .find(|e| e.matches(prompt))
            }
            ScriptOrder::Seeded => {
                let eligible: Vec<&ScriptEntry> = entries
                    .iter()
                    .filter(|e| e.matches(prompt) && e.weight > 0)
                    .collect();
                if eligible.is_empty() {
                    return None;
                }
                let mix = self.seed
                    ^ call.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    ^ prompt_hash(prompt).rotate_left(17);
                let mut rng = ChaCha8Rng::seed_from_u64(mix);
                let dist = WeightedIndex::new(eligible.iter().map(|e| e.weight)).ok()?;
                Some(eligible[dist.sample(&mut rng)])
            }
        }
    }
}

impl MutationProvider for ScriptedProvider {
    fn complete(&mut self, prompt: &str) -> Result<String, ProviderError> {
        let call = self.calls;
        self.calls += 1;
        let entry = self
            .pick(call, prompt)
            .ok_or(ProviderError::NoScriptedResponse { call })?;
        match &entry.fail {
            Some(msg) => Err(ProviderError::Scripted(msg.clone())),
            None => Ok(entry.response.clone()),
        }
    }

    fn calls_made(&self) -> u64 {
        self.calls
    }

    fn set_calls_made(&mut self, calls: u64) {
        self.calls = calls;
    }
}

// ---------------------------------------------------------------------------
// Chat-completion provider
// ---------------------------------------------------------------------------

fn default_weight() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_weight")]
    pub weight: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoints: Vec<EndpointConfig>,
    /// Environment variable holding the bearer token. Unset means no
    /// `Authorization` header.
    #[serde(default = "LlmConfig::default_token_env")]
    pub token_env: String,
    #[serde(default = "LlmConfig::default_temperature")]
    pub temperature: f64,
    #[serde(default = "LlmConfig::default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "LlmConfig::default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "LlmConfig::default_timeout")]
    pub timeout_secs: f64,
}

impl LlmConfig {
    fn default_token_env() -> String {
        "EVOOPT_API_KEY".to_string()
    }
    fn default_temperature() -> f64 {
        0.7
    }
    fn default_max_tokens() -> u32 {
        4096
    }
    fn default_attempts() -> u32 {
        3
    }
    fn default_timeout() -> f64 {
        120.0
    }
}

/// Weighted round-robin over several endpoints ("smooth" variant: the
/// sequence interleaves endpoints in proportion to their weights).
#[derive(Debug, Clone)]
struct RoundRobin {
    weights: Vec<i64>,
    current: Vec<i64>,
}

impl RoundRobin {
    fn new(weights: &[u32]) -> Self {
        Self {
            weights: weights.iter().map(|&w| w as i64).collect(),
            current: vec![0; weights.len()],
        }
    }

    fn next(&mut self) -> usize {
        let total: i64 = self.weights.iter().sum();
        for (c, w) in self.current.iter_mut().zip(&self.weights) {
            *c += w;
        }
        let best = (0..self.current.len())
            .max_by(|&a, &b| self.current[a].cmp(&self.current[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        self.current[best] -= total;
        best
    }
}

pub struct LlmProvider {
    config: LlmConfig,
    agent: ureq::Agent,
    token: Option<String>,
    schedule: RoundRobin,
    calls: u64,
}

impl LlmProvider {
    pub fn new(config: LlmConfig) -> Result<Self, ProviderError> {
        if config.endpoints.is_empty() {
            return Err(ProviderError::Config(
                "at least one endpoint required".into(),
            ));
        }
        if config.endpoints.iter().all(|e| e.weight == 0) {
            return Err(ProviderError::Config(
                "endpoint weights are all zero".into(),
            ));
        }
        let timeout = Duration::try_from_secs_f64(config.timeout_secs)
            .map_err(|e| ProviderError::Config(format!("timeout_secs: {e}")))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        let token = std::env::var(&config.token_env)
            .ok()
            .filter(|t| !t.is_empty());
        let weights: Vec<u32> = config.endpoints.iter().map(|e| e.weight).collect();
        Ok(Self {
            schedule: RoundRobin::new(&weights),
            config,
            agent,
            token,
            calls: 0,
        })
    }

    fn request(&self, endpoint: &EndpointConfig, prompt: &str) -> Result<String, String> {
        let url = format!(
            "{}/chat/completions",
            endpoint.base_url.trim_end_matches('/')
        );
        let body = serde_json::json!({
            "model": endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let mut req = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| e.to_string())?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(text)
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion response.
pub fn extract_completion(body: &str) -> Result<String, ProviderError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ProviderError::BadPayload(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| ProviderError::BadPayload("missing choices[0].message.content".into()))
}

impl MutationProvider for LlmProvider {
    fn complete(&mut self, prompt: &str) -> Result<String, ProviderError> {
        self.calls += 1;
        let endpoint = self.config.endpoints[self.schedule.next()].clone();
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.request(&endpoint, prompt) {
                Ok(body) => return extract_completion(&body),
                Err(e) => {
                    log::warn!(
                        "{} attempt {attempt}/{attempts} failed: {e}",
                        endpoint.base_url
                    );
                    last = e;
                }
            }
        }
        Err(ProviderError::Unreachable { attempts, last })
    }

    fn calls_made(&self) -> u64 {
        self.calls
    }

    fn set_calls_made(&mut self, calls: u64) {
        let weights: Vec<u32> = self.config.endpoints.iter().map(|e| e.weight).collect();
        self.schedule = RoundRobin::new(&weights);
        for _ in 0..calls {
            self.schedule.next();
        }
        self.calls = calls;
    }
}
