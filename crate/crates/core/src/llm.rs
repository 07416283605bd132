//! Chat gateway with live, record, replay and canned-reply modes.
//!
//! Every request is keyed by a digest of its provider, model, messages,
//! temperature and repetition counter, so the same prompt issued `R` times is
//! cached as `R` distinct transcripts.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_INTERPOLATION_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_PARSING_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub provider: String,
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>, temperature: f64) -> Self {
        Self {
            provider: "openai".into(),
            model: "gpt-3.5-turbo".into(),
            messages,
            temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Argument("chat request without messages".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Argument(format!(
                "invalid sampling temperature {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Content of the final user message.
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Cache key for the `i`-th repetition of a request.
pub fn repetition_key(req: &ChatRequest, i: u64) -> String {
    let canonical = serde_json::json!({
        "provider": req.provider,
        "model": req.model,
        "messages": req.messages,
        "temperature": req.temperature,
        "repetition": i,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    Live,
    Record,
    Replay,
    #[default]
    Mock,
}

impl FromStr for LlmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" => Ok(Self::Live),
            "record" => Ok(Self::Record),
            "replay" => Ok(Self::Replay),
            "mock" => Ok(Self::Mock),
            other => Err(Error::Config(format!(
                "unknown llm mode {other:?} (live, record, replay, mock)"
            ))),
        }
    }
}

/// One network round trip. Errors are plain messages; the gateway adds retry context.
pub trait Transport: Send + Sync {
    fn send(&self, req: &ChatRequest) -> std::result::Result<String, String>;
}

/// OpenAI-compatible chat-completions endpoint.
pub struct HttpTransport {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    /// Reads `PROMPTKP_LLM_ENDPOINT` (optional) and `OPENAI_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let api_key = std::env::var("OPENAI_API_KEY")
            .map_err(|_| Error::Config("OPENAI_API_KEY is not set".into()))?;
        let endpoint = std::env::var("PROMPTKP_LLM_ENDPOINT")
            .unwrap_or_else(|_| "https://api.openai.com/v1/chat/completions".into());
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            endpoint,
            api_key,
            client,
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &ChatRequest) -> std::result::Result<String, String> {
        let body = serde_json::json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
        });
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        let value: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("status {status}: {value}"));
        }
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("reply without content: {value}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request_summary: String,
    pub reply: String,
    pub timestamp: String,
}

/// Append-only JSON-lines transcript store.
#[derive(Debug, Default)]
pub struct TranscriptCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, String>>,
    write_lock: Mutex<()>,
}

impl TranscriptCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or lazily creates on first append) the cache file at `path`.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let e: CacheEntry = serde_json::from_str(line).map_err(|e| {
                    Error::Config(format!("{}:{}: bad cache line: {e}", path.display(), n + 1))
                })?;
                entries.insert(e.key, e.reply);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            write_lock: Mutex::new(()),
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `reply` under `key`. Re-appending an identical pair is a no-op.
    pub fn append(&self, key: &str, req: &ChatRequest, reply: &str) -> Result<()> {
        let _guard = self.write_lock.lock().expect("cache write lock");
        if self.get(key).as_deref() == Some(reply) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            let entry = CacheEntry {
                key: key.to_string(),
                request_summary: summarize(req),
                reply: reply.to_string(),
                timestamp: chrono::Utc::now().to_rfc3339(),
            };
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.write_all(line.as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(key.to_string(), reply.to_string());
        Ok(())
    }
}

fn summarize(req: &ChatRequest) -> String {
    let text: String = req.last_user().chars().take(160).collect();
    format!(
        "{}/{} t={} {}",
        req.provider, req.model, req.temperature, text
    )
}

/// Canned reply: chosen when every `contains` fragment occurs in the last
/// user message. Repetition `i` receives `replies[i % len]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub contains: Vec<String>,
    pub replies: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockTable {
    pub entries: Vec<MockEntry>,
}

impl MockTable {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The first entry whose fragments all match wins.
    pub fn lookup(&self, req: &ChatRequest, repetition: u64) -> Option<&str> {
        let user = req.last_user();
        self.entries
            .iter()
            .find(|e| !e.replies.is_empty() && e.contains.iter().all(|c| user.contains(c.as_str())))
            .map(|e| e.replies[(repetition % e.replies.len() as u64) as usize].as_str())
    }
}

pub struct Gateway {
    mode: LlmMode,
    cache: TranscriptCache,
    transport: Option<Box<dyn Transport>>,
    mock: MockTable,
    max_retries: u32,
    calls: AtomicU64,
}

impl Gateway {
    pub fn mock(table: MockTable) -> Self {
        Self {
            mode: LlmMode::Mock,
            cache: TranscriptCache::in_memory(),
            transport: None,
            mock: table,
            max_retries: 0,
            calls: AtomicU64::new(0),
        }
    }

    pub fn replay(cache: TranscriptCache) -> Self {
        Self {
            mode: LlmMode::Replay,
            cache,
            transport: None,
            mock: MockTable::default(),
            max_retries: 0,
            calls: AtomicU64::new(0),
        }
    }

    /// `Live` or `Record` over an explicit transport.
    pub fn with_transport(
        mode: LlmMode,
        cache: TranscriptCache,
        transport: Box<dyn Transport>,
        max_retries: u32,
    ) -> Self {
        Self {
            mode,
            cache,
            transport: Some(transport),
            mock: MockTable::default(),
            max_retries,
            calls: AtomicU64::new(0),
        }
    }

    /// Replay and record modes may also be given a transport; replay never uses it.
    pub fn with_mode(
        mode: LlmMode,
        cache: TranscriptCache,
        transport: Option<Box<dyn Transport>>,
    ) -> Self {
        Self {
            mode,
            cache,
            transport,
            mock: MockTable::default(),
            max_retries: 2,
            calls: AtomicU64::new(0),
        }
    }

    pub fn mode(&self) -> LlmMode {
        self.mode
    }

    pub fn cache(&self) -> &TranscriptCache {
        &self.cache
    }

    /// Number of replies served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn chat(&self, req: &ChatRequest, repetition: u64) -> Result<String> {
        req.validate()?;
        let reply = match self.mode {
            LlmMode::Mock => self
                .mock
                .lookup(req, repetition)
                .map(str::to_string)
                .ok_or_else(|| {
                    Error::CacheMiss(format!("no canned reply for {:?}", summarize(req)))
                })?,
            LlmMode::Replay => {
                let key = repetition_key(req, repetition);
                self.cache
                    .get(&key)
                    .ok_or_else(|| Error::CacheMiss(format!("{key} ({})", summarize(req))))?
            }
            LlmMode::Live => self.send(req)?,
            LlmMode::Record => {
                let key = repetition_key(req, repetition);
                let reply = self.send(req)?;
                self.cache.append(&key, req, &reply)?;
                reply
            }
        };
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(reply)
    }

    fn send(&self, req: &ChatRequest) -> Result<String> {
        let t = self
            .transport
            .as_ref()
            .ok_or_else(|| Error::Config("live llm mode without a transport".into()))?;
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            match t.send(req) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::warn!("llm attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Transport {
            retries: self.max_retries,
            message: last,
        })
    }
}
