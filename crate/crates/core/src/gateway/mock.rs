use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, Provider, ProviderError};

/// One line of a mock script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    pub key: String,
    pub reply: String,
    /// The normalized prompt, kept only to make scripts readable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

/// Offline provider answering from a `prompt key -> reply` script. Every
/// request it sees is captured for later inspection.
#[derive(Default)]
pub struct MockProvider {
    replies: Mutex<HashMap<String, String>>,
    captured: Mutex<Vec<CompletionRequest>>,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = MockEntry>) -> Self {
        let m = Self::new();
        for e in entries {
            m.insert(e.key, e.reply);
        }
        m
    }

    /// Loads a line-delimited `{key, reply}` script.
    pub fn from_script(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: MockEntry = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            entries.push(e);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn insert(&self, key: impl Into<String>, reply: impl Into<String>) {
        self.replies
            .lock()
            .expect("mock poisoned")
            .insert(key.into(), reply.into());
    }

    /// Requests received so far, in arrival order.
    pub fn captured(&self) -> Vec<CompletionRequest> {
        self.captured.lock().expect("mock poisoned").clone()
    }
}

impl Provider for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        self.captured.lock().expect("mock poisoned").push(request.clone());
        let key = request.prompt_key();
        self.replies
            .lock()
            .expect("mock poisoned")
            .get(&key)
            .cloned()
            .ok_or(ProviderError::MockMiss { key })
    }
}

/// Provider backed by a closure; handy for responders that compute replies
/// from the prompt.
pub struct FnProvider<F>(F);

impl<F> FnProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<String, ProviderError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self(f)
    }
}

impl<F> Provider for FnProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<String, ProviderError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        (self.0)(request)
    }
}

/// Collects exchanges so a live or scripted run can be replayed offline.
#[derive(Default)]
pub struct ScriptRecorder {
    entries: Mutex<Vec<MockEntry>>,
}

impl ScriptRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, request: &CompletionRequest, reply: &str) {
        let key = request.prompt_key();
        let mut entries = self.entries.lock().expect("recorder poisoned");
        if entries.iter().any(|e| e.key == key) {
            return;
        }
        entries.push(MockEntry {
            key,
            reply: reply.to_string(),
            prompt: Some(request.normalized_prompt()),
        });
    }

    /// Entries sorted by key, so the written script does not depend on the
    /// order concurrent calls completed in.
    pub fn entries(&self) -> Vec<MockEntry> {
        let mut v = self.entries.lock().expect("recorder poisoned").clone();
        v.sort_by(|a, b| a.key.cmp(&b.key));
        v
    }

    pub fn write(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut w = io::BufWriter::new(fs::File::create(path)?);
        for e in self.entries() {
            writeln!(w, "{}", serde_json::to_string(&e).expect("mock entry serializes"))?;
        }
        w.flush()
    }
}
