use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct Entry {
    text: String,
}

/// Reply cache keyed by [`super::CompletionRequest::cache_key`]. With a
/// directory, each entry is persisted as `<dir>/<key>.json` so interrupted
/// runs can resume without repeating calls.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, String>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            mem: Mutex::new(HashMap::new()),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            mem: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn entry_path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> io::Result<Option<String>> {
        if let Some(t) = self.mem.lock().expect("cache poisoned").get(key) {
            return Ok(Some(t.clone()));
        }
        let Some(path) = self.entry_path(key) else {
            return Ok(None);
        };
        match fs::read_to_string(&path) {
            Ok(s) => match serde_json::from_str::<Entry>(&s) {
                Ok(e) => {
                    self.mem
                        .lock()
                        .expect("cache poisoned")
                        .insert(key.to_string(), e.text.clone());
                    Ok(Some(e.text))
                }
                Err(err) => {
                    // A torn write from a killed run; treat as a miss.
                    log::warn!("ignoring unreadable cache entry {}: {err}", path.display());
                    Ok(None)
                }
            },
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Stores an entry. Writes are serialized through the in-memory lock and
    /// land on disk via rename, so readers never see partial files.
    pub fn put(&self, key: &str, text: &str) -> io::Result<()> {
        let mut mem = self.mem.lock().expect("cache poisoned");
        if let Some(path) = self.entry_path(key) {
            let tmp = path.with_extension("json.tmp");
            let body = serde_json::to_string(&Entry { text: text.to_string() }).expect("cache entry serializes");
            fs::write(&tmp, body)?;
            fs::rename(&tmp, &path)?;
        }
        mem.insert(key.to_string(), text.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.mem.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
