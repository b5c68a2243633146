//! Append-only response cache.
//!
//! Responses are keyed by model, prompt hash, temperature, attempt number
//! and sample index, and persisted as JSONL so an interrupted run replays
//! every completed call for free.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub model_id: String,
    pub prompt_hash: String,
    /// Temperature as its shortest round-trip decimal string.
    pub temperature: String,
    pub attempt: u32,
    pub sample: u64,
}

impl CacheKey {
    pub fn new(model_id: &str, prompt_hash: &str, temperature: f64, attempt: u32, sample: u64) -> CacheKey {
        CacheKey {
            model_id: model_id.to_string(),
            prompt_hash: prompt_hash.to_string(),
            temperature: format!("{temperature:?}"),
            attempt,
            sample,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    #[serde(flatten)]
    key: CacheKey,
    response_text: String,
}

pub struct ResponseCache {
    entries: RwLock<HashMap<CacheKey, String>>,
    writer: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> ResponseCache {
        ResponseCache {
            entries: RwLock::new(HashMap::new()),
            writer: None,
            path: None,
        }
    }

    /// Opens (creating if needed) a JSONL cache file. Unreadable lines, such
    /// as a torn final line after a crash, are skipped.
    pub fn open(path: impl AsRef<Path>) -> io::Result<ResponseCache> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        entries.insert(l.key, l.response_text);
                    }
                    Err(e) => log::warn!("{}:{}: skipping cache line: {e}", path.display(), n + 1),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        // Terminate a torn trailing line so the next append starts clean.
        if file.metadata()?.len() > 0 {
            let text = std::fs::read(path)?;
            if text.last() != Some(&b'\n') {
                file.write_all(b"\n")?;
            }
        }
        Ok(ResponseCache {
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn get(&self, key: &CacheKey) -> Option<String> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn put(&self, key: CacheKey, response_text: &str) -> io::Result<()> {
        if let Some(writer) = &self.writer {
            let line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                response_text: response_text.to_string(),
            })?;
            let mut file = writer.lock().expect("cache writer lock");
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(key, response_text.to_string());
        Ok(())
    }

    /// Rewrites the file with one line per key in key order, so a finished
    /// run's cache does not depend on the order in which calls completed.
    pub fn compact(&self) -> io::Result<()> {
        let (Some(writer), Some(path)) = (&self.writer, &self.path) else {
            return Ok(());
        };
        let mut file = writer.lock().expect("cache writer lock");
        let entries = self.entries.read().expect("cache lock");
        let mut keys: Vec<&CacheKey> = entries.keys().collect();
        keys.sort();
        let mut text = String::new();
        for key in keys {
            let line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                response_text: entries[key].clone(),
            })?;
            text.push_str(&line);
            text.push('\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        *file = OpenOptions::new().append(true).open(path)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}
