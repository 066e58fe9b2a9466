//! On-disk response cache: one JSON file per content-digest key. Prompts are
//! stored verbatim so cached runs stay auditable. Writes go through a temp
//! file and rename, so concurrent readers never see partial entries and
//! last-writer-wins collisions are harmless (values are deterministic per
//! key at temperature 0).

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prompting::Prompt;

use super::{ClientError, DecodeParams, ModelResponse};

pub(super) fn cache_key(model_id: &str, params: &DecodeParams, prompt: &Prompt) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_id.as_bytes());
    hasher.update(b"\n");
    hasher.update(params.digest().as_bytes());
    hasher.update(b"\n");
    hasher.update(prompt.digest().as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model_id: String,
    params: DecodeParams,
    prompt: String,
    response: ModelResponse,
}

pub struct ResponseCache {
    dir: PathBuf,
    counter: AtomicU64,
}

impl ResponseCache {
    /// Open (creating if needed) a cache directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, ClientError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir,
            counter: AtomicU64::new(0),
        })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Look up a key. A corrupt entry logs a warning and reads as a miss.
    pub fn get(&self, key: &str) -> Option<ModelResponse> {
        let path = self.path_for(key);
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) => Some(entry.response),
            Err(e) => {
                warn!("{}: treating corrupt cache entry as a miss ({e})", ClientError::CacheCorrupt(key.to_string()));
                None
            }
        }
    }

    pub fn put(
        &self,
        key: &str,
        prompt_text: &str,
        params: &DecodeParams,
        response: &ModelResponse,
    ) -> Result<(), ClientError> {
        let entry = CacheEntry {
            model_id: response.model_id.clone(),
            params: params.clone(),
            prompt: prompt_text.to_string(),
            response: response.clone(),
        };
        let serial = self.counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(
            ".{key}.{}.{serial}.tmp",
            std::process::id()
        ));
        std::fs::write(&tmp, serde_json::to_vec(&entry).expect("entry serializes"))?;
        std::fs::rename(&tmp, self.path_for(key))?;
        Ok(())
    }
}
