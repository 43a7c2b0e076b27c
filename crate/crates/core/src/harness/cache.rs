use std::any::Any;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::error::Result;

/// Memoised stage outputs keyed by a content hash of their inputs.
///
/// Entries live in memory for the lifetime of the cache and, when a
/// directory is configured, on disk as `<stage>-<key>.json`. A file that
/// fails to load (version or hash checks included) is recomputed and
/// overwritten.
#[derive(Default)]
pub struct StageCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Arc<dyn Any + Send + Sync>>>,
    log: Mutex<Vec<CacheEvent>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CacheEvent {
    Memory(String),
    Disk(String),
    Computed(String),
}

/// Stable key for `stage` over serialisable inputs.
pub fn stage_key<T: serde::Serialize + ?Sized>(stage: &str, inputs: &T) -> String {
    crate::content_hash(&(stage, inputs))
}

impl StageCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            ..Self::default()
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn events(&self) -> Vec<CacheEvent> {
        self.log.lock().unwrap().clone()
    }

    fn path(&self, stage: &str, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{stage}-{}.json", &key[..16])))
    }

    pub fn get_or_compute<T: Send + Sync + 'static>(
        &self,
        stage: &str,
        key: &str,
        load: impl FnOnce(&Path) -> Result<T>,
        save: impl FnOnce(&T, &Path) -> Result<()>,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<Arc<T>> {
        let id = format!("{stage}:{key}");
        if let Some(hit) = self.memory.lock().unwrap().get(&id).cloned() {
            if let Ok(v) = hit.downcast::<T>() {
                self.log.lock().unwrap().push(CacheEvent::Memory(stage.into()));
                return Ok(v);
            }
        }
        let path = self.path(stage, key);
        let mut loaded = None;
        if let Some(p) = path.as_deref().filter(|p| p.exists()) {
            loaded = load(p).ok();
        }
        let value = match loaded {
            Some(v) => {
                self.log.lock().unwrap().push(CacheEvent::Disk(stage.into()));
                Arc::new(v)
            }
            None => {
                let v = compute()?;
                if let Some(p) = path {
                    std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
                    save(&v, &p)?;
                }
                self.log.lock().unwrap().push(CacheEvent::Computed(stage.into()));
                Arc::new(v)
            }
        };
        self.memory.lock().unwrap().insert(id, value.clone());
        Ok(value)
    }
}

/// JSON load/save pair for plain serialisable artifacts.
pub fn json_load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn json_save<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(value)?)?;
    Ok(())
}
