use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use crate::gateway::{check_uniform_dim, EmbeddingVector, Gateway, GatewayError};
use crate::text::normalize_whitespace;

/// Embeddings keyed by `(model, whitespace-normalized text)`.
///
/// Readers share a lock; inserts take it exclusively. With a path attached the
/// cache is loaded at construction and written back by [`EmbeddingCache::save`].
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    map: RwLock<HashMap<(String, String), EmbeddingVector>>,
}

type OnDisk = BTreeMap<String, BTreeMap<String, EmbeddingVector>>;

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens a cache file; a missing file starts an empty cache.
    pub fn open(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        let mut map = HashMap::new();
        match fs::read_to_string(&path) {
            Ok(json) => {
                let disk: OnDisk =
                    serde_json::from_str(&json).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                for (model, entries) in disk {
                    for (text, v) in entries {
                        map.insert((model.clone(), text), v);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        Ok(Self { path: Some(path), map: RwLock::new(map) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, model: &str, text: &str) -> Option<EmbeddingVector> {
        self.map.read().unwrap().get(&(model.to_owned(), normalize_whitespace(text))).cloned()
    }

    pub fn insert(&self, model: &str, text: &str, v: EmbeddingVector) {
        self.map.write().unwrap().insert((model.to_owned(), normalize_whitespace(text)), v);
    }

    /// Vectors for `texts` in order, embedding only the texts not cached yet
    /// (in one gateway call, each distinct text once).
    pub fn embed_all(
        &self,
        gateway: &Gateway,
        model: &str,
        texts: &[String],
    ) -> Result<Vec<EmbeddingVector>, GatewayError> {
        let keys: Vec<String> = texts.iter().map(|t| normalize_whitespace(t)).collect();
        let mut missing: Vec<String> = Vec::new();
        {
            let map = self.map.read().unwrap();
            for k in &keys {
                if !map.contains_key(&(model.to_owned(), k.clone())) && !missing.contains(k) {
                    missing.push(k.clone());
                }
            }
        }
        if !missing.is_empty() {
            let vectors = gateway.embed(model, &missing)?;
            let mut map = self.map.write().unwrap();
            for (k, v) in missing.into_iter().zip(vectors) {
                map.insert((model.to_owned(), k), v);
            }
        }
        let map = self.map.read().unwrap();
        let out: Vec<EmbeddingVector> = keys.into_iter().map(|k| map[&(model.to_owned(), k)].clone()).collect();
        check_uniform_dim(&out)?;
        Ok(out)
    }

    /// Writes the cache to its file (via a temporary file and a rename).
    /// Does nothing for in-memory caches.
    pub fn save(&self) -> io::Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let mut disk = OnDisk::new();
        for ((model, text), v) in self.map.read().unwrap().iter() {
            disk.entry(model.clone()).or_default().insert(text.clone(), v.clone());
        }
        let json = serde_json::to_string(&disk).map_err(io::Error::other)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json)?;
        fs::rename(tmp, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use std::sync::Arc;

    fn texts(t: &[&str]) -> Vec<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn only_missing_texts_are_embedded() {
        let gw = Gateway::new(Arc::new(MockBackend::new(0))).recording();
        let cache = EmbeddingCache::in_memory();
        cache.embed_all(&gw, "m", &texts(&["a b", "c", "a  b"])).unwrap();
        assert_eq!(gw.embed_calls(), 1);
        assert_eq!(cache.len(), 2);
        let again = cache.embed_all(&gw, "m", &texts(&["c", "a b"])).unwrap();
        assert_eq!(gw.embed_calls(), 1);
        assert_eq!(again[1], cache.get("m", " a b ").unwrap());
        cache.embed_all(&gw, "other", &texts(&["c"])).unwrap();
        assert_eq!(gw.embed_calls(), 2);
    }

    #[test]
    fn persists_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/cache.json");
        let v = EmbeddingVector::new(vec![0.1, 1.0 / 3.0, -2.5e-17]).unwrap();
        let cache = EmbeddingCache::open(&path).unwrap();
        assert!(cache.is_empty());
        cache.insert("m", "hello world", v.clone());
        cache.save().unwrap();
        let back = EmbeddingCache::open(&path).unwrap();
        assert_eq!(back.get("m", "hello   world"), Some(v));
    }

    #[test]
    fn corrupt_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        fs::write(&path, "not json").unwrap();
        assert!(EmbeddingCache::open(&path).is_err());
    }
}
