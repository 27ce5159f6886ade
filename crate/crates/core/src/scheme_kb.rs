//! Argumentation schemes with definitions and template critical questions.
//!
//! The default template set, `walton-table6`, is compiled into the binary from
//! `data/walton-table6.json`. Alternate sets with the same JSON layout can be
//! loaded at runtime and registered in a [`KnowledgeBase`] next to it.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of the bundled template set.
pub const DEFAULT_SET_ID: &str = "walton-table6";

const BUNDLED_JSON: &str = include_str!("../data/walton-table6.json");

#[derive(Debug, Error)]
pub enum KbError {
    #[error("unknown scheme '{name}' in template set '{set_id}'; nearest: {}", .nearest.join(", "))]
    UnknownScheme { set_id: String, name: String, nearest: Vec<String> },
    #[error("unknown template set '{0}'")]
    UnknownSet(String),
    #[error("duplicate scheme name '{0}'")]
    DuplicateName(String),
    #[error("invalid template set: {0}")]
    Schema(String),
    #[error("cannot read template set {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeEntry {
    pub name: String,
    pub definition: String,
    #[serde(rename = "templates")]
    pub template_questions: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TemplateSetFile {
    set_id: String,
    schemes: Vec<SchemeEntry>,
}

/// Lookup key for scheme names: lowercase alphanumerics only, so that
/// "Cause to effect", "cause  to effect" and "CauseToEffect" coincide.
pub fn scheme_key(name: &str) -> String {
    name.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

/// A named collection of schemes, kept in file order.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    set_id: String,
    entries: Vec<SchemeEntry>,
    index: HashMap<String, usize>,
}

impl TemplateSet {
    /// The bundled set of eighteen schemes.
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_JSON).expect("bundled template set is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, KbError> {
        let file: TemplateSetFile = serde_json::from_str(json).map_err(|e| KbError::Schema(e.to_string()))?;
        Self::new(file.set_id, file.schemes)
    }

    pub fn new(set_id: impl Into<String>, entries: Vec<SchemeEntry>) -> Result<Self, KbError> {
        let set_id = set_id.into();
        if set_id.trim().is_empty() {
            return Err(KbError::Schema("set_id is empty".into()));
        }
        let mut index = HashMap::new();
        for (i, entry) in entries.iter().enumerate() {
            let key = scheme_key(&entry.name);
            if key.is_empty() {
                return Err(KbError::Schema(format!("scheme #{i} has an empty name")));
            }
            if entry.definition.trim().is_empty() {
                return Err(KbError::Schema(format!("scheme '{}' has an empty definition", entry.name)));
            }
            if entry.template_questions.is_empty() {
                return Err(KbError::Schema(format!("scheme '{}' has no template questions", entry.name)));
            }
            if let Some(q) = entry.template_questions.iter().find(|q| !q.trim_end().ends_with('?')) {
                return Err(KbError::Schema(format!(
                    "template question of '{}' does not end with '?': {q}",
                    entry.name
                )));
            }
            if index.insert(key, i).is_some() {
                return Err(KbError::DuplicateName(entry.name.clone()));
            }
        }
        Ok(Self { set_id, entries, index })
    }

    pub fn set_id(&self) -> &str {
        &self.set_id
    }

    pub fn entries(&self) -> &[SchemeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Case- and whitespace-insensitive lookup.
    pub fn lookup(&self, name: &str) -> Result<&SchemeEntry, KbError> {
        match self.index.get(&scheme_key(name)) {
            Some(&i) => Ok(&self.entries[i]),
            None => Err(KbError::UnknownScheme {
                set_id: self.set_id.clone(),
                name: name.to_owned(),
                nearest: self.nearest(name, 3),
            }),
        }
    }

    /// Canonical spelling of `name`, if it resolves.
    pub fn canonical_name(&self, name: &str) -> Option<&str> {
        self.index.get(&scheme_key(name)).map(|&i| self.entries[i].name.as_str())
    }

    fn nearest(&self, name: &str, limit: usize) -> Vec<String> {
        let key = scheme_key(name);
        let mut scored: Vec<(usize, &str)> =
            self.entries.iter().map(|e| (strsim::levenshtein(&key, &scheme_key(&e.name)), e.name.as_str())).collect();
        scored.sort();
        scored.into_iter().take(limit).map(|(_, n)| n.to_owned()).collect()
    }
}

/// Reads a template set from a JSON file.
pub fn load_template_set(path: impl AsRef<Path>) -> Result<TemplateSet, KbError> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
    TemplateSet::from_json(&json)
}

/// Registry of template sets addressable by id. Always contains the bundled set.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    sets: BTreeMap<String, TemplateSet>,
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        let mut sets = BTreeMap::new();
        sets.insert(DEFAULT_SET_ID.to_owned(), TemplateSet::bundled());
        Self { sets }
    }
}

impl KnowledgeBase {
    /// Adds (or replaces) a set under its own id.
    pub fn register(&mut self, set: TemplateSet) {
        self.sets.insert(set.set_id.clone(), set);
    }

    pub fn load_and_register(&mut self, path: impl AsRef<Path>) -> Result<&TemplateSet, KbError> {
        let set = load_template_set(path)?;
        let id = set.set_id.clone();
        self.register(set);
        Ok(&self.sets[&id])
    }

    pub fn set(&self, set_id: &str) -> Result<&TemplateSet, KbError> {
        self.sets.get(set_id).ok_or_else(|| KbError::UnknownSet(set_id.to_owned()))
    }

    pub fn lookup(&self, set_id: &str, scheme_name: &str) -> Result<&SchemeEntry, KbError> {
        self.set(set_id)?.lookup(scheme_name)
    }

    pub fn set_ids(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }
}
