//! Intervention corpora, reference annotations and submission files.
//!
//! Corpus files are JSON objects keyed by intervention id:
//!
//! ```json
//! { "<id>": { "intervention": "...", "schemes": ["Bias"],
//!             "cqs": [ { "id": "r0", "cq": "...?", "label": "Useful" } ] } }
//! ```
//!
//! Loading trims and collapses whitespace in every text, resolves scheme names
//! against a [`TemplateSet`] (rewriting them to canonical spelling), assigns
//! `r<index>` to references without an id, and reports *all* validation
//! problems at once.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::marker::PhantomData;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::scheme_kb::{KbError, TemplateSet};
use crate::text::normalize_whitespace;

/// Most schemes a single intervention may carry.
pub const MAX_SCHEMES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotationLabel {
    Useful,
    Unhelpful,
    Invalid,
}

impl fmt::Display for AnnotationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Useful => "Useful",
            Self::Unhelpful => "Unhelpful",
            Self::Invalid => "Invalid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceQuestion {
    pub ref_id: String,
    pub text: String,
    pub label: AnnotationLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub intervention_id: String,
    pub speaker: Option<String>,
    pub text: String,
    /// Canonical scheme names.
    pub schemes: Vec<String>,
    pub references: Vec<ReferenceQuestion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub interventions: Vec<Intervention>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.interventions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interventions.is_empty()
    }

    pub fn get(&self, intervention_id: &str) -> Option<&Intervention> {
        self.interventions.iter().find(|i| i.intervention_id == intervention_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// One problem found while validating a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationIssue {
    pub intervention_id: String,
    pub problem: Problem,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    DuplicateId,
    EmptyText,
    IdMismatch(String),
    Field { key: String, message: String },
    EmptyReference { ref_id: String },
    DuplicateRefId(String),
    UnknownScheme { scheme: String, nearest: Vec<String> },
    TooManySchemes(usize),
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "intervention '{}': ", self.intervention_id)?;
        match &self.problem {
            Problem::DuplicateId => write!(f, "duplicate intervention id"),
            Problem::EmptyText => write!(f, "intervention text is empty"),
            Problem::IdMismatch(inner) => write!(f, "intervention_id field '{inner}' differs from key"),
            Problem::Field { key, message } => write!(f, "key '{key}': {message}"),
            Problem::EmptyReference { ref_id } => write!(f, "reference '{ref_id}' has empty text"),
            Problem::DuplicateRefId(id) => write!(f, "duplicate reference id '{id}'"),
            Problem::UnknownScheme { scheme, nearest } => {
                write!(f, "unknown scheme '{scheme}' (nearest: {})", nearest.join(", "))
            }
            Problem::TooManySchemes(n) => write!(f, "{n} schemes, at most {MAX_SCHEMES} allowed"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("corpus validation failed ({} problems):\n{}", .issues.len(), .issues.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    Validation { issues: Vec<ValidationIssue> },
    #[error("split sizes {train}+{val}+{test} exceed corpus size {total}")]
    SplitSize { train: usize, val: usize, test: usize, total: usize },
    #[error("intervention '{intervention_id}' has {found} questions, expected {expected}")]
    Arity { intervention_id: String, expected: usize, found: usize },
    #[error("submission file: {0}")]
    Submission(String),
}

impl CorpusError {
    fn parse(e: serde_json::Error) -> Self {
        Self::Parse { line: e.line(), column: e.column(), message: e.to_string() }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

/// JSON object read or written as an ordered list of entries. Duplicate keys
/// are kept, so that callers can report them instead of silently losing data.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedMap<V>(pub Vec<(String, V)>);

impl<'de, V: Deserialize<'de>> Deserialize<'de> for OrderedMap<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for EntriesVisitor<V> {
            type Value = OrderedMap<V>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some((k, v)) = map.next_entry::<String, V>()? {
                    out.push((k, v));
                }
                Ok(OrderedMap(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor(PhantomData))
    }
}

impl<V: Serialize> Serialize for OrderedMap<V> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

/// Key under which experiment outputs record their config digest.
pub const DIGEST_KEY: &str = "config_digest";

/// An [`OrderedMap`] optionally preceded by a `config_digest` string entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DigestedMap<V> {
    pub digest: Option<String>,
    pub entries: Vec<(String, V)>,
}

impl<'de, V: Deserialize<'de>> Deserialize<'de> for DigestedMap<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for EntriesVisitor<V> {
            type Value = DigestedMap<V>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = DigestedMap { digest: None, entries: Vec::new() };
                while let Some(k) = map.next_key::<String>()? {
                    if k == DIGEST_KEY {
                        out.digest = Some(map.next_value()?);
                    } else {
                        out.entries.push((k, map.next_value()?));
                    }
                }
                Ok(out)
            }
        }

        deserializer.deserialize_map(EntriesVisitor(PhantomData))
    }
}

impl<V: Serialize> Serialize for DigestedMap<V> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len() + self.digest.is_some() as usize))?;
        if let Some(d) = &self.digest {
            map.serialize_entry(DIGEST_KEY, d)?;
        }
        for (k, v) in &self.entries {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

/// Parses corpus JSON. `name` becomes [`Corpus::name`].
pub fn parse_corpus(name: &str, json: &str, schemes: &TemplateSet) -> Result<Corpus, CorpusError> {
    let raw: OrderedMap<Value> = serde_json::from_str(json).map_err(CorpusError::parse)?;
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    let mut interventions = Vec::with_capacity(raw.0.len());

    for (id, value) in raw.0 {
        if !seen.insert(id.clone()) {
            issues.push(ValidationIssue { intervention_id: id.clone(), problem: Problem::DuplicateId });
            continue;
        }
        let before = issues.len();
        let intervention = read_intervention(&id, &value, schemes, &mut issues);
        if issues.len() == before {
            interventions.push(intervention);
        }
    }

    if issues.is_empty() {
        Ok(Corpus { name: name.to_owned(), interventions })
    } else {
        Err(CorpusError::Validation { issues })
    }
}

const INTERVENTION_KEYS: &[&str] =
    &["intervention", "text", "intervention_id", "speaker", "schemes", "cqs", "references", "dataset"];
const REFERENCE_KEYS: &[&str] = &["id", "ref_id", "cq", "text", "question", "label"];

fn field_issue(id: &str, key: &str, message: String) -> ValidationIssue {
    ValidationIssue { intervention_id: id.to_owned(), problem: Problem::Field { key: key.to_owned(), message } }
}

fn read_intervention(
    id: &str,
    value: &Value,
    schemes: &TemplateSet,
    issues: &mut Vec<ValidationIssue>,
) -> Intervention {
    let mut out = Intervention {
        intervention_id: id.to_owned(),
        speaker: None,
        text: String::new(),
        schemes: Vec::new(),
        references: Vec::new(),
    };
    let Some(obj) = value.as_object() else {
        issues.push(field_issue(id, "", "expected an object".into()));
        return out;
    };
    for key in obj.keys() {
        if !INTERVENTION_KEYS.contains(&key.as_str()) {
            issues.push(field_issue(id, key, "unknown key".into()));
        }
    }

    match pick(obj, &["intervention", "text"]) {
        Some((_, Value::String(s))) => out.text = normalize_whitespace(s),
        Some((k, _)) => issues.push(field_issue(id, k, "expected a string".into())),
        None => issues.push(field_issue(id, "intervention", "missing".into())),
    }
    match obj.get("intervention_id") {
        None => {}
        Some(Value::String(s)) if s == id => {}
        Some(Value::String(s)) => {
            issues.push(ValidationIssue { intervention_id: id.to_owned(), problem: Problem::IdMismatch(s.clone()) })
        }
        Some(_) => issues.push(field_issue(id, "intervention_id", "expected a string".into())),
    }
    match obj.get("speaker") {
        None | Some(Value::Null) => {}
        Some(Value::String(s)) => out.speaker = Some(normalize_whitespace(s)).filter(|s| !s.is_empty()),
        Some(_) => issues.push(field_issue(id, "speaker", "expected a string".into())),
    }

    match obj.get("schemes") {
        None | Some(Value::Null) => {}
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                let Some(name) = item.as_str() else {
                    issues.push(field_issue(id, &format!("schemes[{i}]"), "expected a string".into()));
                    continue;
                };
                match schemes.lookup(name) {
                    Ok(entry) => {
                        if !out.schemes.contains(&entry.name) {
                            out.schemes.push(entry.name.clone());
                        }
                    }
                    Err(KbError::UnknownScheme { nearest, .. }) => issues.push(ValidationIssue {
                        intervention_id: id.to_owned(),
                        problem: Problem::UnknownScheme { scheme: name.to_owned(), nearest },
                    }),
                    Err(e) => issues.push(field_issue(id, &format!("schemes[{i}]"), e.to_string())),
                }
            }
        }
        Some(_) => issues.push(field_issue(id, "schemes", "expected an array".into())),
    }

    match pick(obj, &["cqs", "references"]) {
        None | Some((_, Value::Null)) => {}
        Some((key, Value::Array(items))) => {
            for (i, item) in items.iter().enumerate() {
                if let Some(r) = read_reference(id, key, i, item, issues) {
                    out.references.push(r);
                }
            }
        }
        Some((key, _)) => issues.push(field_issue(id, key, "expected an array".into())),
    }

    let has_text = matches!(pick(obj, &["intervention", "text"]), Some((_, Value::String(_))));
    if has_text && out.text.is_empty() {
        issues.push(ValidationIssue { intervention_id: id.to_owned(), problem: Problem::EmptyText });
    }
    if out.schemes.len() > MAX_SCHEMES {
        issues.push(ValidationIssue {
            intervention_id: id.to_owned(),
            problem: Problem::TooManySchemes(out.schemes.len()),
        });
    }
    let mut ref_ids = HashSet::new();
    for r in &out.references {
        if !ref_ids.insert(r.ref_id.as_str()) {
            issues.push(ValidationIssue {
                intervention_id: id.to_owned(),
                problem: Problem::DuplicateRefId(r.ref_id.clone()),
            });
        }
    }
    out
}

fn read_reference(
    id: &str,
    list_key: &str,
    index: usize,
    item: &Value,
    issues: &mut Vec<ValidationIssue>,
) -> Option<ReferenceQuestion> {
    let mut field = |key: &str, message: String| {
        issues.push(ValidationIssue {
            intervention_id: id.to_owned(),
            problem: Problem::Field { key: format!("{list_key}[{index}].{key}"), message },
        })
    };
    let Some(obj) = item.as_object() else {
        field("", "expected an object".into());
        return None;
    };
    let mut has_unknown = false;
    for key in obj.keys().filter(|k| !REFERENCE_KEYS.contains(&k.as_str())) {
        field(key, "unknown key".into());
        has_unknown = true;
    }
    let ref_id = match pick(obj, &["id", "ref_id"]) {
        None | Some((_, Value::Null)) => format!("r{index}"),
        Some((_, Value::String(s))) => s.trim().to_owned(),
        Some((_, Value::Number(n))) => n.to_string(),
        Some((k, _)) => {
            field(k, "expected a string or number".into());
            return None;
        }
    };
    let text = match pick(obj, &["cq", "text", "question"]) {
        Some((_, Value::String(s))) => normalize_whitespace(s),
        Some((k, _)) => {
            field(k, "expected a string".into());
            return None;
        }
        None => {
            field("cq", "missing".into());
            return None;
        }
    };
    let label = match obj.get("label") {
        Some(v) => match serde_json::from_value::<AnnotationLabel>(v.clone()) {
            Ok(l) => l,
            Err(_) => {
                field("label", format!("expected Useful, Unhelpful or Invalid, got {v}"));
                return None;
            }
        },
        None => {
            field("label", "missing".into());
            return None;
        }
    };
    if text.is_empty() {
        issues.push(ValidationIssue { intervention_id: id.to_owned(), problem: Problem::EmptyReference { ref_id } });
        return None;
    }
    if has_unknown {
        return None;
    }
    Some(ReferenceQuestion { ref_id, text, label })
}

fn pick<'a>(obj: &'a serde_json::Map<String, Value>, keys: &[&'static str]) -> Option<(&'static str, &'a Value)> {
    keys.iter().find_map(|&k| obj.get(k).map(|v| (k, v)))
}

/// Reads and validates a corpus file. The corpus is named after the file stem.
pub fn load_corpus(path: impl AsRef<Path>, schemes: &TemplateSet) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_corpus(&name, &json, schemes)
}

/// Writes a corpus back in canonical form.
pub fn corpus_to_json(corpus: &Corpus) -> String {
    #[derive(Serialize)]
    struct RefOut<'a> {
        id: &'a str,
        cq: &'a str,
        label: AnnotationLabel,
    }
    #[derive(Serialize)]
    struct EntryOut<'a> {
        intervention: &'a str,
        #[serde(skip_serializing_if = "Option::is_none")]
        speaker: Option<&'a str>,
        schemes: &'a [String],
        cqs: Vec<RefOut<'a>>,
    }
    let map = OrderedMap(
        corpus
            .interventions
            .iter()
            .map(|i| {
                let entry = EntryOut {
                    intervention: &i.text,
                    speaker: i.speaker.as_deref(),
                    schemes: &i.schemes,
                    cqs: i.references.iter().map(|r| RefOut { id: &r.ref_id, cq: &r.text, label: r.label }).collect(),
                };
                (i.intervention_id.clone(), entry)
            })
            .collect(),
    );
    serde_json::to_string_pretty(&map).expect("corpus serializes")
}

/// Seeded partition of a corpus into train/validation/test parts.
///
/// Intervention indices are shuffled with a ChaCha8 generator seeded from
/// `spec.seed`; each part keeps the original file order of its members.
/// The sizes may sum to less than the corpus; the remainder is left out.
pub fn split_corpus(corpus: &Corpus, spec: SplitSpec) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    let total = corpus.len();
    if spec.train + spec.val + spec.test > total {
        return Err(CorpusError::SplitSize { train: spec.train, val: spec.val, test: spec.test, total });
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let part = |name: &str, idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Corpus {
            name: format!("{}/{name}", corpus.name),
            interventions: idx.iter().map(|&i| corpus.interventions[i].clone()).collect(),
        }
    };
    let (train, rest) = order.split_at(spec.train);
    let (val, rest) = rest.split_at(spec.val);
    let test = &rest[..spec.test];
    Ok((part("train", train), part("val", val), part("test", test)))
}

/// One intervention's worth of generated questions in a submission file.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmissionEntry {
    pub intervention_id: String,
    pub intervention: String,
    pub questions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmissionQuestion {
    id: usize,
    cq: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmissionRecord {
    intervention: String,
    cqs: Vec<SubmissionQuestion>,
}

/// Renders submission JSON; every entry must carry exactly `k` questions.
pub fn submission_to_json(entries: &[SubmissionEntry], k: usize) -> Result<String, CorpusError> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.questions.len() != k {
            return Err(CorpusError::Arity {
                intervention_id: e.intervention_id.clone(),
                expected: k,
                found: e.questions.len(),
            });
        }
        let cqs = e.questions.iter().enumerate().map(|(id, cq)| SubmissionQuestion { id, cq: cq.clone() }).collect();
        out.push((e.intervention_id.clone(), SubmissionRecord { intervention: e.intervention.clone(), cqs }));
    }
    Ok(serde_json::to_string_pretty(&OrderedMap(out)).expect("submission serializes"))
}

pub fn save_generated(path: impl AsRef<Path>, entries: &[SubmissionEntry], k: usize) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let json = submission_to_json(entries, k)?;
    fs::write(path, json).map_err(|e| CorpusError::io(path, e))
}

pub fn parse_generated(json: &str) -> Result<Vec<SubmissionEntry>, CorpusError> {
    let map: OrderedMap<SubmissionRecord> = serde_json::from_str(json).map_err(CorpusError::parse)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(map.0.len());
    for (id, rec) in map.0 {
        if !seen.insert(id.clone()) {
            return Err(CorpusError::Submission(format!("duplicate intervention id '{id}'")));
        }
        for (pos, q) in rec.cqs.iter().enumerate() {
            if q.id != pos {
                return Err(CorpusError::Submission(format!(
                    "intervention '{id}': question at position {pos} has id {}",
                    q.id
                )));
            }
        }
        out.push(SubmissionEntry {
            intervention_id: id,
            intervention: rec.intervention,
            questions: rec.cqs.into_iter().map(|q| q.cq).collect(),
        });
    }
    Ok(out)
}

pub fn load_generated(path: impl AsRef<Path>) -> Result<Vec<SubmissionEntry>, CorpusError> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_generated(&json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kb() -> TemplateSet {
        TemplateSet::bundled()
    }

    fn sample() -> &'static str {
        r#"{
          "A1": { "intervention": "  We must   act\n now. ", "schemes": ["cause to effect", "Bias"],
                  "cqs": [ {"id": "a", "cq": "Is it  true?", "label": "Useful"},
                           {"id": "b", "cq": "Who says?", "label": "Invalid"} ] },
          "B2": { "intervention": "Prices rose.", "schemes": [], "cqs": [] }
        }"#
    }

    #[test]
    fn loads_and_normalizes() {
        let c = parse_corpus("s", sample(), &kb()).unwrap();
        assert_eq!(c.len(), 2);
        let a = &c.interventions[0];
        assert_eq!(a.intervention_id, "A1");
        assert_eq!(a.text, "We must act now.");
        assert_eq!(a.schemes, ["Cause to effect", "Bias"]);
        assert_eq!(a.references[0].text, "Is it true?");
        assert_eq!(a.references[1].label, AnnotationLabel::Invalid);
        assert_eq!(c.interventions[1].intervention_id, "B2");
    }

    #[test]
    fn preserves_file_order() {
        let json = r#"{"z": {"intervention": "z"}, "a": {"intervention": "a"}, "m": {"intervention": "m"}}"#;
        let c = parse_corpus("o", json, &kb()).unwrap();
        let ids: Vec<_> = c.interventions.iter().map(|i| i.intervention_id.as_str()).collect();
        assert_eq!(ids, ["z", "a", "m"]);
    }

    #[test]
    fn zero_references_is_valid() {
        let c = parse_corpus("one", r#"{"x": {"intervention": "Some text."}}"#, &kb()).unwrap();
        assert!(c.interventions[0].references.is_empty());
    }

    #[test]
    fn missing_ref_ids_are_positional() {
        let json = r#"{"x": {"intervention": "t", "cqs": [
            {"cq": "A?", "label": "Useful"}, {"id": 7, "cq": "B?", "label": "Unhelpful"}, {"cq": "C?", "label": "Invalid"}]}}"#;
        let c = parse_corpus("x", json, &kb()).unwrap();
        let ids: Vec<_> = c.interventions[0].references.iter().map(|r| r.ref_id.as_str()).collect();
        assert_eq!(ids, ["r0", "7", "r2"]);
    }

    #[test]
    fn field_name_variants_are_accepted() {
        let json = r#"{"x": {"text": "t", "references": [{"ref_id": "q", "text": "A?", "label": "Useful"}]}}"#;
        let c = parse_corpus("x", json, &kb()).unwrap();
        assert_eq!(c.interventions[0].references[0].ref_id, "q");
    }

    #[test]
    fn duplicate_id_is_named() {
        let json = r#"{"x": {"intervention": "a"}, "x": {"intervention": "b"}}"#;
        let err = parse_corpus("d", json, &kb()).unwrap_err();
        let CorpusError::Validation { issues } = err else { panic!() };
        assert_eq!(issues, vec![ValidationIssue { intervention_id: "x".into(), problem: Problem::DuplicateId }]);
    }

    #[test]
    fn every_offending_intervention_is_listed() {
        let json = r#"{
            "ok": {"intervention": "fine"},
            "bad1": {"intervention": "t", "schemes": ["Slippery slope"]},
            "bad2": {"intervention": "   "},
            "bad3": {"intervention": "t", "cqs": [{"cq": "A?", "label": "Great"}]},
            "bad4": {"intervention": "t", "colour": "red"},
            "bad5": {"intervention": "t", "cqs": [{"id": "a", "cq": "A?", "label": "Useful"}, {"id": "a", "cq": "B?", "label": "Useful"}]}
        }"#;
        let err = parse_corpus("v", json, &kb()).unwrap_err();
        let msg = err.to_string();
        let CorpusError::Validation { issues } = err else { panic!() };
        let ids: Vec<_> = issues.iter().map(|i| i.intervention_id.as_str()).collect();
        assert_eq!(ids, ["bad1", "bad2", "bad3", "bad4", "bad5"]);
        assert!(msg.contains("unknown scheme 'Slippery slope'"), "{msg}");
        assert!(matches!(&issues[0].problem, Problem::UnknownScheme { scheme, .. } if scheme == "Slippery slope"));
        assert_eq!(issues[1].problem, Problem::EmptyText);
        assert_eq!(issues[4].problem, Problem::DuplicateRefId("a".into()));
    }

    #[test]
    fn too_many_schemes() {
        let json = r#"{"x": {"intervention": "t", "schemes":
            ["Bias","Sign","Value","Analogy","Example","Alternatives","Consequences"]}}"#;
        let CorpusError::Validation { issues } = parse_corpus("x", json, &kb()).unwrap_err() else { panic!() };
        assert_eq!(issues[0].problem, Problem::TooManySchemes(7));
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_corpus("p", "{\n  \"x\": {\"intervention\": \"t\",}\n}", &kb()).unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_corpus("p", "[1,2]", &kb()), Err(CorpusError::Parse { .. })));
    }

    #[test]
    fn canonical_json_reloads_identically() {
        let c = parse_corpus("s", sample(), &kb()).unwrap();
        let again = parse_corpus("s", &corpus_to_json(&c), &kb()).unwrap();
        assert_eq!(c, again);
    }

    fn corpus_of(n: usize) -> Corpus {
        Corpus {
            name: "c".into(),
            interventions: (0..n)
                .map(|i| Intervention {
                    intervention_id: format!("i{i}"),
                    speaker: None,
                    text: format!("text {i}"),
                    schemes: vec![],
                    references: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn split_sizes_follow_spec() {
        let c = corpus_of(189);
        let (tr, va, te) = split_corpus(&c, SplitSpec { seed: 42, train: 74, val: 33, test: 79 }).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (74, 33, 79));
        // 74 + 33 + 79 = 186: three interventions land in no part.
        let mut seen: Vec<_> =
            [tr, va, te].iter().flat_map(|p| p.interventions.iter().map(|i| i.intervention_id.clone())).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 186);
    }

    #[test]
    fn degenerate_split() {
        let c = corpus_of(3);
        let (tr, va, te) = split_corpus(&c, SplitSpec { seed: 9, train: 3, val: 0, test: 0 }).unwrap();
        assert_eq!(tr.interventions, c.interventions);
        assert!(va.is_empty() && te.is_empty());
    }

    #[test]
    fn split_size_mismatch() {
        let c = corpus_of(5);
        assert!(matches!(
            split_corpus(&c, SplitSpec { seed: 0, train: 3, val: 2, test: 1 }),
            Err(CorpusError::SplitSize { total: 5, .. })
        ));
    }

    proptest! {
        #[test]
        fn split_is_a_deterministic_partition(n in 0usize..60, seed in any::<u64>(), a in 0usize..60, b in 0usize..60) {
            let train = a.min(n);
            let val = b.min(n - train);
            let spec = SplitSpec { seed, train, val, test: n - train - val };
            let c = corpus_of(n);
            let parts = split_corpus(&c, spec).unwrap();
            prop_assert_eq!(&parts, &split_corpus(&c, spec).unwrap());
            let mut ids: Vec<String> = [&parts.0, &parts.1, &parts.2]
                .iter()
                .flat_map(|p| p.interventions.iter().map(|i| i.intervention_id.clone()))
                .collect();
            prop_assert_eq!(ids.len(), n);
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
        }

        #[test]
        fn submission_round_trips_byte_for_byte(
            texts in proptest::collection::vec(proptest::collection::vec(".*", 3), 0..6)
        ) {
            let entries: Vec<SubmissionEntry> = texts
                .into_iter()
                .enumerate()
                .map(|(i, qs)| SubmissionEntry {
                    intervention_id: format!("id{i}"),
                    intervention: format!("intervention {i}"),
                    questions: qs,
                })
                .collect();
            let json = submission_to_json(&entries, 3).unwrap();
            prop_assert_eq!(parse_generated(&json).unwrap(), entries);
        }
    }

    #[test]
    fn submission_with_34_entries_has_102_records() {
        let entries: Vec<_> = (0..34)
            .map(|i| SubmissionEntry {
                intervention_id: format!("t{i}"),
                intervention: "x".into(),
                questions: vec!["A?".into(), "B?".into(), "C?".into()],
            })
            .collect();
        let json = submission_to_json(&entries, 3).unwrap();
        let v: Value = serde_json::from_str(&json).unwrap();
        let total: usize = v.as_object().unwrap().values().map(|e| e["cqs"].as_array().unwrap().len()).sum();
        assert_eq!(total, 102);
        assert_eq!(v["t0"]["cqs"][2]["id"], 2);
    }

    #[test]
    fn empty_submission_is_an_empty_map() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_generated(&path, &[], 3).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().trim(), "{}");
        assert!(load_generated(&path).unwrap().is_empty());
    }

    #[test]
    fn short_entry_is_an_arity_error() {
        let e = SubmissionEntry {
            intervention_id: "x".into(),
            intervention: "t".into(),
            questions: vec!["A?".into(), "B?".into()],
        };
        assert!(matches!(submission_to_json(&[e], 3), Err(CorpusError::Arity { expected: 3, found: 2, .. })));
    }
}
