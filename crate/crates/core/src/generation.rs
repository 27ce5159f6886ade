//! Questioner stage: prompt, parse, deduplicate, tag provenance.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{CorpusError, DigestedMap, Intervention};
use crate::gateway::{Gateway, GatewayError, GenParams};
use crate::prompting::{build_questioner_prompts, PromptError, PromptOrigin, SchemeMode, SchemeTag};
use crate::scheme_kb::TemplateSet;
use crate::text::{dedup_key, normalize_whitespace};

/// Candidates longer than this many characters are dropped.
pub const MAX_QUESTION_CHARS: usize = 500;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("no questions could be parsed from the completion")]
    NoQuestions,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("every questioner prompt failed; last error: {0}")]
    AllPromptsFailed(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    File(#[from] CorpusError),
    #[error("candidates file: {0}")]
    Format(String),
}

/// Whether a candidate came from a prompt with scheme information.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CandidateOrigin {
    NoScheme,
    Scheme(SchemeTag),
}

impl CandidateOrigin {
    pub fn is_scheme(&self) -> bool {
        matches!(self, Self::Scheme(_))
    }
}

impl fmt::Display for CandidateOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoScheme => f.write_str("no-scheme"),
            Self::Scheme(SchemeTag::All) => f.write_str("scheme:all"),
            Self::Scheme(SchemeTag::Named(n)) => write!(f, "scheme:{n}"),
        }
    }
}

impl FromStr for CandidateOrigin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no-scheme" => Ok(Self::NoScheme),
            "scheme:all" => Ok(Self::Scheme(SchemeTag::All)),
            _ => match s.strip_prefix("scheme:") {
                Some(name) if !name.is_empty() => Ok(Self::Scheme(SchemeTag::Named(name.to_owned()))),
                _ => Err(format!("invalid origin '{s}'")),
            },
        }
    }
}

impl Serialize for CandidateOrigin {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CandidateOrigin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateQuestion {
    pub text: String,
    pub origin: CandidateOrigin,
    pub prompt_index: usize,
    pub line_index: usize,
    pub run_id: u32,
}

/// Candidates for one intervention and run; texts are unique up to case and spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub intervention_id: String,
    pub run_id: u32,
    pub candidates: Vec<CandidateQuestion>,
    pub warnings: Vec<String>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.text.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedQuestions {
    pub questions: Vec<String>,
    pub warnings: Vec<String>,
}

fn marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+[\.\)]|[-*•]|Q\d+:)\s*").unwrap())
}

/// Splits a completion into questions, one per line.
///
/// Enumeration markers (`1.`, `2)`, `-`, `*`, `•`, `Q3:`) are stripped and
/// whitespace collapsed. Lines that do not end in `?` are dropped with a
/// warning; a count different from `expected_n` is also reported.
pub fn parse_questions(raw: &str, expected_n: usize) -> Result<ParsedQuestions, GenerationError> {
    let mut out = ParsedQuestions::default();
    for line in raw.lines() {
        let stripped = marker().replace(line, "");
        let q = normalize_whitespace(&stripped);
        if q.is_empty() {
            continue;
        }
        if q.ends_with('?') {
            out.questions.push(q);
        } else {
            out.warnings.push(format!("dropped non-question line: {q}"));
        }
    }
    if out.questions.is_empty() {
        return Err(GenerationError::NoQuestions);
    }
    if out.questions.len() != expected_n {
        out.warnings.push(format!("expected {expected_n} questions, parsed {}", out.questions.len()));
    }
    Ok(out)
}

fn origin_for(prompt: &PromptOrigin, line: usize) -> CandidateOrigin {
    match prompt {
        PromptOrigin::NoScheme => CandidateOrigin::NoScheme,
        PromptOrigin::Scheme(tag) => CandidateOrigin::Scheme(tag.clone()),
        PromptOrigin::Split { without } if line < *without => CandidateOrigin::NoScheme,
        PromptOrigin::Split { .. } => CandidateOrigin::Scheme(SchemeTag::All),
    }
}

/// Runs the questioner prompts for one intervention, in order, and pools the
/// answers. Failed prompts become warnings as long as one prompt succeeds.
pub fn generate_candidates(
    gateway: &Gateway,
    params: &GenParams,
    intervention: &Intervention,
    mode: SchemeMode,
    n: usize,
    templates: &TemplateSet,
    run_id: u32,
) -> Result<CandidatePool, GenerationError> {
    let prompts = build_questioner_prompts(intervention, mode, n, templates)?;
    let mut pool = CandidatePool {
        intervention_id: intervention.intervention_id.clone(),
        run_id,
        candidates: Vec::new(),
        warnings: prompts.warnings,
    };
    let mut seen = HashSet::new();
    let mut succeeded = 0;
    let mut last_error = None;

    for (prompt_index, prompt) in prompts.prompts.iter().enumerate() {
        let parsed = gateway
            .generate(params, &prompt.text)
            .map_err(GenerationError::from)
            .and_then(|raw| parse_questions(&raw, prompt.expected));
        let parsed = match parsed {
            Ok(p) => p,
            Err(e) => {
                pool.warnings.push(format!("prompt {prompt_index} failed: {e}"));
                last_error = Some(e.to_string());
                continue;
            }
        };
        succeeded += 1;
        pool.warnings.extend(parsed.warnings.into_iter().map(|w| format!("prompt {prompt_index}: {w}")));

        let mut questions = parsed.questions;
        if questions.len() > prompt.expected {
            pool.warnings.push(format!(
                "prompt {prompt_index}: kept the first {} of {} questions",
                prompt.expected,
                questions.len()
            ));
            questions.truncate(prompt.expected);
        }
        for (line_index, text) in questions.into_iter().enumerate() {
            if text.chars().count() > MAX_QUESTION_CHARS {
                pool.warnings
                    .push(format!("prompt {prompt_index}: dropped question over {MAX_QUESTION_CHARS} characters"));
                continue;
            }
            if !seen.insert(dedup_key(&text)) {
                pool.warnings.push(format!("prompt {prompt_index}: collapsed duplicate: {text}"));
                continue;
            }
            pool.candidates.push(CandidateQuestion {
                text,
                origin: origin_for(&prompt.origin, line_index),
                prompt_index,
                line_index,
                run_id,
            });
        }
    }
    if succeeded == 0 {
        return Err(GenerationError::AllPromptsFailed(last_error.unwrap_or_default()));
    }
    Ok(pool)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateRecord {
    id: usize,
    cq: String,
    origin: CandidateOrigin,
    run: u32,
    prompt_index: usize,
    line_index: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WarningRecord {
    run: u32,
    message: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateEntry {
    intervention: String,
    cqs: Vec<CandidateRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<WarningRecord>,
}

/// Candidates file: submission JSON whose questions also carry `origin`,
/// `run`, `prompt_index` and `line_index`. Pools of several runs for the same
/// intervention share one entry. A digest, when given, is written first under
/// `config_digest`.
pub fn candidates_to_json(
    pools: &[CandidatePool],
    intervention_text: impl Fn(&str) -> String,
    digest: Option<&str>,
) -> String {
    let mut entries: Vec<(String, CandidateEntry)> = Vec::new();
    for pool in pools {
        let idx = match entries.iter().position(|(id, _)| *id == pool.intervention_id) {
            Some(i) => i,
            None => {
                let entry = CandidateEntry {
                    intervention: intervention_text(&pool.intervention_id),
                    cqs: Vec::new(),
                    warnings: Vec::new(),
                };
                entries.push((pool.intervention_id.clone(), entry));
                entries.len() - 1
            }
        };
        let entry = &mut entries[idx].1;
        for c in &pool.candidates {
            entry.cqs.push(CandidateRecord {
                id: entry.cqs.len(),
                cq: c.text.clone(),
                origin: c.origin.clone(),
                run: c.run_id,
                prompt_index: c.prompt_index,
                line_index: c.line_index,
            });
        }
        entry.warnings.extend(pool.warnings.iter().map(|m| WarningRecord { run: pool.run_id, message: m.clone() }));
    }
    let map = DigestedMap { digest: digest.map(str::to_owned), entries };
    serde_json::to_string_pretty(&map).expect("candidates serialize")
}

/// Pools plus `(intervention id, intervention text)` pairs, as read from a candidates file.
pub type CandidatesFile = (Vec<CandidatePool>, Vec<(String, String)>);

/// Pools (ordered by intervention, then run) and each intervention's text.
pub fn parse_candidates(json: &str) -> Result<CandidatesFile, GenerationError> {
    let map: DigestedMap<CandidateEntry> =
        serde_json::from_str(json).map_err(|e| GenerationError::Format(e.to_string()))?;
    let mut pools = Vec::new();
    let mut texts = Vec::new();
    for (id, entry) in map.entries {
        let mut by_run: BTreeMap<u32, CandidatePool> = BTreeMap::new();
        let empty = |run: u32| CandidatePool {
            intervention_id: id.clone(),
            run_id: run,
            candidates: Vec::new(),
            warnings: Vec::new(),
        };
        for rec in entry.cqs {
            by_run.entry(rec.run).or_insert_with(|| empty(rec.run)).candidates.push(CandidateQuestion {
                text: rec.cq,
                origin: rec.origin,
                prompt_index: rec.prompt_index,
                line_index: rec.line_index,
                run_id: rec.run,
            });
        }
        for w in entry.warnings {
            by_run.entry(w.run).or_insert_with(|| empty(w.run)).warnings.push(w.message);
        }
        pools.extend(by_run.into_values());
        texts.push((id, entry.intervention));
    }
    Ok((pools, texts))
}

pub fn write_candidates(
    path: impl AsRef<Path>,
    pools: &[CandidatePool],
    intervention_text: impl Fn(&str) -> String,
    digest: Option<&str>,
) -> Result<(), GenerationError> {
    let path = path.as_ref();
    fs::write(path, candidates_to_json(pools, intervention_text, digest))
        .map_err(|e| GenerationError::Format(format!("{}: {e}", path.display())))
}

pub fn read_candidates(path: impl AsRef<Path>) -> Result<CandidatesFile, GenerationError> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|e| GenerationError::Format(format!("{}: {e}", path.display())))?;
    parse_candidates(&json)
}
