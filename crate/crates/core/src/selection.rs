//! Reducing a candidate pool to the final `k` questions.
//!
//! Three strategies are available: an LLM judge, a seeded uniform draw, and a
//! label-aware oracle that gives the upper bound reachable by any selector.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DigestedMap, Intervention};
use crate::evaluation::EvalLabel;
use crate::gateway::{Gateway, GatewayError, GenParams};
use crate::generation::{parse_questions, CandidateOrigin, CandidatePool};
use crate::prompting::{build_judge_prompt, PromptError};
use crate::scheme_kb::TemplateSet;
use crate::text::{dedup_key, token_jaccard};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("candidate pool for '{0}' is empty")]
    EmptyPool(String),
    #[error("{labels} labels for {candidates} candidates")]
    LabelCount { labels: usize, candidates: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("selections file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SelectionStrategy {
    Judge { model: String },
    Random { seed: u64 },
    Oracle,
}

impl SelectionStrategy {
    /// Short name: `judge`, `random` or `oracle`.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Judge { .. } => "judge",
            Self::Random { .. } => "random",
            Self::Oracle => "oracle",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Judge { model } => write!(f, "judge({model})"),
            Self::Random { seed } => write!(f, "random({seed})"),
            Self::Oracle => f.write_str("oracle"),
        }
    }
}

/// Origin of a selected question, or `Unmatched` for judge lines that could
/// not be traced back to a candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Candidate(CandidateOrigin),
    Unmatched,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Candidate(o) => o.fmt(f),
            Self::Unmatched => f.write_str("unmatched"),
        }
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "unmatched" {
            return Ok(Self::Unmatched);
        }
        s.parse().map(Self::Candidate).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedQuestion {
    pub text: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub intervention_id: String,
    pub run_id: u32,
    pub selected: Vec<SelectedQuestion>,
    pub strategy: SelectionStrategy,
    pub judge_raw: Option<String>,
    pub warnings: Vec<String>,
}

impl SelectionResult {
    pub fn texts(&self) -> Vec<String> {
        self.selected.iter().map(|s| s.text.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JudgeOptions {
    pub k: usize,
    pub include_schemes: bool,
    pub jaccard_threshold: f64,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        Self { k: DEFAULT_K, include_schemes: true, jaccard_threshold: DEFAULT_JACCARD_THRESHOLD }
    }
}

/// Index of the candidate a judge line refers to: exact match on the
/// normalized text first, else the highest token Jaccard at or above
/// `threshold` (ties go to the lower index).
pub fn match_candidate(line: &str, candidates: &[String], threshold: f64) -> Option<usize> {
    let key = dedup_key(line);
    if let Some(i) = candidates.iter().position(|c| dedup_key(c) == key) {
        return Some(i);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let j = token_jaccard(line, c);
        if j >= threshold && best.is_none_or(|(_, b)| j > b) {
            best = Some((i, j));
        }
    }
    best.map(|(i, _)| i)
}

pub fn select_judge(
    gateway: &Gateway,
    params: &GenParams,
    intervention: &Intervention,
    pool: &CandidatePool,
    templates: &TemplateSet,
    opts: JudgeOptions,
) -> Result<SelectionResult, SelectionError> {
    if pool.is_empty() {
        return Err(SelectionError::EmptyPool(pool.intervention_id.clone()));
    }
    let texts = pool.texts();
    let prompt = build_judge_prompt(intervention, &texts, opts.k, opts.include_schemes, templates)?;
    let raw = gateway.generate(params, &prompt)?;
    let target = opts.k.min(pool.len());

    let mut result = SelectionResult {
        intervention_id: pool.intervention_id.clone(),
        run_id: pool.run_id,
        selected: Vec::with_capacity(target),
        strategy: SelectionStrategy::Judge { model: params.model.clone() },
        judge_raw: Some(raw.clone()),
        warnings: Vec::new(),
    };
    let mut taken = HashSet::new();

    match parse_questions(&raw, opts.k) {
        Ok(parsed) => {
            result.warnings.extend(parsed.warnings.into_iter().map(|w| format!("judge output: {w}")));
            for line in parsed.questions {
                if result.selected.len() == target {
                    result.warnings.push(format!("judge line beyond {target} ignored: {line}"));
                    continue;
                }
                // The judge's wording is kept; the match only supplies provenance.
                let (key, provenance) = match match_candidate(&line, &texts, opts.jaccard_threshold) {
                    Some(i) => (dedup_key(&texts[i]), Provenance::Candidate(pool.candidates[i].origin.clone())),
                    None => (dedup_key(&line), Provenance::Unmatched),
                };
                if taken.insert(key) {
                    result.selected.push(SelectedQuestion { text: line, provenance });
                } else {
                    result.warnings.push(format!("judge repeated a question: {line}"));
                }
            }
        }
        Err(_) => result.warnings.push("judge output had no parseable questions".into()),
    }

    if result.selected.len() < target {
        result.warnings.push(format!(
            "judge gave {} usable questions; filling {} from the pool",
            result.selected.len(),
            target - result.selected.len()
        ));
        for c in &pool.candidates {
            if result.selected.len() == target {
                break;
            }
            if taken.insert(dedup_key(&c.text)) {
                result.selected.push(SelectedQuestion {
                    text: c.text.clone(),
                    provenance: Provenance::Candidate(c.origin.clone()),
                });
            }
        }
    }
    Ok(result)
}

/// Uniform draw without replacement of `min(k, |pool|)` candidates, in draw order.
pub fn select_random(pool: &CandidatePool, k: usize, seed: u64) -> Result<SelectionResult, SelectionError> {
    if pool.is_empty() {
        return Err(SelectionError::EmptyPool(pool.intervention_id.clone()));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (drawn, _) = idx.partial_shuffle(&mut rng, k.min(pool.len()));
    Ok(from_indices(pool, drawn, SelectionStrategy::Random { seed }))
}

fn priority(label: EvalLabel) -> u8 {
    match label {
        EvalLabel::Useful => 0,
        EvalLabel::Unhelpful => 1,
        EvalLabel::Invalid => 2,
        EvalLabel::NotAbleToEvaluate => 3,
    }
}

/// Indices the oracle picks: by label priority Useful, Unhelpful, Invalid,
/// Not able to evaluate; pool order within a class.
pub fn oracle_order(labels: &[EvalLabel], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by_key(|&i| priority(labels[i]));
    idx.truncate(k);
    idx
}

/// Label-aware selection; `labels[i]` is the evaluator's label of candidate `i`.
pub fn select_oracle(pool: &CandidatePool, labels: &[EvalLabel], k: usize) -> Result<SelectionResult, SelectionError> {
    if pool.is_empty() {
        return Err(SelectionError::EmptyPool(pool.intervention_id.clone()));
    }
    if labels.len() != pool.len() {
        return Err(SelectionError::LabelCount { labels: labels.len(), candidates: pool.len() });
    }
    Ok(from_indices(pool, &oracle_order(labels, k), SelectionStrategy::Oracle))
}

fn from_indices(pool: &CandidatePool, idx: &[usize], strategy: SelectionStrategy) -> SelectionResult {
    SelectionResult {
        intervention_id: pool.intervention_id.clone(),
        run_id: pool.run_id,
        selected: idx
            .iter()
            .map(|&i| SelectedQuestion {
                text: pool.candidates[i].text.clone(),
                provenance: Provenance::Candidate(pool.candidates[i].origin.clone()),
            })
            .collect(),
        strategy,
        judge_raw: None,
        warnings: Vec::new(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectedRecord {
    id: usize,
    cq: String,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionEntry {
    intervention: String,
    cqs: Vec<SelectedRecord>,
    strategy: SelectionStrategy,
    run: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    judge_raw: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

/// Selections file: submission JSON with `provenance` per question plus the
/// strategy, run, raw judge output and warnings per intervention.
pub fn selections_to_json(
    results: &[SelectionResult],
    intervention_text: impl Fn(&str) -> String,
    digest: Option<&str>,
) -> String {
    let entries = results
        .iter()
        .map(|r| {
            let entry = SelectionEntry {
                intervention: intervention_text(&r.intervention_id),
                cqs: r
                    .selected
                    .iter()
                    .enumerate()
                    .map(|(id, s)| SelectedRecord { id, cq: s.text.clone(), provenance: s.provenance.clone() })
                    .collect(),
                strategy: r.strategy.clone(),
                run: r.run_id,
                judge_raw: r.judge_raw.clone(),
                warnings: r.warnings.clone(),
            };
            (r.intervention_id.clone(), entry)
        })
        .collect();
    let map = DigestedMap { digest: digest.map(str::to_owned), entries };
    serde_json::to_string_pretty(&map).expect("selections serialize")
}

pub fn parse_selections(json: &str) -> Result<Vec<SelectionResult>, SelectionError> {
    let map: DigestedMap<SelectionEntry> =
        serde_json::from_str(json).map_err(|e| SelectionError::Format(e.to_string()))?;
    Ok(map
        .entries
        .into_iter()
        .map(|(id, e)| SelectionResult {
            intervention_id: id,
            run_id: e.run,
            selected: e.cqs.into_iter().map(|r| SelectedQuestion { text: r.cq, provenance: r.provenance }).collect(),
            strategy: e.strategy,
            judge_raw: e.judge_raw,
            warnings: e.warnings,
        })
        .collect())
}

pub fn write_selections(
    path: impl AsRef<Path>,
    results: &[SelectionResult],
    intervention_text: impl Fn(&str) -> String,
    digest: Option<&str>,
) -> Result<(), SelectionError> {
    let path = path.as_ref();
    fs::write(path, selections_to_json(results, intervention_text, digest))
        .map_err(|e| SelectionError::Format(format!("{}: {e}", path.display())))
}

pub fn read_selections(path: impl AsRef<Path>) -> Result<Vec<SelectionResult>, SelectionError> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|e| SelectionError::Format(format!("{}: {e}", path.display())))?;
    parse_selections(&json)
}
