//! Similarity-threshold labeling of generated questions, scoring and statistics.
//!
//! Each generated question receives the label of its most similar reference
//! question (cosine similarity of embeddings), provided that similarity reaches
//! the threshold; otherwise it is "not able to evaluate".

mod cache;
mod stats;

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::EmbeddingCache;
pub use stats::{
    aggregate_runs, mcnemar_chi2, mcnemar_exact, mean_std, pair_outcomes, provenance_fraction, AggregateReport,
    McNemarInput, MeanStd, ProvenanceStats,
};

use crate::corpus::{AnnotationLabel, Corpus, ReferenceQuestion, SubmissionEntry};
use crate::gateway::{BackendDescriptor, EmbeddingVector, Gateway, GatewayError};

pub const DEFAULT_THRESHOLD: f64 = 0.6;

/// Similarity reported when there is no reference to compare against.
pub const NO_REFERENCE_SIMILARITY: f64 = -1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to score")]
    Empty,
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("outcomes are not aligned: {0}")]
    Misaligned(String),
    #[error("submission names unknown intervention '{0}'")]
    UnknownIntervention(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalLabel {
    Useful,
    Unhelpful,
    Invalid,
    NotAbleToEvaluate,
}

impl EvalLabel {
    pub const ALL: [EvalLabel; 4] = [Self::Useful, Self::Unhelpful, Self::Invalid, Self::NotAbleToEvaluate];
}

impl From<AnnotationLabel> for EvalLabel {
    fn from(l: AnnotationLabel) -> Self {
        match l {
            AnnotationLabel::Useful => Self::Useful,
            AnnotationLabel::Unhelpful => Self::Unhelpful,
            AnnotationLabel::Invalid => Self::Invalid,
        }
    }
}

impl fmt::Display for EvalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Useful => "Useful",
            Self::Unhelpful => "Unhelpful",
            Self::Invalid => "Invalid",
            Self::NotAbleToEvaluate => "not able to evaluate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutcome {
    pub intervention_id: String,
    /// Position of the question within its intervention's submission.
    pub slot: usize,
    pub question_text: String,
    pub label: EvalLabel,
    pub best_similarity: f64,
    pub best_ref_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub embedding_model: String,
    #[serde(default = "default_embedding_backend")]
    pub embedding_backend: BackendDescriptor,
    /// Require similarity strictly above the threshold.
    #[serde(default)]
    pub strict_gt: bool,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_embedding_backend() -> BackendDescriptor {
    BackendDescriptor::mock(0)
}

impl EvalConfig {
    pub fn new(embedding_model: impl Into<String>, embedding_backend: BackendDescriptor) -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            embedding_model: embedding_model.into(),
            embedding_backend,
            strict_gt: false,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(EvalError::Config(format!("threshold {} is outside (0, 1]", self.threshold)));
        }
        if self.embedding_model.trim().is_empty() {
            return Err(EvalError::Config("embedding model is required".into()));
        }
        Ok(())
    }

    /// Whether `similarity` is high enough to take the reference's label.
    pub fn passes(&self, similarity: f64) -> bool {
        if self.strict_gt {
            similarity > self.threshold
        } else {
            similarity >= self.threshold
        }
    }
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EvalError> {
    cosine_slices(u.values(), v.values())
}

fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::DimMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Label for a question given its similarity to each reference (same order).
/// The first maximum wins ties.
pub fn assign_label(
    similarities: &[f64],
    references: &[ReferenceQuestion],
    cfg: &EvalConfig,
) -> (EvalLabel, f64, Option<String>) {
    debug_assert_eq!(similarities.len(), references.len());
    let mut best: Option<usize> = None;
    for (i, &s) in similarities.iter().enumerate() {
        if best.is_none_or(|b| s > similarities[b]) {
            best = Some(i);
        }
    }
    match best {
        None => (EvalLabel::NotAbleToEvaluate, NO_REFERENCE_SIMILARITY, None),
        Some(i) if cfg.passes(similarities[i]) => {
            (references[i].label.into(), similarities[i], Some(references[i].ref_id.clone()))
        }
        Some(i) => (EvalLabel::NotAbleToEvaluate, similarities[i], None),
    }
}

/// Labels questions against references through an embedding backend.
///
/// Embeddings go through an [`EmbeddingCache`], so each distinct text is sent
/// to the backend at most once per model. A zero embedding (a text without
/// tokens under the mock backend) is treated as similarity 0.
pub struct Evaluator<'a> {
    gateway: &'a Gateway,
    cfg: EvalConfig,
    cache: &'a EmbeddingCache,
}

impl<'a> Evaluator<'a> {
    pub fn new(gateway: &'a Gateway, cfg: EvalConfig, cache: &'a EmbeddingCache) -> Result<Self, EvalError> {
        cfg.validate()?;
        Ok(Self { gateway, cfg, cache })
    }

    pub fn config(&self) -> &EvalConfig {
        &self.cfg
    }

    /// Labels one question. The outcome carries an empty intervention id and slot 0.
    pub fn label_question(
        &self,
        question: &str,
        references: &[ReferenceQuestion],
    ) -> Result<EvaluationOutcome, EvalError> {
        Ok(self.label_batch("", &[question.to_owned()], references)?.remove(0))
    }

    /// Labels the questions of one intervention; slots follow input order.
    pub fn label_batch(
        &self,
        intervention_id: &str,
        questions: &[String],
        references: &[ReferenceQuestion],
    ) -> Result<Vec<EvaluationOutcome>, EvalError> {
        if questions.is_empty() {
            return Ok(Vec::new());
        }
        let mut texts: Vec<String> = questions.to_vec();
        texts.extend(references.iter().map(|r| r.text.clone()));
        let vectors = self.cache.embed_all(self.gateway, &self.cfg.embedding_model, &texts)?;
        let (qv, rv) = vectors.split_at(questions.len());
        qv.iter()
            .zip(questions)
            .enumerate()
            .map(|(slot, (q, text))| {
                let sims = rv
                    .iter()
                    .map(|r| match cosine(q, r) {
                        Err(EvalError::ZeroVector) => Ok(0.0),
                        other => other,
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let (label, best_similarity, best_ref_id) = assign_label(&sims, references, &self.cfg);
                Ok(EvaluationOutcome {
                    intervention_id: intervention_id.to_owned(),
                    slot,
                    question_text: text.clone(),
                    label,
                    best_similarity,
                    best_ref_id,
                })
            })
            .collect()
    }

    /// Outcomes for every question of a submission, in submission order.
    pub fn evaluate_submission(
        &self,
        corpus: &Corpus,
        entries: &[SubmissionEntry],
    ) -> Result<Vec<EvaluationOutcome>, EvalError> {
        let mut out = Vec::new();
        for e in entries {
            let interv = corpus
                .get(&e.intervention_id)
                .ok_or_else(|| EvalError::UnknownIntervention(e.intervention_id.clone()))?;
            out.extend(self.label_batch(&e.intervention_id, &e.questions, &interv.references)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub useful: usize,
    pub unhelpful: usize,
    pub invalid: usize,
    pub not_able: usize,
}

impl LabelCounts {
    pub fn get(&self, label: EvalLabel) -> usize {
        match label {
            EvalLabel::Useful => self.useful,
            EvalLabel::Unhelpful => self.unhelpful,
            EvalLabel::Invalid => self.invalid,
            EvalLabel::NotAbleToEvaluate => self.not_able,
        }
    }

    pub fn total(&self) -> usize {
        self.useful + self.unhelpful + self.invalid + self.not_able
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub counts: LabelCounts,
    pub useful_pct: f64,
    pub unhelpful_pct: f64,
    pub invalid_pct: f64,
    pub not_able_pct: f64,
    pub n_questions: usize,
    pub n_interventions: usize,
    /// Percentage of questions labeled Useful; the task score.
    pub punctuation: f64,
}

/// Per-label percentages over all questions, not-able-to-evaluate included.
pub fn score(outcomes: &[EvaluationOutcome], n_interventions: usize) -> Result<ScoreReport, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = LabelCounts::default();
    for o in outcomes {
        match o.label {
            EvalLabel::Useful => counts.useful += 1,
            EvalLabel::Unhelpful => counts.unhelpful += 1,
            EvalLabel::Invalid => counts.invalid += 1,
            EvalLabel::NotAbleToEvaluate => counts.not_able += 1,
        }
    }
    let n = outcomes.len();
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    Ok(ScoreReport {
        counts,
        useful_pct: pct(counts.useful),
        unhelpful_pct: pct(counts.unhelpful),
        invalid_pct: pct(counts.invalid),
        not_able_pct: pct(counts.not_able),
        n_questions: n,
        n_interventions,
        punctuation: pct(counts.useful),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub useful_pct: f64,
    pub unhelpful_pct: f64,
    pub invalid_pct: f64,
    pub not_able_pct: f64,
    pub punctuation: f64,
    pub embedding_model: String,
    pub threshold: f64,
    pub strict_gt: bool,
    pub counts: LabelCounts,
    pub n_questions: usize,
    pub n_interventions: usize,
}

/// Evaluation report file: per-question outcomes plus a summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub per_question: Vec<EvaluationOutcome>,
    pub summary: ReportSummary,
}

impl EvaluationReport {
    pub fn new(outcomes: Vec<EvaluationOutcome>, n_interventions: usize, cfg: &EvalConfig) -> Result<Self, EvalError> {
        let s = score(&outcomes, n_interventions)?;
        Ok(Self {
            config_digest: None,
            per_question: outcomes,
            summary: ReportSummary {
                useful_pct: s.useful_pct,
                unhelpful_pct: s.unhelpful_pct,
                invalid_pct: s.invalid_pct,
                not_able_pct: s.not_able_pct,
                punctuation: s.punctuation,
                embedding_model: cfg.embedding_model.clone(),
                threshold: cfg.threshold,
                strict_gt: cfg.strict_gt,
                counts: s.counts,
                n_questions: s.n_questions,
                n_interventions: s.n_interventions,
            },
        })
    }

    pub fn score(&self) -> ScoreReport {
        let s = &self.summary;
        ScoreReport {
            counts: s.counts,
            useful_pct: s.useful_pct,
            unhelpful_pct: s.unhelpful_pct,
            invalid_pct: s.invalid_pct,
            not_able_pct: s.not_able_pct,
            n_questions: s.n_questions,
            n_interventions: s.n_interventions,
            punctuation: s.punctuation,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&json).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
    }
}
