//! Declarative experiments: configuration, the runner and result tables.
//!
//! An experiment is described by a TOML file (see [`ExperimentConfig`]). The
//! runner executes generate, select and evaluate for every run and writes all
//! intermediate files under `out_dir/<digest>/`, where the digest identifies
//! the resolved configuration together with the corpus and template contents.

mod runner;
mod table;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use runner::{
    run_experiment, LedgerEntry, RunOptions, RunOutcome, RunReport, RunScores, StrategyAggregate, StrategyScore,
    Timings,
};
pub use table::{render_table, Layout, RenderedTable};

use crate::corpus::{CorpusError, SplitSpec};
use crate::evaluation::{EvalConfig, EvalError};
use crate::gateway::{BackendDescriptor, GatewayError, GenParams};
use crate::generation::GenerationError;
use crate::prompting::SchemeMode;
use crate::scheme_kb::KbError;
use crate::selection::{SelectionError, DEFAULT_JACCARD_THRESHOLD, DEFAULT_K};
use crate::text::sha256_hex;

pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("run {run}, stage {stage}: {failed} of {total} interventions failed")]
    TooManyFailures { run: usize, stage: String, failed: usize, total: usize },
    #[error("reports use different evaluation settings: {0}")]
    MixedEvalConfig(String),
    #[error("strategy comparison needs reports of one configuration, got digests {0}")]
    MixedDigests(String),
}

impl ExpError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Random,
    Judge,
    Oracle,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Judge => "judge",
            Self::Oracle => "oracle",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "judge" => Ok(Self::Judge),
            "oracle" => Ok(Self::Oracle),
            _ => Err(format!("unknown strategy '{s}' (expected judge, random or oracle)")),
        }
    }
}

/// Which part of a split corpus an experiment runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default = "default_part")]
    pub part: SplitPart,
}

fn default_part() -> SplitPart {
    SplitPart::Test
}

impl SplitConfig {
    pub fn spec(&self) -> SplitSpec {
        SplitSpec { seed: self.seed, train: self.train, val: self.val, test: self.test }
    }
}

/// A model in one role (questioner or judge) and where it is served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    /// Defaults to the questioner's backend for the judge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendDescriptor>,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_timeout_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retries: Option<u32>,
}

impl RoleConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            backend: None,
            model: model.into(),
            temperature: None,
            max_tokens: None,
            request_timeout_secs: None,
            retries: None,
        }
    }

    pub fn params(&self) -> GenParams {
        let mut p = GenParams::new(self.model.clone());
        p.temperature = self.temperature;
        p.max_tokens = self.max_tokens;
        if let Some(t) = self.request_timeout_secs {
            p.request_timeout_secs = t;
        }
        if let Some(r) = self.retries {
            p.retries = r;
        }
        p
    }
}

/// Experiment description, read from TOML.
///
/// ```toml
/// corpus = "data/corpus.json"
/// out_dir = "runs"
/// mode = "both-single"
/// n = 4
/// k = 3
/// strategies = ["random", "judge", "oracle"]
/// seeds = [1, 2, 3]
///
/// [questioner]
/// model = "llama3.1:8b"
/// backend = { kind = "http", base_url = "http://localhost:11434" }
///
/// [judge]
/// model = "gemma2:9b"
///
/// [eval]
/// embedding_model = "nomic-embed-text"
/// embedding_backend = { kind = "http", base_url = "http://localhost:11434" }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form label shown in tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitConfig>,
    /// Template set file; the bundled set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    pub questioner: RoleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<RoleConfig>,
    #[serde(default = "default_mode")]
    pub mode: SchemeMode,
    pub n: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub eval: EvalConfig,
    #[serde(default = "default_true")]
    pub judge_includes_schemes: bool,
    #[serde(default = "default_jaccard")]
    pub jaccard_threshold: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_failure_threshold")]
    pub failure_threshold: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Persistent embedding cache shared across experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_cache: Option<PathBuf>,
}

fn default_mode() -> SchemeMode {
    SchemeMode::BothMerged
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_strategies() -> Vec<StrategyKind> {
    vec![StrategyKind::Judge]
}
fn default_true() -> bool {
    true
}
fn default_jaccard() -> f64 {
    DEFAULT_JACCARD_THRESHOLD
}
fn default_concurrency() -> usize {
    crate::gateway::DEFAULT_MAX_IN_FLIGHT
}
fn default_failure_threshold() -> f64 {
    DEFAULT_FAILURE_THRESHOLD
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Bundled pipeline setups: questioner generating 4 questions without and 4
/// with schemes in one prompt, a judge keeping 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Llama 3.1 8B questioner, Gemma 2 9B judge.
    Sub1,
    /// Llama 3.1 8B questioner, GPT-4o judge.
    Sub2,
    /// GPT-4o in both roles.
    Sub3,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sub1" => Ok(Self::Sub1),
            "sub2" => Ok(Self::Sub2),
            "sub3" => Ok(Self::Sub3),
            _ => Err(format!("unknown preset '{s}' (expected sub1, sub2 or sub3)")),
        }
    }
}

impl Preset {
    pub fn models(self) -> (&'static str, &'static str) {
        match self {
            Self::Sub1 => ("llama3.1:8b", "gemma2:9b"),
            Self::Sub2 => ("llama3.1:8b", "gpt-4o"),
            Self::Sub3 => ("gpt-4o", "gpt-4o"),
        }
    }

    /// Overwrites mode, counts, strategies and model names; backends and
    /// evaluation settings stay as configured.
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let (q, j) = self.models();
        cfg.mode = SchemeMode::BothSingle;
        cfg.n = 4;
        cfg.k = 3;
        cfg.strategies = vec![StrategyKind::Judge];
        cfg.questioner.model = q.to_owned();
        match &mut cfg.judge {
            Some(judge) => judge.model = j.to_owned(),
            None => cfg.judge = Some(RoleConfig::new(j)),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExpError> {
        toml::from_str(text).map_err(|e| ExpError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExpError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| ExpError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.corpus);
        resolve(&mut cfg.out_dir);
        if let Some(p) = &mut cfg.templates {
            resolve(p);
        }
        if let Some(p) = &mut cfg.embedding_cache {
            resolve(p);
        }
        for desc in
            [Some(&mut cfg.questioner), cfg.judge.as_mut()].into_iter().flatten().filter_map(|r| r.backend.as_mut())
        {
            if let Some(p) = &mut desc.fixture {
                resolve(p);
            }
        }
        Ok(cfg)
    }

    pub fn judge_role(&self) -> Option<&RoleConfig> {
        self.judge.as_ref()
    }

    pub fn questioner_backend(&self) -> Result<&BackendDescriptor, ExpError> {
        self.questioner.backend.as_ref().ok_or_else(|| ExpError::Config("questioner.backend is required".into()))
    }

    /// The judge's backend, falling back to the questioner's.
    pub fn judge_backend(&self) -> Result<&BackendDescriptor, ExpError> {
        match self.judge.as_ref().and_then(|j| j.backend.as_ref()) {
            Some(b) => Ok(b),
            None => self.questioner_backend(),
        }
    }

    /// Seeds of the runs, one per run.
    pub fn run_seeds(&self) -> Vec<u64> {
        match (&self.seeds, self.runs) {
            (Some(s), _) => s.clone(),
            (None, Some(r)) => (0..r as u64).collect(),
            (None, None) => vec![0],
        }
    }

    /// Fewest candidates a pool can have when every prompt succeeds.
    pub fn min_capacity(&self) -> usize {
        match self.mode {
            SchemeMode::BothMerged | SchemeMode::BothSingle => 2 * self.n,
            _ => self.n,
        }
    }

    pub fn validate(&self) -> Result<(), ExpError> {
        let err = |m: String| Err(ExpError::Config(m));
        if self.n == 0 {
            return err("n must be at least 1".into());
        }
        if self.k == 0 {
            return err("k must be at least 1".into());
        }
        if self.k > self.min_capacity() {
            return err(format!(
                "k = {} exceeds the {} candidates mode {} yields",
                self.k,
                self.min_capacity(),
                self.mode
            ));
        }
        if self.strategies.is_empty() {
            return err("at least one strategy is required".into());
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return err("strategies contain duplicates".into());
        }
        if self.strategies.contains(&StrategyKind::Judge) && self.judge.is_none() {
            return err("the judge strategy needs a [judge] section".into());
        }
        match (&self.seeds, self.runs) {
            (Some(s), Some(r)) if s.len() != r => return err(format!("runs = {r} but {} seeds given", s.len())),
            (Some(s), _) if s.is_empty() => return err("seeds is empty".into()),
            (None, Some(0)) => return err("runs must be at least 1".into()),
            _ => {}
        }
        if !(self.failure_threshold >= 0.0 && self.failure_threshold <= 1.0) {
            return err(format!("failure_threshold {} is outside [0, 1]", self.failure_threshold));
        }
        if !(0.0..=1.0).contains(&self.jaccard_threshold) {
            return err(format!("jaccard_threshold {} is outside [0, 1]", self.jaccard_threshold));
        }
        if self.concurrency == 0 {
            return err("concurrency must be at least 1".into());
        }
        self.questioner.params().validate()?;
        self.questioner_backend()?.validate()?;
        if let Some(j) = &self.judge {
            j.params().validate()?;
            self.judge_backend()?.validate()?;
        }
        self.eval.validate()?;
        self.eval.embedding_backend.validate()?;
        Ok(())
    }

    /// Digest of the resolved configuration plus the corpus and template file
    /// contents. Output locations (`out_dir`, `embedding_cache`) and the input
    /// paths themselves do not contribute.
    pub fn digest(&self) -> Result<String, ExpError> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        for key in ["out_dir", "embedding_cache", "corpus", "templates"] {
            obj.remove(key);
        }
        let file_hash =
            |p: &Path| -> Result<String, ExpError> { Ok(sha256_hex(&fs::read(p).map_err(|e| ExpError::io(p, e))?)) };
        obj.insert("corpus_sha256".into(), file_hash(&self.corpus)?.into());
        if let Some(t) = &self.templates {
            obj.insert("templates_sha256".into(), file_hash(t)?.into());
        }
        obj.insert("seeds_resolved".into(), serde_json::to_value(self.run_seeds()).unwrap());
        // serde_json maps are sorted by key, so this rendering is canonical.
        Ok(sha256_hex(value.to_string().as_bytes())[..16].to_owned())
    }
}

/// Reads the `config_digest` recorded at the top of an output file.
pub fn read_digest(path: impl AsRef<Path>) -> Option<String> {
    let text = fs::read_to_string(path).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    value.get(crate::corpus::DIGEST_KEY)?.as_str().map(str::to_owned)
}
