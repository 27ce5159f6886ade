use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{ExpError, ExperimentConfig, SplitPart, StrategyKind};
use crate::corpus::{load_corpus, split_corpus, Corpus, DIGEST_KEY};
use crate::evaluation::{
    aggregate_runs, provenance_fraction, AggregateReport, EmbeddingCache, EvalConfig, EvalLabel, EvaluationOutcome,
    EvaluationReport, Evaluator, ProvenanceStats, ScoreReport,
};
use crate::gateway::{BackendDescriptor, BackendKind, Gateway};
use crate::generation::{generate_candidates, read_candidates, write_candidates, CandidatePool};
use crate::prompting::SchemeMode;
use crate::scheme_kb::{load_template_set, TemplateSet};
use crate::selection::{
    read_selections, select_judge, select_oracle, select_random, write_selections, JudgeOptions, SelectionResult,
};
use crate::text::fnv1a64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Skip stages whose output files exist with a matching digest.
    pub resume: bool,
}

/// One intervention that failed in one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub run: usize,
    pub stage: String,
    pub intervention_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    /// `judge`, `random` or `oracle`.
    pub strategy: StrategyKind,
    pub score: ScoreReport,
    pub provenance: ProvenanceStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub run: usize,
    pub seed: u64,
    /// Every candidate scored, without selection.
    pub candidates: ScoreReport,
    pub strategies: Vec<StrategyScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyAggregate {
    /// A strategy name, or `candidates` for the unselected pools.
    pub strategy: String,
    pub aggregate: AggregateReport,
    /// Pooled over runs.
    pub provenance: Option<ProvenanceStats>,
}

/// Results of an experiment, written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub name: Option<String>,
    pub corpus: String,
    pub n_interventions: usize,
    pub mode: SchemeMode,
    pub n: usize,
    pub k: usize,
    pub questioner_model: String,
    pub judge_model: Option<String>,
    pub eval: EvalConfig,
    pub runs: Vec<RunScores>,
    pub aggregate: Vec<StrategyAggregate>,
    pub ledger: Vec<LedgerEntry>,
    /// Generation and selection warnings across all runs.
    pub warnings: usize,
}

impl RunReport {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, ExpError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ExpError::io(path, e))
    }

    pub fn aggregate_for(&self, strategy: &str) -> Option<&AggregateReport> {
        self.aggregate.iter().find(|a| a.strategy == strategy).map(|a| &a.aggregate)
    }
}

/// Wall-clock seconds per stage, kept apart from the report so that reports
/// stay byte-identical between invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub config_digest: String,
    pub runs: Vec<Vec<(String, f64)>>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    /// `out_dir/<digest>`.
    pub dir: PathBuf,
    pub timings: Timings,
    /// Generation and embedding requests sent during this invocation.
    pub backend_calls: usize,
}

impl RunOutcome {
    /// 0 on a clean run, 2 when some interventions failed.
    pub fn exit_code(&self) -> i32 {
        if self.report.ledger.is_empty() {
            0
        } else {
            2
        }
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<(), ExpError> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, text).map_err(|e| ExpError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ExpError::io(path, e))
}

/// Applies `f` to every item on up to `workers` threads; results keep input order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Mock backends get a per-run seed so runs differ; HTTP backends are unchanged.
fn seeded(desc: &BackendDescriptor, run_seed: u64) -> BackendDescriptor {
    let mut d = desc.clone();
    if d.kind == BackendKind::Mock {
        d.seed = Some(d.seed.unwrap_or_default().wrapping_add(run_seed));
    }
    d
}

struct Stage<'a> {
    path: PathBuf,
    name: String,
    digest: &'a str,
}

impl Stage<'_> {
    fn reusable(&self, resume: bool, dirty: bool) -> bool {
        resume && !dirty && super::read_digest(&self.path).as_deref() == Some(self.digest)
    }
}

#[derive(Serialize, Deserialize)]
struct LedgerFile {
    config_digest: String,
    entries: Vec<LedgerEntry>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    corpus: &'a Corpus,
    templates: &'a TemplateSet,
    digest: &'a str,
    resume: bool,
}

impl Ctx<'_> {
    fn text_of(&self, id: &str) -> String {
        self.corpus.get(id).map(|i| i.text.clone()).unwrap_or_default()
    }

    fn check_failures(&self, run: usize, stage: &str, ledger: &[LedgerEntry]) -> Result<(), ExpError> {
        let failed = ledger.iter().filter(|e| e.run == run && e.stage == stage).count();
        let total = self.corpus.len();
        if total > 0 && failed as f64 / total as f64 > self.cfg.failure_threshold {
            return Err(ExpError::TooManyFailures { run, stage: stage.to_owned(), failed, total });
        }
        Ok(())
    }

    fn outcomes_report(&self, outcomes: Vec<EvaluationOutcome>) -> Result<EvaluationReport, ExpError> {
        let n = {
            let mut ids: Vec<&str> = outcomes.iter().map(|o| o.intervention_id.as_str()).collect();
            ids.dedup();
            ids.len()
        };
        let mut report = EvaluationReport::new(outcomes, n, &self.cfg.eval)?;
        report.config_digest = Some(self.digest.to_owned());
        Ok(report)
    }

    /// Labels question lists, one per intervention; failures go to the ledger.
    fn label(
        &self,
        evaluator: &Evaluator,
        items: &[(String, Vec<String>)],
        run: usize,
        stage: &str,
        ledger: &mut Vec<LedgerEntry>,
    ) -> Vec<EvaluationOutcome> {
        let results = par_map(items, self.cfg.concurrency, |(id, questions)| {
            let refs = &self.corpus.get(id).expect("known intervention").references;
            evaluator.label_batch(id, questions, refs)
        });
        let mut out = Vec::new();
        for ((id, _), r) in items.iter().zip(results) {
            match r {
                Ok(o) => out.extend(o),
                Err(e) => ledger.push(LedgerEntry {
                    run,
                    stage: stage.into(),
                    intervention_id: id.clone(),
                    message: e.to_string(),
                }),
            }
        }
        out
    }
}

/// Runs every stage of every run and writes the experiment directory.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome, ExpError> {
    cfg.validate()?;
    let templates = match &cfg.templates {
        Some(p) => load_template_set(p)?,
        None => TemplateSet::bundled(),
    };
    let full = load_corpus(&cfg.corpus, &templates)?;
    let corpus = match &cfg.split {
        None => full,
        Some(split) => {
            let (train, val, test) = split_corpus(&full, split.spec())?;
            match split.part {
                SplitPart::Train => train,
                SplitPart::Val => val,
                SplitPart::Test => test,
            }
        }
    };
    if corpus.is_empty() {
        return Err(ExpError::Config("the corpus (or selected split part) is empty".into()));
    }
    let digest = cfg.digest()?;
    let dir = cfg.out_dir.join(&digest);
    fs::create_dir_all(&dir).map_err(|e| ExpError::io(&dir, e))?;
    info!("experiment {digest}: {} interventions, writing to {}", corpus.len(), dir.display());

    let mut resolved = serde_json::to_value(cfg).expect("config serializes");
    resolved.as_object_mut().unwrap().insert(DIGEST_KEY.into(), digest.clone().into());
    write_atomic(&dir.join("config.json"), &serde_json::to_string_pretty(&resolved).unwrap())?;

    let cache = match &cfg.embedding_cache {
        Some(p) => EmbeddingCache::open(p).map_err(|e| ExpError::io(p, e))?,
        None => EmbeddingCache::in_memory(),
    };
    let embed_gw = Gateway::from_descriptor(&cfg.eval.embedding_backend, cfg.concurrency)?;
    let evaluator = Evaluator::new(&embed_gw, cfg.eval.clone(), &cache)?;
    let ctx = Ctx { cfg, corpus: &corpus, templates: &templates, digest: &digest, resume: opts.resume };

    let mut ledger = Vec::new();
    let mut runs = Vec::new();
    let mut timings = Vec::new();
    let mut warnings = 0;
    let mut backend_calls = 0;
    let mut selections_by_strategy: Vec<Vec<SelectionResult>> = vec![Vec::new(); cfg.strategies.len()];

    for (run, &seed) in cfg.run_seeds().iter().enumerate() {
        let run_dir = dir.join(format!("run{run}"));
        fs::create_dir_all(&run_dir).map_err(|e| ExpError::io(&run_dir, e))?;
        let q_gw = Gateway::from_descriptor(&seeded(cfg.questioner_backend()?, seed), cfg.concurrency)?;
        let j_gw = Gateway::from_descriptor(&seeded(cfg.judge_backend()?, seed), cfg.concurrency)?;
        let result = run_once(&ctx, &evaluator, &q_gw, &j_gw, run, seed, &run_dir, &mut ledger)?;
        backend_calls += q_gw.generate_calls() + j_gw.generate_calls();
        warnings += result.warnings;
        for (all, sel) in selections_by_strategy.iter_mut().zip(result.selections) {
            all.extend(sel);
        }
        runs.push(result.scores);
        timings.push(result.timings);
        cache.save().map_err(|e| ExpError::io(cache.path().unwrap_or(Path::new("cache")), e))?;
    }
    backend_calls += embed_gw.embed_calls();

    let mut aggregate = vec![StrategyAggregate {
        strategy: "candidates".into(),
        aggregate: aggregate_runs(&runs.iter().map(|r| r.candidates.clone()).collect::<Vec<_>>())?,
        provenance: None,
    }];
    for (i, kind) in cfg.strategies.iter().enumerate() {
        let scores: Vec<ScoreReport> = runs.iter().map(|r| r.strategies[i].score.clone()).collect();
        aggregate.push(StrategyAggregate {
            strategy: kind.as_str().into(),
            aggregate: aggregate_runs(&scores)?,
            provenance: Some(provenance_fraction(&selections_by_strategy[i])),
        });
    }

    let report = RunReport {
        config_digest: digest.clone(),
        name: cfg.name.clone(),
        corpus: corpus.name.clone(),
        n_interventions: corpus.len(),
        mode: cfg.mode,
        n: cfg.n,
        k: cfg.k,
        questioner_model: cfg.questioner.model.clone(),
        judge_model: cfg.judge.as_ref().map(|j| j.model.clone()),
        eval: cfg.eval.clone(),
        runs,
        aggregate,
        ledger,
        warnings,
    };
    write_atomic(&dir.join("report.json"), &serde_json::to_string_pretty(&report).unwrap())?;
    let timings = Timings { config_digest: digest, runs: timings };
    write_atomic(&dir.join("timings.json"), &serde_json::to_string_pretty(&timings).unwrap())?;
    if !report.ledger.is_empty() {
        warn!("{} intervention failures recorded in the ledger", report.ledger.len());
    }
    Ok(RunOutcome { report, dir, timings, backend_calls })
}

struct OneRun {
    scores: RunScores,
    selections: Vec<Vec<SelectionResult>>,
    timings: Vec<(String, f64)>,
    warnings: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_once(
    ctx: &Ctx,
    evaluator: &Evaluator,
    q_gw: &Gateway,
    j_gw: &Gateway,
    run: usize,
    seed: u64,
    run_dir: &Path,
    ledger: &mut Vec<LedgerEntry>,
) -> Result<OneRun, ExpError> {
    let cfg = ctx.cfg;
    let stage = |file: &str, name: &str| Stage { path: run_dir.join(file), name: name.to_owned(), digest: ctx.digest };
    let ledger_path = run_dir.join("ledger.json");
    let previous: Vec<LedgerEntry> = match fs::read_to_string(&ledger_path) {
        Ok(text) if ctx.resume => serde_json::from_str::<LedgerFile>(&text)
            .ok()
            .filter(|l| l.config_digest == ctx.digest)
            .map(|l| l.entries)
            .unwrap_or_default(),
        _ => Vec::new(),
    };
    let mut run_ledger: Vec<LedgerEntry> = Vec::new();
    let mut timings = Vec::new();
    let mut dirty = false;
    let mut warnings = 0;

    // A reused stage brings back its ledger entries; a rerun stage makes every later stage rerun too.
    let begin = |st: &Stage, run_ledger: &mut Vec<LedgerEntry>, dirty: &mut bool| -> bool {
        if st.reusable(ctx.resume, *dirty) {
            info!("run {run}: reusing {}", st.path.display());
            run_ledger.extend(previous.iter().filter(|e| e.stage == st.name).cloned());
            true
        } else {
            *dirty = true;
            false
        }
    };
    let save_ledger = |run_ledger: &[LedgerEntry]| {
        let file = LedgerFile { config_digest: ctx.digest.to_owned(), entries: run_ledger.to_vec() };
        write_atomic(&ledger_path, &serde_json::to_string_pretty(&file).unwrap())
    };

    // Generation.
    let t = Instant::now();
    let st = stage("candidates.json", "generate");
    let pools: Vec<CandidatePool> = if begin(&st, &mut run_ledger, &mut dirty) {
        read_candidates(&st.path)?.0
    } else {
        info!("run {run}: generating candidates");
        let params = cfg.questioner.params();
        let results = par_map(&ctx.corpus.interventions, cfg.concurrency, |i| {
            generate_candidates(q_gw, &params, i, cfg.mode, cfg.n, ctx.templates, run as u32)
        });
        let mut pools = Vec::new();
        for (i, r) in ctx.corpus.interventions.iter().zip(results) {
            match r {
                Ok(p) if p.is_empty() => run_ledger.push(LedgerEntry {
                    run,
                    stage: st.name.clone(),
                    intervention_id: i.intervention_id.clone(),
                    message: "no usable candidates".into(),
                }),
                Ok(p) => pools.push(p),
                Err(e) => run_ledger.push(LedgerEntry {
                    run,
                    stage: st.name.clone(),
                    intervention_id: i.intervention_id.clone(),
                    message: e.to_string(),
                }),
            }
        }
        write_candidates(&st.path, &pools, |id| ctx.text_of(id), Some(ctx.digest))?;
        save_ledger(&run_ledger)?;
        pools
    };
    warnings += pools.iter().map(|p| p.warnings.len()).sum::<usize>();
    ctx.check_failures(run, "generate", &run_ledger)?;
    timings.push(("generate".to_owned(), t.elapsed().as_secs_f64()));

    // Every candidate labeled: the unselected score and the oracle's input.
    let t = Instant::now();
    let st = stage("candidate_outcomes.json", "evaluate:candidates");
    let candidate_report = if begin(&st, &mut run_ledger, &mut dirty) {
        EvaluationReport::read(&st.path)?
    } else {
        let items: Vec<(String, Vec<String>)> = pools.iter().map(|p| (p.intervention_id.clone(), p.texts())).collect();
        let outcomes = ctx.label(evaluator, &items, run, &st.name, &mut run_ledger);
        let report = ctx.outcomes_report(outcomes)?;
        write_atomic(&st.path, &report.to_json())?;
        save_ledger(&run_ledger)?;
        report
    };
    ctx.check_failures(run, &st.name, &run_ledger)?;
    timings.push((st.name.clone(), t.elapsed().as_secs_f64()));

    let mut strategies = Vec::new();
    let mut all_selections = Vec::new();
    for &kind in &cfg.strategies {
        let t = Instant::now();
        let st = stage(&format!("selections_{}.json", kind.as_str()), &format!("select:{}", kind.as_str()));
        let selections: Vec<SelectionResult> = if begin(&st, &mut run_ledger, &mut dirty) {
            read_selections(&st.path)?
        } else {
            info!("run {run}: selecting with {}", kind.as_str());
            let results =
                par_map(&pools, cfg.concurrency, |pool| select_one(ctx, kind, pool, &candidate_report, j_gw, seed));
            let mut out = Vec::new();
            for (pool, r) in pools.iter().zip(results) {
                match r {
                    Ok(s) => out.push(s),
                    Err(e) => run_ledger.push(LedgerEntry {
                        run,
                        stage: st.name.clone(),
                        intervention_id: pool.intervention_id.clone(),
                        message: e.to_string(),
                    }),
                }
            }
            write_selections(&st.path, &out, |id| ctx.text_of(id), Some(ctx.digest))?;
            save_ledger(&run_ledger)?;
            out
        };
        warnings += selections.iter().map(|s| s.warnings.len()).sum::<usize>();
        ctx.check_failures(run, &st.name, &run_ledger)?;
        timings.push((st.name.clone(), t.elapsed().as_secs_f64()));

        let t = Instant::now();
        let st = stage(&format!("outcomes_{}.json", kind.as_str()), &format!("evaluate:{}", kind.as_str()));
        let report = if begin(&st, &mut run_ledger, &mut dirty) {
            EvaluationReport::read(&st.path)?
        } else {
            let items: Vec<(String, Vec<String>)> =
                selections.iter().map(|s| (s.intervention_id.clone(), s.texts())).collect();
            let outcomes = ctx.label(evaluator, &items, run, &st.name, &mut run_ledger);
            let report = ctx.outcomes_report(outcomes)?;
            write_atomic(&st.path, &report.to_json())?;
            save_ledger(&run_ledger)?;
            report
        };
        ctx.check_failures(run, &st.name, &run_ledger)?;
        timings.push((st.name.clone(), t.elapsed().as_secs_f64()));

        strategies.push(StrategyScore {
            strategy: kind,
            score: report.score(),
            provenance: provenance_fraction(&selections),
        });
        all_selections.push(selections);
    }
    save_ledger(&run_ledger)?;
    ledger.extend(run_ledger);

    Ok(OneRun {
        scores: RunScores { run, seed, candidates: candidate_report.score(), strategies },
        selections: all_selections,
        timings,
        warnings,
    })
}

fn select_one(
    ctx: &Ctx,
    kind: StrategyKind,
    pool: &CandidatePool,
    candidate_report: &EvaluationReport,
    j_gw: &Gateway,
    seed: u64,
) -> Result<SelectionResult, ExpError> {
    let cfg = ctx.cfg;
    let id = &pool.intervention_id;
    Ok(match kind {
        StrategyKind::Random => {
            // Distinct draws per intervention, reproducible from the run seed.
            select_random(pool, cfg.k, fnv1a64(&format!("{seed}\u{0}{id}")))?
        }
        StrategyKind::Judge => {
            let judge = cfg.judge.as_ref().expect("validated: judge configured");
            let opts = JudgeOptions {
                k: cfg.k,
                include_schemes: cfg.judge_includes_schemes,
                jaccard_threshold: cfg.jaccard_threshold,
            };
            let interv = ctx.corpus.get(id).expect("known intervention");
            select_judge(j_gw, &judge.params(), interv, pool, ctx.templates, opts)?
        }
        StrategyKind::Oracle => {
            let mut labels = vec![None; pool.len()];
            for o in candidate_report.per_question.iter().filter(|o| &o.intervention_id == id) {
                if let Some(slot) = labels.get_mut(o.slot) {
                    *slot = Some(o.label);
                }
            }
            let labels: Option<Vec<EvalLabel>> = labels.into_iter().collect();
            let labels = labels.ok_or_else(|| ExpError::Config(format!("no candidate labels for '{id}'")))?;
            select_oracle(pool, &labels, cfg.k)?
        }
    })
}
