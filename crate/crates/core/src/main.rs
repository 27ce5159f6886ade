use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cqforge::corpus::{load_corpus, parse_generated, SubmissionEntry};
use cqforge::evaluation::{
    mcnemar_chi2, mcnemar_exact, pair_outcomes, EmbeddingCache, EvalConfig, EvaluationReport, Evaluator,
};
use cqforge::expctl::{
    render_table, run_experiment, ExperimentConfig, Layout, Preset, RunOptions, RunReport, StrategyKind,
};
use cqforge::gateway::{BackendDescriptor, Gateway, GenParams, DEFAULT_MAX_IN_FLIGHT};
use cqforge::generation::{generate_candidates, read_candidates, write_candidates};
use cqforge::prompting::{build_judge_prompt, build_questioner_prompts, SchemeMode};
use cqforge::scheme_kb::{load_template_set, TemplateSet};
use cqforge::selection::{
    parse_selections, select_judge, select_oracle, select_random, write_selections, JudgeOptions, DEFAULT_K,
};

#[derive(Parser)]
#[command(name = "cqforge", version, about = "Critical question generation and evaluation")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the rendered questioner (or judge) prompts for one intervention.
    Prompt(PromptArgs),
    /// Generate candidate questions for every intervention of a corpus.
    Generate(GenerateArgs),
    /// Reduce candidate pools to k questions.
    Select(SelectArgs),
    /// Label a submission against the corpus references.
    Evaluate(EvaluateArgs),
    /// Exact McNemar test between two outcome files.
    Mcnemar(McnemarArgs),
    /// Run an experiment described by a TOML file.
    Experiment(ExperimentArgs),
    /// Tabulate experiment reports found under a directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    Http,
    Mock,
}

#[derive(Args)]
struct BackendArgs {
    /// Backend kind.
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendChoice,
    /// Base URL of an Ollama-compatible server (also read from CQFORGE_BASE_URL).
    #[arg(long, default_value = "http://localhost:11434")]
    base_url: String,
    /// Mock fixture file mapping prompt digests to responses.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Maximum concurrent backend requests.
    #[arg(long, default_value_t = DEFAULT_MAX_IN_FLIGHT)]
    concurrency: usize,
}

impl BackendArgs {
    fn descriptor(&self, seed: u64) -> BackendDescriptor {
        match self.backend {
            BackendChoice::Http => BackendDescriptor::http(self.base_url.clone()),
            BackendChoice::Mock => BackendDescriptor { fixture: self.fixture.clone(), ..BackendDescriptor::mock(seed) },
        }
    }

    fn gateway(&self, seed: u64) -> Result<Gateway> {
        Ok(Gateway::from_descriptor(&self.descriptor(seed), self.concurrency)?)
    }
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    intervention_id: String,
    #[arg(long, default_value = "both-merged")]
    mode: SchemeMode,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Render the judge prompt instead, over the pool in --candidates.
    #[arg(long)]
    judge: bool,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, requires = "judge")]
    candidates: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "both-merged")]
    mode: SchemeMode,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    model: String,
    #[arg(long)]
    temperature: Option<f64>,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    runs: u32,
    /// Seed of run 0; run i uses seed + i (mock backends only).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    strategy: StrategyKind,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Corpus the candidates were generated from.
    #[arg(long)]
    corpus: PathBuf,
    /// Which run's pools to select from.
    #[arg(long, default_value_t = 0)]
    run: u32,
    #[arg(long)]
    judge_model: Option<String>,
    /// Leave the scheme blocks out of the judge prompt.
    #[arg(long)]
    judge_without_schemes: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embedding model for the oracle's labels.
    #[arg(long)]
    embed_model: Option<String>,
    #[arg(long, default_value_t = 0.6)]
    threshold: f64,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Submission or selections file.
    #[arg(long)]
    submission: PathBuf,
    #[arg(long)]
    embed_model: String,
    #[arg(long, default_value_t = 0.6)]
    threshold: f64,
    /// Require similarity strictly above the threshold.
    #[arg(long)]
    strict_gt: bool,
    #[command(flatten)]
    backend: BackendArgs,
    /// Persistent embedding cache file.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct McnemarArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Also report the chi-square approximation with continuity correction.
    #[arg(long)]
    chi2: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    preset: Option<Preset>,
    /// Reuse completed stages of a previous invocation.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    mode: Option<SchemeMode>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment output directory (the config's out_dir).
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value = "strategy_compare")]
    layout: Layout,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn templates(path: &Option<PathBuf>) -> Result<TemplateSet> {
    Ok(match path {
        Some(p) => load_template_set(p)?,
        None => TemplateSet::bundled(),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a reader that has gone away (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn prompt(a: PromptArgs) -> Result<i32> {
    let set = templates(&a.templates)?;
    let corpus = load_corpus(&a.corpus, &set)?;
    let interv = corpus.get(&a.intervention_id).ok_or_else(|| anyhow!("no intervention '{}'", a.intervention_id))?;
    if a.judge {
        let path = a.candidates.ok_or_else(|| anyhow!("--judge needs --candidates"))?;
        let (pools, _) = read_candidates(&path)?;
        let pool = pools
            .iter()
            .find(|p| p.intervention_id == a.intervention_id)
            .ok_or_else(|| anyhow!("no candidates for '{}' in {}", a.intervention_id, path.display()))?;
        emit(&format!("{}\n", build_judge_prompt(interv, &pool.texts(), a.k, true, &set)?))?;
        return Ok(0);
    }
    let prompts = build_questioner_prompts(interv, a.mode, a.n, &set)?;
    for w in &prompts.warnings {
        eprintln!("warning: {w}");
    }
    for (i, p) in prompts.prompts.iter().enumerate() {
        if prompts.prompts.len() > 1 {
            emit(&format!("=== prompt {i} ===\n"))?;
        }
        emit(&format!("{}\n\n", p.text))?;
    }
    Ok(0)
}

fn generate(a: GenerateArgs) -> Result<i32> {
    let set = templates(&a.templates)?;
    let corpus = load_corpus(&a.corpus, &set)?;
    let mut params = GenParams::new(a.model.clone());
    params.temperature = a.temperature;
    let mut pools = Vec::new();
    let mut failures = 0;
    for run in 0..a.runs {
        let gw = a.backend.gateway(a.seed.wrapping_add(run as u64))?;
        for interv in &corpus.interventions {
            match generate_candidates(&gw, &params, interv, a.mode, a.n, &set, run) {
                Ok(p) => pools.push(p),
                Err(e) => {
                    failures += 1;
                    eprintln!("run {run}, {}: {e}", interv.intervention_id);
                }
            }
        }
    }
    let text = |id: &str| corpus.get(id).map(|i| i.text.clone()).unwrap_or_default();
    write_candidates(&a.out, &pools, text, None)?;
    Ok(if failures > 0 { 2 } else { 0 })
}

fn select(a: SelectArgs) -> Result<i32> {
    let set = templates(&a.templates)?;
    let corpus = load_corpus(&a.corpus, &set)?;
    let (pools, _) = read_candidates(&a.candidates)?;
    let pools: Vec<_> = pools.into_iter().filter(|p| p.run_id == a.run).collect();
    if pools.is_empty() {
        bail!("no pools for run {} in {}", a.run, a.candidates.display());
    }
    let gw = a.backend.gateway(a.seed)?;
    let cache = EmbeddingCache::in_memory();
    let evaluator = match (&a.strategy, &a.embed_model) {
        (StrategyKind::Oracle, Some(m)) => {
            let cfg = EvalConfig { threshold: a.threshold, ..EvalConfig::new(m.clone(), a.backend.descriptor(a.seed)) };
            Some(Evaluator::new(&gw, cfg, &cache)?)
        }
        (StrategyKind::Oracle, None) => bail!("the oracle needs --embed-model to label candidates"),
        _ => None,
    };
    let judge_params = match (&a.strategy, &a.judge_model) {
        (StrategyKind::Judge, Some(m)) => Some(GenParams::new(m.clone())),
        (StrategyKind::Judge, None) => bail!("the judge strategy needs --judge-model"),
        _ => None,
    };
    let mut out = Vec::new();
    let mut failures = 0;
    for pool in &pools {
        let interv = corpus
            .get(&pool.intervention_id)
            .ok_or_else(|| anyhow!("candidates name unknown intervention '{}'", pool.intervention_id))?;
        let result = match a.strategy {
            StrategyKind::Random => select_random(pool, a.k, a.seed).map_err(anyhow::Error::from),
            StrategyKind::Judge => {
                let opts =
                    JudgeOptions { k: a.k, include_schemes: !a.judge_without_schemes, ..JudgeOptions::default() };
                select_judge(&gw, judge_params.as_ref().unwrap(), interv, pool, &set, opts).map_err(anyhow::Error::from)
            }
            StrategyKind::Oracle => evaluator
                .as_ref()
                .unwrap()
                .label_batch(&pool.intervention_id, &pool.texts(), &interv.references)
                .map_err(anyhow::Error::from)
                .and_then(|o| {
                    let labels: Vec<_> = o.iter().map(|x| x.label).collect();
                    Ok(select_oracle(pool, &labels, a.k)?)
                }),
        };
        match result {
            Ok(r) => out.push(r),
            Err(e) => {
                failures += 1;
                eprintln!("{}: {e}", pool.intervention_id);
            }
        }
    }
    let text = |id: &str| corpus.get(id).map(|i| i.text.clone()).unwrap_or_default();
    write_selections(&a.out, &out, text, None)?;
    Ok(if failures > 0 { 2 } else { 0 })
}

/// Submission entries from either a plain submission file or a selections file.
fn read_questions(path: &Path) -> Result<Vec<SubmissionEntry>> {
    let json = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(entries) = parse_generated(&json) {
        return Ok(entries);
    }
    let selections = parse_selections(&json)
        .with_context(|| format!("{} is neither a submission nor a selections file", path.display()))?;
    Ok(selections
        .into_iter()
        .map(|s| SubmissionEntry {
            intervention_id: s.intervention_id.clone(),
            intervention: String::new(),
            questions: s.texts(),
        })
        .collect())
}

fn evaluate(a: EvaluateArgs) -> Result<i32> {
    let set = templates(&a.templates)?;
    let corpus = load_corpus(&a.corpus, &set)?;
    let entries = read_questions(&a.submission)?;
    let cfg = EvalConfig {
        threshold: a.threshold,
        strict_gt: a.strict_gt,
        ..EvalConfig::new(a.embed_model, a.backend.descriptor(0))
    };
    let gw = Gateway::from_descriptor(&cfg.embedding_backend, a.backend.concurrency)?;
    let cache = match &a.cache {
        Some(p) => EmbeddingCache::open(p).with_context(|| format!("opening cache {}", p.display()))?,
        None => EmbeddingCache::in_memory(),
    };
    let evaluator = Evaluator::new(&gw, cfg.clone(), &cache)?;
    let outcomes = evaluator.evaluate_submission(&corpus, &entries)?;
    cache.save().context("saving the embedding cache")?;
    let report = EvaluationReport::new(outcomes, entries.len(), &cfg)?;
    report.write(&a.out)?;
    let s = &report.summary;
    println!(
        "punctuation {:.1}  (Useful {:.1}, Unhelpful {:.1}, Invalid {:.1}, not able {:.1}; {} questions)",
        s.punctuation, s.useful_pct, s.unhelpful_pct, s.invalid_pct, s.not_able_pct, s.n_questions
    );
    Ok(0)
}

fn mcnemar(a: McnemarArgs) -> Result<i32> {
    let ra = EvaluationReport::read(&a.a)?;
    let rb = EvaluationReport::read(&a.b)?;
    if ra.summary.embedding_model != rb.summary.embedding_model || ra.summary.threshold != rb.summary.threshold {
        bail!("the two files were evaluated with different embedding models or thresholds");
    }
    let input = pair_outcomes(&ra.per_question, &rb.per_question)?;
    println!("b = {} (A useful, B not)", input.b);
    println!("c = {} (B useful, A not)", input.c);
    println!("p (exact) = {}", mcnemar_exact(input));
    if a.chi2 {
        println!("p (chi-square, corrected) = {}", mcnemar_chi2(input));
    }
    Ok(0)
}

fn experiment(a: ExperimentArgs) -> Result<i32> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(p) = a.preset {
        p.apply(&mut cfg);
    }
    if let Some(c) = a.corpus {
        cfg.corpus = c;
    }
    if let Some(d) = a.out_dir {
        cfg.out_dir = d;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(r) = a.runs {
        cfg.runs = Some(r);
        if cfg.seeds.as_ref().is_some_and(|s| s.len() != r) {
            cfg.seeds = None;
        }
    }
    let outcome = run_experiment(&cfg, RunOptions { resume: a.resume })?;
    emit(&render_table(std::slice::from_ref(&outcome.report), Layout::StrategyCompare)?.text)?;
    println!("report: {}", outcome.dir.join("report.json").display());
    for e in &outcome.report.ledger {
        eprintln!("run {} {} {}: {}", e.run, e.stage, e.intervention_id, e.message);
    }
    Ok(outcome.exit_code())
}

fn report(a: ReportArgs) -> Result<i32> {
    let mut reports = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(&a.dir)
        .with_context(|| format!("reading {}", a.dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.json").is_file())
        .collect();
    dirs.sort();
    for d in dirs {
        reports.push(RunReport::read(d.join("report.json"))?);
    }
    if reports.is_empty() {
        bail!("no report.json under {}", a.dir.display());
    }
    let table = render_table(&reports, a.layout)?;
    emit(&table.text)?;
    if let Some(p) = a.csv {
        write(&p, &table.csv)?;
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Prompt(a) => prompt(a),
        Command::Generate(a) => generate(a),
        Command::Select(a) => select(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Mcnemar(a) => mcnemar(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
