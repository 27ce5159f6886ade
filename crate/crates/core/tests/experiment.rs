use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use cqforge::corpus::load_corpus;
use cqforge::expctl::{run_experiment, ExpError, ExperimentConfig, Preset, RunOptions, RunReport, StrategyKind};
use cqforge::gateway::MockBackend;
use cqforge::prompting::{build_questioner_prompts, SchemeMode};
use cqforge::scheme_kb::TemplateSet;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// The mock config with its corpus copied into a fresh directory.
fn setup() -> (TempDir, ExperimentConfig) {
    let tmp = tempfile::tempdir().unwrap();
    for f in ["corpus5.json", "mock_experiment.toml"] {
        fs::copy(fixtures().join(f), tmp.path().join(f)).unwrap();
    }
    let cfg = ExperimentConfig::load(tmp.path().join("mock_experiment.toml")).unwrap();
    (tmp, cfg)
}

fn files(dir: &Path) -> HashMap<PathBuf, Vec<u8>> {
    let mut out = HashMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timings.json" {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn final_submission_preset_scores_three_questions_per_intervention() {
    let (_tmp, mut cfg) = setup();
    Preset::Sub1.apply(&mut cfg);
    let outcome = run_experiment(&cfg, RunOptions::default()).unwrap();
    let r = &outcome.report;
    assert_eq!(r.mode, SchemeMode::BothSingle);
    assert_eq!((r.n, r.k), (4, 3));
    assert_eq!(r.runs.len(), 1);
    let judge = &r.runs[0].strategies[0];
    assert_eq!(judge.strategy, StrategyKind::Judge);
    assert_eq!(judge.score.n_questions, 15);
    assert_eq!(judge.score.n_interventions, 5);
    // 4 scheme-free and 4 scheme-conditioned lines per intervention.
    assert_eq!(r.runs[0].candidates.n_questions, 40);
    assert!(r.ledger.is_empty());
    assert_eq!(outcome.exit_code(), 0);
}

#[test]
fn random_and_oracle_over_three_runs() {
    let (_tmp, mut cfg) = setup();
    cfg.strategies = vec![StrategyKind::Random, StrategyKind::Oracle];
    cfg.seeds = None;
    cfg.runs = Some(3);
    let r = run_experiment(&cfg, RunOptions::default()).unwrap().report;
    assert_eq!(r.runs.len(), 3);
    for run in &r.runs {
        let names: Vec<_> = run.strategies.iter().map(|s| s.strategy).collect();
        assert_eq!(names, [StrategyKind::Random, StrategyKind::Oracle]);
        let (random, oracle) = (&run.strategies[0].score, &run.strategies[1].score);
        assert_eq!(random.n_questions, 15);
        // The oracle can only do better than a random draw from the same pool.
        assert!(oracle.counts.useful >= random.counts.useful);
    }
    let names: Vec<_> = r.aggregate.iter().map(|a| a.strategy.as_str()).collect();
    assert_eq!(names, ["candidates", "random", "oracle"]);
    for a in &r.aggregate {
        assert_eq!(a.aggregate.runs, 3);
    }
    // Fresh mock seeds per run give different candidate pools.
    assert_ne!(r.runs[0].seed, r.runs[1].seed);
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let (_tmp, cfg) = setup();
    let a = run_experiment(&cfg, RunOptions::default()).unwrap();
    let first = files(&a.dir);
    fs::remove_dir_all(&a.dir).unwrap();
    let b = run_experiment(&cfg, RunOptions::default()).unwrap();
    assert_eq!(a.dir, b.dir);
    assert_eq!(first, files(&b.dir));
}

#[test]
fn resume_of_completed_run_makes_no_backend_calls() {
    let (_tmp, mut cfg) = setup();
    cfg.strategies = vec![StrategyKind::Judge, StrategyKind::Random, StrategyKind::Oracle];
    let first = run_experiment(&cfg, RunOptions::default()).unwrap();
    assert!(first.backend_calls > 0);
    let before = files(&first.dir);
    let again = run_experiment(&cfg, RunOptions { resume: true }).unwrap();
    assert_eq!(again.backend_calls, 0);
    assert_eq!(again.report, first.report);
    assert_eq!(files(&again.dir), before);
}

#[test]
fn deleting_outputs_and_resuming_reproduces_them() {
    let (_tmp, cfg) = setup();
    let first = run_experiment(&cfg, RunOptions::default()).unwrap();
    let before = files(&first.dir);
    fs::remove_file(first.dir.join("report.json")).unwrap();
    fs::remove_file(first.dir.join("run0/selections_judge.json")).unwrap();
    let resumed = run_experiment(&cfg, RunOptions { resume: true }).unwrap();
    assert!(resumed.backend_calls > 0);
    assert_eq!(files(&resumed.dir), before);
}

#[test]
fn resume_ignores_outputs_of_a_different_config() {
    let (_tmp, cfg) = setup();
    let first = run_experiment(&cfg, RunOptions::default()).unwrap();
    let candidates = first.dir.join("run0/candidates.json");
    let text = fs::read_to_string(&candidates).unwrap();
    let digest = &first.report.config_digest;
    fs::write(&candidates, text.replace(digest.as_str(), "0000000000000000")).unwrap();
    let resumed = run_experiment(&cfg, RunOptions { resume: true }).unwrap();
    assert!(resumed.backend_calls > 0);
    assert_eq!(resumed.report, first.report);
}

#[test]
fn every_output_file_carries_the_digest() {
    let (_tmp, mut cfg) = setup();
    cfg.strategies = vec![StrategyKind::Judge, StrategyKind::Oracle];
    let out = run_experiment(&cfg, RunOptions::default()).unwrap();
    let digest = out.report.config_digest.clone();
    for (path, _) in files(&out.dir) {
        let got = cqforge::expctl::read_digest(out.dir.join(&path));
        assert_eq!(got.as_deref(), Some(digest.as_str()), "{}", path.display());
    }
    assert_eq!(RunReport::read(out.dir.join("report.json")).unwrap(), out.report);
}

/// A fixture that makes the questioner return nothing for one intervention.
fn silence(tmp: &Path, cfg: &mut ExperimentConfig, id: &str) {
    let set = TemplateSet::bundled();
    let corpus = load_corpus(&cfg.corpus, &set).unwrap();
    let prompts = build_questioner_prompts(corpus.get(id).unwrap(), cfg.mode, cfg.n, &set).unwrap();
    let map: HashMap<String, String> =
        prompts.prompts.iter().map(|p| (MockBackend::fixture_key(&p.text), String::new())).collect();
    let path = tmp.join("fixture.json");
    fs::write(&path, serde_json::to_string(&map).unwrap()).unwrap();
    cfg.questioner.backend.as_mut().unwrap().fixture = Some(path);
}

#[test]
fn isolated_failures_go_to_the_ledger() {
    let (tmp, mut cfg) = setup();
    silence(tmp.path(), &mut cfg, "Okafor_3");
    let out = run_experiment(&cfg, RunOptions::default()).unwrap();
    assert_eq!(out.exit_code(), 2);
    assert_eq!(out.report.ledger.len(), 1);
    let entry = &out.report.ledger[0];
    assert_eq!((entry.stage.as_str(), entry.intervention_id.as_str()), ("generate", "Okafor_3"));
    assert_eq!(out.report.runs[0].strategies[0].score.n_interventions, 4);

    // The ledger survives a resume.
    let again = run_experiment(&cfg, RunOptions { resume: true }).unwrap();
    assert_eq!(again.backend_calls, 0);
    assert_eq!(again.report.ledger, out.report.ledger);
}

#[test]
fn too_many_failures_abort_the_run() {
    let (tmp, mut cfg) = setup();
    silence(tmp.path(), &mut cfg, "Okafor_3");
    cfg.failure_threshold = 0.1;
    let err = run_experiment(&cfg, RunOptions::default()).unwrap_err();
    assert!(matches!(err, ExpError::TooManyFailures { failed: 1, total: 5, .. }), "{err}");
}
