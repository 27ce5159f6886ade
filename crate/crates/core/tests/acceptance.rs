//! Acceptance gate. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cqforge::corpus::{load_corpus, AnnotationLabel, ReferenceQuestion};
use cqforge::evaluation::{
    aggregate_runs, mcnemar_exact, score, EmbeddingCache, EvalConfig, EvalLabel, EvaluationOutcome, Evaluator,
    McNemarInput,
};
use cqforge::expctl::{run_experiment, ExperimentConfig, Preset, RunOptions};
use cqforge::gateway::{Backend, BackendDescriptor, EmbeddingVector, Gateway, GatewayError, GenParams};
use cqforge::generation::{generate_candidates, CandidateOrigin, CandidatePool, CandidateQuestion};
use cqforge::prompting::{build_judge_prompt, build_questioner_prompts, SchemeMode};
use cqforge::scheme_kb::TemplateSet;
use cqforge::selection::select_oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Embeds a text of the form "x1,x2,..." as that vector.
struct Literal;

impl Backend for Literal {
    fn generate(&self, _: &GenParams, _: &str) -> Result<String, GatewayError> {
        Err(GatewayError::InvalidInput("embedding-only backend".into()))
    }

    fn embed(&self, _: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        texts.iter().map(|t| EmbeddingVector::new(t.split(',').map(|x| x.parse::<f64>().unwrap()).collect())).collect()
    }
}

fn encode(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn reference(i: usize, text: String, label: AnnotationLabel) -> ReferenceQuestion {
    ReferenceQuestion { ref_id: format!("r{i}"), text, label }
}

fn literal_evaluator<'a>(gw: &'a Gateway, cache: &'a EmbeddingCache) -> Evaluator<'a> {
    Evaluator::new(gw, EvalConfig::new("literal", BackendDescriptor::mock(0)), cache).unwrap()
}

// Brute-force reference: first maximum of the cosine, labeled when >= 0.6.
fn brute_force(q: &[f64], refs: &[(Vec<f64>, AnnotationLabel)]) -> (EvalLabel, Option<usize>) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best: Option<(usize, f64)> = None;
    for (i, (r, _)) in refs.iter().enumerate() {
        let c = q.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (norm(q) * norm(r));
        if best.is_none() || c > best.unwrap().1 {
            best = Some((i, c));
        }
    }
    match best {
        Some((i, c)) if c >= 0.6 => (EvalLabel::from(refs[i].1), Some(i)),
        _ => (EvalLabel::NotAbleToEvaluate, None),
    }
}

fn evaluator_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let gw = Gateway::new(Arc::new(Literal));
    let cache = EmbeddingCache::in_memory();
    let ev = literal_evaluator(&gw, &cache);
    let labels = [AnnotationLabel::Useful, AnnotationLabel::Unhelpful, AnnotationLabel::Invalid];
    let mut labeled = 0;
    for case in 0..1000 {
        // Small integer coordinates make exact ties and exact 0.6 cosines common.
        let dim = rng.gen_range(2..=6);
        let draw = |rng: &mut ChaCha8Rng| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4..=4) as f64).collect();
            if v.iter().any(|x| *x != 0.0) {
                return v;
            }
        };
        let q = draw(&mut rng);
        let n_refs = rng.gen_range(0..=10);
        let refs: Vec<(Vec<f64>, AnnotationLabel)> =
            (0..n_refs).map(|_| (draw(&mut rng), labels[rng.gen_range(0..3)])).collect();
        let references: Vec<ReferenceQuestion> =
            refs.iter().enumerate().map(|(i, (v, l))| reference(i, encode(v), *l)).collect();
        let got = ev.label_question(&encode(&q), &references).map_err(|e| e.to_string())?;
        let (label, idx) = brute_force(&q, &refs);
        let want_id = idx.map(|i| format!("r{i}"));
        ensure(got.label == label && got.best_ref_id == want_id, || {
            format!("case {case}: got {:?}/{:?}, oracle {label:?}/{want_id:?}", got.label, got.best_ref_id)
        })?;
        labeled += usize::from(label != EvalLabel::NotAbleToEvaluate);
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("1000 instances agree ({labeled} labeled) in {:.2?}", took))
}

fn threshold_semantics() -> Result<String, String> {
    let gw = Gateway::new(Arc::new(Literal));
    let cache = EmbeddingCache::in_memory();
    let ev = literal_evaluator(&gw, &cache);
    let refs = [reference(0, "3.0,4.0".into(), AnnotationLabel::Useful)];
    let at = ev.label_question("1.0,0.0", &refs).map_err(|e| e.to_string())?;
    ensure(at.best_similarity == 0.6 && at.label == EvalLabel::Useful, || {
        format!("similarity {} -> {:?}", at.best_similarity, at.label)
    })?;
    let c: f64 = 0.6 - 1e-9;
    let below = [reference(0, encode(&[c, (1.0 - c * c).sqrt()]), AnnotationLabel::Useful)];
    let o = ev.label_question("1.0,0.0", &below).map_err(|e| e.to_string())?;
    ensure(o.best_similarity < 0.6 && o.label == EvalLabel::NotAbleToEvaluate, || {
        format!("similarity {} -> {:?}", o.best_similarity, o.label)
    })?;
    Ok(format!("0.6 -> {:?}, {:.10} -> {:?}", at.label, o.best_similarity, o.label))
}

fn pool(n: usize) -> CandidatePool {
    CandidatePool {
        intervention_id: "x".into(),
        run_id: 0,
        candidates: (0..n)
            .map(|i| CandidateQuestion {
                text: format!("question {i}?"),
                origin: CandidateOrigin::NoScheme,
                prompt_index: 0,
                line_index: i,
                run_id: 0,
            })
            .collect(),
        warnings: vec![],
    }
}

// Useful first, then Unhelpful, then Invalid, then not-able-to-evaluate, pool order within a label.
fn priority_fill(labels: &[EvalLabel], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for want in [EvalLabel::Useful, EvalLabel::Unhelpful, EvalLabel::Invalid, EvalLabel::NotAbleToEvaluate] {
        for (i, l) in labels.iter().enumerate() {
            if *l == want && out.len() < k {
                out.push(i);
            }
        }
    }
    out
}

fn max_useful(labels: &[EvalLabel], k: usize) -> usize {
    let n = labels.len();
    let take = k.min(n);
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == take)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1 && labels[*i] == EvalLabel::Useful).count())
        .max()
        .unwrap_or(0)
}

fn oracle_fill() -> Result<String, String> {
    let k = 3;
    let mut cases = 0;
    for n in 1..=6usize {
        let p = pool(n);
        for code in 0..4usize.pow(n as u32) {
            let labels: Vec<EvalLabel> = (0..n).map(|i| EvalLabel::ALL[code / 4usize.pow(i as u32) % 4]).collect();
            let sel = select_oracle(&p, &labels, k).map_err(|e| e.to_string())?;
            let want: Vec<String> = priority_fill(&labels, k).iter().map(|&i| p.candidates[i].text.clone()).collect();
            ensure(sel.texts() == want, || format!("{labels:?}: got {:?}, want {want:?}", sel.texts()))?;
            let useful = want
                .iter()
                .filter(|t| labels[p.texts().iter().position(|x| x == *t).unwrap()] == EvalLabel::Useful)
                .count();
            ensure(useful == max_useful(&labels, k), || format!("{labels:?}: {useful} useful is not maximal"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} labelings of pools of size 1..6 match the priority fill and the maximum"))
}

// Two-sided exact McNemar by direct summation of Binomial(b + c, 1/2) tail terms.
fn binomial_tail(b: u64, c: u64) -> f64 {
    let n = b + c;
    let lo = b.min(c);
    let mut total = 0.0;
    for i in 0..=lo {
        let mut coef = 1.0f64;
        for j in 0..i {
            coef = coef * (n - j) as f64 / (j + 1) as f64;
        }
        total += coef * 0.5f64.powi(n as i32);
    }
    (2.0 * total).min(1.0)
}

fn mcnemar() -> Result<String, String> {
    let cases = [(10, 0, 0.001953125), (8, 2, 0.109375), (5, 5, 1.0), (0, 0, 1.0), (17, 17, 1.0)];
    for (b, c, want) in cases {
        let p = mcnemar_exact(McNemarInput { b, c });
        ensure((p - want).abs() <= 1e-9, || format!("p({b},{c}) = {p}, want {want}"))?;
    }
    for b in 0..=40u64 {
        for c in 0..=40u64 {
            let p = mcnemar_exact(McNemarInput { b, c });
            let q = binomial_tail(b, c);
            ensure((p - q).abs() <= 1e-9, || format!("p({b},{c}) = {p}, direct sum {q}"))?;
        }
    }
    Ok("p(10,0)=0.001953125, p(8,2)=0.109375, p(b=c)=1; 41x41 grid matches direct summation".into())
}

fn outcomes(n: usize, useful: usize) -> Vec<EvaluationOutcome> {
    (0..n)
        .map(|i| EvaluationOutcome {
            intervention_id: format!("i{}", i / 3),
            slot: i % 3,
            question_text: format!("q{i}"),
            label: if i < useful { EvalLabel::Useful } else { EvalLabel::Invalid },
            best_similarity: 0.7,
            best_ref_id: Some("r0".into()),
        })
        .collect()
}

fn scoring() -> Result<String, String> {
    let s = score(&outcomes(102, 51), 34).map_err(|e| e.to_string())?;
    ensure(s.punctuation == 50.0 && s.n_questions == 102, || format!("punctuation {}", s.punctuation))?;
    let runs: Vec<_> = [5, 6, 7].iter().map(|u| score(&outcomes(10, *u), 4).unwrap()).collect();
    let agg = aggregate_runs(&runs).map_err(|e| e.to_string())?;
    let (m, sd) = (agg.punctuation.mean, agg.punctuation.std);
    ensure((m - 60.0).abs() < 1e-9 && (sd - 10.0).abs() < 1e-9, || format!("aggregate {m} ± {sd}"))?;
    Ok(format!("51/102 -> {:.1}; [50, 60, 70] -> {m:.1} ± {sd:.1}", s.punctuation))
}

fn fragments(name: &str) -> Vec<String> {
    fs::read_to_string(fixtures().join("golden").join(name))
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

fn prompt_fidelity() -> Result<String, String> {
    let set = TemplateSet::bundled();
    let corpus = load_corpus(fixtures().join("corpus5.json"), &set).map_err(|e| e.to_string())?;
    let interv = corpus.get("Mayor_12").unwrap();
    let prompts = build_questioner_prompts(interv, SchemeMode::WithMult, 4, &set).map_err(|e| e.to_string())?;
    let q = &prompts.prompts[0].text;
    for f in fragments("questioner_fragments.txt") {
        ensure(q.contains(&f), || format!("questioner prompt lacks {f:?}"))?;
    }
    let candidates: Vec<String> = (0..8).map(|i| format!("Candidate {i}?")).collect();
    let j = build_judge_prompt(interv, &candidates, 3, true, &set).map_err(|e| e.to_string())?;
    for f in fragments("judge_fragments.txt") {
        ensure(j.contains(&f), || format!("judge prompt lacks {f:?}"))?;
    }
    Ok("questioner and judge prompts contain every golden fragment".into())
}

fn kb_fidelity() -> Result<String, String> {
    let set = TemplateSet::bundled();
    ensure(set.len() == 18, || format!("{} schemes", set.len()))?;
    let e = set.lookup("Expert opinion").map_err(|e| e.to_string())?;
    ensure(e.template_questions.len() == 6, || format!("{} templates", e.template_questions.len()))?;
    ensure(e.template_questions.iter().any(|t| t == "How credible is the expert as a source?"), || {
        "missing 'How credible is the expert as a source?'".into()
    })?;
    Ok("18 schemes; Expert opinion has 6 templates".into())
}

fn cli_experiment(config: &Path, out: &Path) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_cqforge"))
        .args(["experiment", "--config"])
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!("exit {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr))
    })?;
    let dirs: Vec<_> = fs::read_dir(out).map_err(|e| e.to_string())?.filter_map(|e| e.ok()).collect();
    ensure(dirs.len() == 1, || format!("{} result directories", dirs.len()))?;
    fs::read(dirs[0].path().join("report.json")).map_err(|e| e.to_string())
}

fn e2e_determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for f in ["corpus5.json", "mock_experiment.toml"] {
        fs::copy(fixtures().join(f), tmp.path().join(f)).map_err(|e| e.to_string())?;
    }
    let config = tmp.path().join("mock_experiment.toml");
    let start = Instant::now();
    let a = cli_experiment(&config, &tmp.path().join("a"))?;
    let first = start.elapsed();
    let b = cli_experiment(&config, &tmp.path().join("b"))?;
    ensure(a == b, || "report.json differs between invocations".into())?;
    ensure(first < Duration::from_secs(5), || format!("first invocation took {first:?}"))?;
    Ok(format!("{} identical bytes; one invocation took {first:.2?}", a.len()))
}

fn config_shape() -> Result<String, String> {
    let set = TemplateSet::bundled();
    let corpus = load_corpus(fixtures().join("corpus5.json"), &set).map_err(|e| e.to_string())?;
    let interv = corpus.get("Mayor_12").unwrap();
    ensure(interv.schemes.len() == 3, || "fixture should carry 3 schemes".into())?;
    let params = GenParams::new("q");
    let run = |mode| {
        let gw = Gateway::from_descriptor(&BackendDescriptor::mock(3), 1).unwrap();
        let pool = generate_candidates(&gw, &params, interv, mode, 4, &set, 0).map_err(|e| e.to_string())?;
        Ok::<_, String>((gw.generate_calls(), pool.len()))
    };
    let (calls, len) = run(SchemeMode::BothMerged)?;
    ensure(calls == 2 && len <= 8, || format!("BothMerged: {calls} calls, {len} candidates"))?;
    let (mult, _) = run(SchemeMode::WithMult)?;
    ensure(mult == 3, || format!("WithMult over 3 schemes: {mult} calls"))?;
    Ok(format!("BothMerged: {calls} calls, {len} candidates; WithMult: {mult} calls"))
}

fn live_smoke() -> Result<String, String> {
    let url = std::env::var("CQFORGE_LIVE_URL").map_err(|_| "SKIP".to_string())?;
    let embed = std::env::var("CQFORGE_LIVE_EMBED_MODEL").unwrap_or_else(|_| "nomic-embed-text".into());
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let full: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixtures().join("corpus5.json")).unwrap()).unwrap();
    let three: serde_json::Map<_, _> =
        full.as_object().unwrap().iter().take(3).map(|(k, v)| (k.clone(), v.clone())).collect();
    let corpus = tmp.path().join("three.json");
    fs::write(&corpus, serde_json::to_string(&three).unwrap()).unwrap();
    let toml = format!(
        "corpus = {corpus:?}\nn = 4\nout_dir = {out:?}\n[questioner]\nmodel = \"q\"\nbackend = {{ kind = \"http\", base_url = {url:?} }}\n[judge]\nmodel = \"j\"\n[eval]\nembedding_model = {embed:?}\nembedding_backend = {{ kind = \"http\", base_url = {url:?} }}\n",
        corpus = corpus.display().to_string(),
        out = tmp.path().join("runs").display().to_string(),
    );
    let mut cfg = ExperimentConfig::from_toml(&toml).map_err(|e| e.to_string())?;
    Preset::Sub1.apply(&mut cfg);
    let outcome = run_experiment(&cfg, RunOptions::default()).map_err(|e| e.to_string())?;
    let r = &outcome.report;
    ensure(r.n_interventions == 3 && !r.aggregate.is_empty(), || "malformed report".into())?;
    Ok(format!("{} report rows, ledger has {} entries", r.aggregate.len(), r.ledger.len()))
}

fn main() {
    let checks: [(&str, Check); 10] = [
        ("evaluator matches brute-force oracle", evaluator_oracle),
        ("threshold is inclusive at 0.6", threshold_semantics),
        ("oracle fill order and optimality", oracle_fill),
        ("exact McNemar p-values", mcnemar),
        ("scoring and run aggregation", scoring),
        ("prompt fidelity", prompt_fidelity),
        ("scheme knowledge base fidelity", kb_fidelity),
        ("end-to-end CLI determinism", e2e_determinism),
        ("generation call shape", config_shape),
        ("live endpoint smoke test", live_smoke),
    ];
    let mut failed = 0;
    let total = checks.len();
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(e) if e == "SKIP" => println!("SKIP  {name}: set CQFORGE_LIVE_URL to run"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: {e}");
            }
        }
    }
    println!("{total} criteria, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
