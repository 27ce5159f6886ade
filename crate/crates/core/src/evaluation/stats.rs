//! Multi-run aggregation and paired significance testing.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{EvalError, EvalLabel, EvaluationOutcome, ScoreReport};
use crate::generation::CandidateOrigin;
use crate::selection::{Provenance, SelectionResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

/// Mean and sample standard deviation (`n - 1` denominator).
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std =
        if n == 1 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub useful_pct: MeanStd,
    pub unhelpful_pct: MeanStd,
    pub invalid_pct: MeanStd,
    pub not_able_pct: MeanStd,
    pub punctuation: MeanStd,
}

pub fn aggregate_runs(reports: &[ScoreReport]) -> Result<AggregateReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let field = |f: fn(&ScoreReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        runs: reports.len(),
        useful_pct: field(|r| r.useful_pct),
        unhelpful_pct: field(|r| r.unhelpful_pct),
        invalid_pct: field(|r| r.invalid_pct),
        not_able_pct: field(|r| r.not_able_pct),
        punctuation: field(|r| r.punctuation),
    })
}

/// Discordant pair counts: `b` = A useful and B not, `c` = B useful and A not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McNemarInput {
    pub b: u64,
    pub c: u64,
}

/// Exact two-sided McNemar test: `min(1, 2 * P[X >= max(b, c)])` for
/// `X ~ Binomial(b + c, 1/2)`. Gives 1 when there are no discordant pairs.
pub fn mcnemar_exact(input: McNemarInput) -> f64 {
    let n = input.b + input.c;
    if n == 0 {
        return 1.0;
    }
    let m = input.b.max(input.c);
    let ln2 = std::f64::consts::LN_2;
    // ln C(n, m), then walk the tail with C(n, k+1) = C(n, k) (n - k) / (k + 1).
    let mut ln_term: f64 = (1..=m).map(|i| ((n - m + i) as f64 / i as f64).ln()).sum::<f64>() - n as f64 * ln2;
    let mut tail = 0.0;
    for k in m..=n {
        tail += ln_term.exp();
        if k < n {
            ln_term += ((n - k) as f64 / (k + 1) as f64).ln();
        }
    }
    (2.0 * tail).min(1.0)
}

/// McNemar chi-square with continuity correction, `(|b - c| - 1)^2 / (b + c)`
/// on one degree of freedom. Meant for cross-checking the exact test.
pub fn mcnemar_chi2(input: McNemarInput) -> f64 {
    let n = input.b + input.c;
    if n == 0 {
        return 1.0;
    }
    let diff = (input.b.abs_diff(input.c) as f64 - 1.0).max(0.0);
    let stat = diff * diff / n as f64;
    let dist = ChiSquared::new(1.0).expect("one degree of freedom");
    (1.0 - dist.cdf(stat)).clamp(0.0, 1.0)
}

/// Pairs outcome lists aligned by `(intervention_id, slot)`. Every label other
/// than Useful counts as "not useful".
pub fn pair_outcomes(a: &[EvaluationOutcome], b: &[EvaluationOutcome]) -> Result<McNemarInput, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Misaligned(format!("{} outcomes vs {}", a.len(), b.len())));
    }
    let mut input = McNemarInput { b: 0, c: 0 };
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.intervention_id != y.intervention_id || x.slot != y.slot {
            return Err(EvalError::Misaligned(format!(
                "position {i}: ({}, {}) vs ({}, {})",
                x.intervention_id, x.slot, y.intervention_id, y.slot
            )));
        }
        match (x.label == EvalLabel::Useful, y.label == EvalLabel::Useful) {
            (true, false) => input.b += 1,
            (false, true) => input.c += 1,
            _ => {}
        }
    }
    Ok(input)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceStats {
    pub scheme: usize,
    pub no_scheme: usize,
    pub unmatched: usize,
    /// `scheme / (scheme + no_scheme)`; `None` when nothing was matched.
    pub fraction: Option<f64>,
}

/// Share of selected questions that came from scheme-conditioned prompts.
/// Unmatched judge lines are left out of the denominator.
pub fn provenance_fraction(selections: &[SelectionResult]) -> ProvenanceStats {
    let mut stats = ProvenanceStats { scheme: 0, no_scheme: 0, unmatched: 0, fraction: None };
    for s in selections.iter().flat_map(|r| &r.selected) {
        match &s.provenance {
            Provenance::Candidate(CandidateOrigin::Scheme(_)) => stats.scheme += 1,
            Provenance::Candidate(CandidateOrigin::NoScheme) => stats.no_scheme += 1,
            Provenance::Unmatched => stats.unmatched += 1,
        }
    }
    let matched = stats.scheme + stats.no_scheme;
    if matched > 0 {
        stats.fraction = Some(stats.scheme as f64 / matched as f64);
    }
    stats
}
