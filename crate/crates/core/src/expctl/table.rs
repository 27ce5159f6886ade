use std::fmt::Write as _;
use std::str::FromStr;

use super::{ExpError, RunReport};
use crate::evaluation::{AggregateReport, MeanStd};
use crate::prompting::SchemeMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One row per questioner/judge pair.
    ModelGrid,
    /// One row per scheme mode.
    SchemeAblation,
    /// One row per candidate count.
    CountSweep,
    /// One row per selection strategy of a single configuration.
    StrategyCompare,
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model_grid" => Ok(Self::ModelGrid),
            "scheme_ablation" => Ok(Self::SchemeAblation),
            "count_sweep" => Ok(Self::CountSweep),
            "strategy_compare" => Ok(Self::StrategyCompare),
            _ => Err(format!(
                "unknown layout '{s}' (expected model_grid, scheme_ablation, count_sweep or strategy_compare)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTable {
    pub text: String,
    pub csv: String,
}

struct Row {
    label: String,
    agg: AggregateReport,
}

fn headline(r: &RunReport) -> &AggregateReport {
    // The judge's result when there is one, otherwise the first strategy, otherwise all candidates.
    r.aggregate_for("judge").or_else(|| r.aggregate.get(1).map(|a| &a.aggregate)).unwrap_or(&r.aggregate[0].aggregate)
}

fn check_eval(reports: &[RunReport]) -> Result<(), ExpError> {
    let first = &reports[0].eval;
    for r in &reports[1..] {
        let e = &r.eval;
        if e.threshold != first.threshold
            || e.embedding_model != first.embedding_model
            || e.strict_gt != first.strict_gt
        {
            return Err(ExpError::MixedEvalConfig(format!(
                "{} @ {} vs {} @ {}",
                first.embedding_model, first.threshold, e.embedding_model, e.threshold
            )));
        }
    }
    Ok(())
}

fn rows(reports: &[RunReport], layout: Layout) -> Result<Vec<Row>, ExpError> {
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    Ok(match layout {
        Layout::ModelGrid => {
            sorted.sort_by(|a, b| (&a.questioner_model, &a.judge_model).cmp(&(&b.questioner_model, &b.judge_model)));
            sorted
                .into_iter()
                .map(|r| {
                    let judge = match (r.aggregate_for("judge"), &r.judge_model) {
                        (Some(_), Some(j)) => j.as_str(),
                        _ => "-",
                    };
                    Row { label: format!("{} / {judge}", r.questioner_model), agg: *headline(r) }
                })
                .collect()
        }
        Layout::SchemeAblation => {
            let rank = |m: SchemeMode| SchemeMode::ALL.iter().position(|x| *x == m);
            sorted.sort_by_key(|r| rank(r.mode));
            sorted.into_iter().map(|r| Row { label: r.mode.as_str().to_owned(), agg: *headline(r) }).collect()
        }
        Layout::CountSweep => {
            sorted.sort_by_key(|r| r.n);
            sorted.into_iter().map(|r| Row { label: format!("n = {}", r.n), agg: *headline(r) }).collect()
        }
        Layout::StrategyCompare => {
            let mut digests: Vec<&str> = reports.iter().map(|r| r.config_digest.as_str()).collect();
            digests.dedup();
            if digests.len() > 1 {
                return Err(ExpError::MixedDigests(digests.join(", ")));
            }
            let r = &reports[0];
            r.aggregate
                .iter()
                .skip(1)
                .map(|a| {
                    let label = match (a.strategy.as_str(), &r.judge_model) {
                        ("judge", Some(m)) => format!("judge ({m})"),
                        (s, _) => s.to_owned(),
                    };
                    Row { label, agg: a.aggregate }
                })
                .collect()
        }
    })
}

fn cell(m: MeanStd, runs: usize) -> String {
    if runs > 1 {
        format!("{:.1} ± {:.2}", m.mean, m.std)
    } else {
        format!("{:.1}", m.mean)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Renders reports as an aligned text table and as CSV. Columns are the
/// Useful, Unhelpful, Invalid and not-able-to-evaluate percentages, with
/// mean ± sample std when a row aggregates more than one run.
pub fn render_table(reports: &[RunReport], layout: Layout) -> Result<RenderedTable, ExpError> {
    if reports.is_empty() {
        return Err(ExpError::Config("no reports to render".into()));
    }
    check_eval(reports)?;
    let rows = rows(reports, layout)?;

    let header = ["", "Use. ↑", "Unh.", "Inv. ↓", "NoEval"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            let n = r.agg.runs;
            [
                r.label.clone(),
                cell(r.agg.useful_pct, n),
                cell(r.agg.unhelpful_pct, n),
                cell(r.agg.invalid_pct, n),
                cell(r.agg.not_able_pct, n),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(" | ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_owned()
    };
    let mut text = String::new();
    let head: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    writeln!(text, "{}", line(&head)).unwrap();
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    writeln!(text, "{}", line(&rule).replace(" | ", "-+-")).unwrap();
    for row in &body {
        writeln!(text, "{}", line(row)).unwrap();
    }

    let mut csv = String::from("row,runs,useful_mean,useful_std,unhelpful_mean,unhelpful_std,invalid_mean,invalid_std,not_able_mean,not_able_std\n");
    for r in &rows {
        let a = &r.agg;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.label),
            a.runs,
            a.useful_pct.mean,
            a.useful_pct.std,
            a.unhelpful_pct.mean,
            a.unhelpful_pct.std,
            a.invalid_pct.mean,
            a.invalid_pct.std,
            a.not_able_pct.mean,
            a.not_able_pct.std
        )
        .unwrap();
    }
    Ok(RenderedTable { text, csv })
}
