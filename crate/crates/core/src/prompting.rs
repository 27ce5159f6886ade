//! Questioner and judge prompt assembly.
//!
//! A prompt is a sequence of components separated by blank lines, in this
//! order: the essay (the intervention text under an `Essay:` header), the
//! role line, the critical-question definition, the scheme definition and one
//! block per scheme (only when schemes are used), the numbered candidates (judge
//! only), the goal, and the output instructions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Intervention;
use crate::scheme_kb::{KbError, SchemeEntry, TemplateSet};

pub const QUESTIONER_ROLE: &str = "You are a critical judge.";
pub const JUDGE_ROLE: &str = "You are a very strict critical and sceptical judge.";
pub const CQ_DEFINITION: &str = "Critical questions are the set of enquiries that should be asked in order to judge if an argument is good or fallacious by unmasking the assumptions held by the premises of the argument.";
pub const SCHEME_DEFINITION: &str = "Argumentative schemes are stereotypical patterns of inference that capture common types of defeasible arguments, i.e. arguments that are plausible but open to rebuttal. Each scheme represents a form of reasoning with typical premises and a conclusion.";
pub const OUTPUT_INSTRUCTIONS: &str = "Give one question per line. Make the questions simple, and do not give any explanation regarding why the question is relevant.";
pub const ESSAY_HEADER: &str = "Essay:";
pub const CANDIDATES_HEADER: &str = "Candidate questions:";

pub fn questioner_goal_with_schemes(n: usize) -> String {
    format!("Use the provided scheme and template of critical questions to generate {n} critical questions to evaluate the arguments in the given essay.")
}

pub fn questioner_goal_without_schemes(n: usize) -> String {
    format!("Your task is to generate {n} critical questions to evaluate the arguments in the given essay.")
}

pub fn questioner_goal_split(n: usize) -> String {
    format!(
        "Your task is to generate {n} critical questions without considering the schemes and {n} critical questions \
         using the provided scheme and template of critical questions, to evaluate the arguments in the given essay."
    )
}

pub fn judge_goal(k: usize) -> String {
    format!(
        "Select the {k} best critical questions that should be raised before accepting the arguments in the essay. \
         If some questions are redundant, these questions must be important: select the most relevant one."
    )
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("question count must be at least 1")]
    ZeroCount,
    #[error("judge prompt needs at least one candidate")]
    EmptyCandidates,
    #[error(transparent)]
    Kb(#[from] KbError),
}

/// Which scheme information goes into questioner prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeMode {
    /// No scheme information.
    Without,
    /// All of the intervention's schemes in one prompt.
    WithOne,
    /// One prompt per scheme.
    WithMult,
    /// A `Without` prompt and a `WithOne` prompt, pooled.
    BothMerged,
    /// One prompt asking for n questions without schemes and n with them.
    BothSingle,
}

impl SchemeMode {
    pub const ALL: [SchemeMode; 5] = [Self::Without, Self::WithOne, Self::WithMult, Self::BothMerged, Self::BothSingle];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Without => "without",
            Self::WithOne => "with-one",
            Self::WithMult => "with-mult",
            Self::BothMerged => "both-merged",
            Self::BothSingle => "both-single",
        }
    }

    pub fn uses_schemes(self) -> bool {
        self != Self::Without
    }
}

impl fmt::Display for SchemeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            format!("unknown scheme mode '{s}' (expected without, with-one, with-mult, both-merged or both-single)")
        })
    }
}

/// Which schemes a scheme-conditioned prompt carried.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SchemeTag {
    All,
    Named(String),
}

/// Where the questions answering a prompt come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptOrigin {
    NoScheme,
    Scheme(SchemeTag),
    /// Single prompt whose first `without` answer lines are scheme-free and
    /// the rest scheme-conditioned.
    Split {
        without: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionerPrompt {
    pub text: String,
    pub origin: PromptOrigin,
    /// Number of questions the prompt asks for.
    pub expected: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuestionerPrompts {
    pub prompts: Vec<QuestionerPrompt>,
    pub warnings: Vec<String>,
}

pub fn render_scheme_block(entry: &SchemeEntry) -> String {
    let mut s = format!("Scheme: {}\nDefinition: {}\nCritical questions template:", entry.name, entry.definition);
    for q in &entry.template_questions {
        s.push_str("\n- ");
        s.push_str(q);
    }
    s
}

fn essay(intervention: &Intervention) -> String {
    format!("{ESSAY_HEADER}\n{}", intervention.text)
}

fn scheme_components(schemes: &[&SchemeEntry]) -> Vec<String> {
    let mut parts = vec![SCHEME_DEFINITION.to_owned()];
    parts.extend(schemes.iter().map(|e| render_scheme_block(e)));
    parts
}

fn assemble(parts: Vec<String>) -> String {
    parts.join("\n\n")
}

fn questioner_prompt(intervention: &Intervention, schemes: &[&SchemeEntry], goal: String) -> String {
    let mut parts = vec![essay(intervention), QUESTIONER_ROLE.to_owned(), CQ_DEFINITION.to_owned()];
    if !schemes.is_empty() {
        parts.extend(scheme_components(schemes));
    }
    parts.push(goal);
    parts.push(OUTPUT_INSTRUCTIONS.to_owned());
    assemble(parts)
}

/// Prompts for one intervention under `mode`, each asking for `n` questions
/// (`2n` for [`SchemeMode::BothSingle`]). Scheme modes on an intervention
/// without schemes fall back to [`SchemeMode::Without`] with a warning.
pub fn build_questioner_prompts(
    intervention: &Intervention,
    mode: SchemeMode,
    n: usize,
    templates: &TemplateSet,
) -> Result<QuestionerPrompts, PromptError> {
    if n == 0 {
        return Err(PromptError::ZeroCount);
    }
    let mut out = QuestionerPrompts::default();
    let mut mode = mode;
    if mode.uses_schemes() && intervention.schemes.is_empty() {
        out.warnings.push(format!(
            "intervention '{}' has no schemes; mode {mode} falls back to without",
            intervention.intervention_id
        ));
        mode = SchemeMode::Without;
    }
    let entries = intervention.schemes.iter().map(|s| templates.lookup(s)).collect::<Result<Vec<_>, _>>()?;

    let without = || QuestionerPrompt {
        text: questioner_prompt(intervention, &[], questioner_goal_without_schemes(n)),
        origin: PromptOrigin::NoScheme,
        expected: n,
    };
    let with_all = || QuestionerPrompt {
        text: questioner_prompt(intervention, &entries, questioner_goal_with_schemes(n)),
        origin: PromptOrigin::Scheme(SchemeTag::All),
        expected: n,
    };

    match mode {
        SchemeMode::Without => out.prompts.push(without()),
        SchemeMode::WithOne => out.prompts.push(with_all()),
        SchemeMode::WithMult => {
            for e in &entries {
                out.prompts.push(QuestionerPrompt {
                    text: questioner_prompt(intervention, &[e], questioner_goal_with_schemes(n)),
                    origin: PromptOrigin::Scheme(SchemeTag::Named(e.name.clone())),
                    expected: n,
                });
            }
        }
        SchemeMode::BothMerged => {
            out.prompts.push(without());
            out.prompts.push(with_all());
        }
        SchemeMode::BothSingle => out.prompts.push(QuestionerPrompt {
            text: questioner_prompt(intervention, &entries, questioner_goal_split(n)),
            origin: PromptOrigin::Split { without: n },
            expected: 2 * n,
        }),
    }
    Ok(out)
}

/// Judge prompt asking for the `k` best of `candidates`, listed as `1.`, `2.`, ...
pub fn build_judge_prompt(
    intervention: &Intervention,
    candidates: &[String],
    k: usize,
    include_schemes: bool,
    templates: &TemplateSet,
) -> Result<String, PromptError> {
    if candidates.is_empty() {
        return Err(PromptError::EmptyCandidates);
    }
    if k == 0 {
        return Err(PromptError::ZeroCount);
    }
    let mut parts = vec![essay(intervention), JUDGE_ROLE.to_owned(), CQ_DEFINITION.to_owned()];
    if include_schemes && !intervention.schemes.is_empty() {
        let entries = intervention.schemes.iter().map(|s| templates.lookup(s)).collect::<Result<Vec<_>, _>>()?;
        parts.extend(scheme_components(&entries));
    }
    let mut listing = CANDIDATES_HEADER.to_owned();
    for (i, c) in candidates.iter().enumerate() {
        listing.push_str(&format!("\n{}. {c}", i + 1));
    }
    parts.push(listing);
    parts.push(judge_goal(k));
    parts.push(OUTPUT_INSTRUCTIONS.to_owned());
    Ok(assemble(parts))
}
