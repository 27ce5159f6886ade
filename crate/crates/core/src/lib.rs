//! Critical question generation for argumentative debate interventions.
//!
//! The crate is organised around a two-stage pipeline and the scoring protocol
//! used to grade its output:
//!
//! * [`corpus`] loads annotated interventions and reads/writes submission files.
//! * [`scheme_kb`] holds argumentation schemes with their template questions.
//! * [`gateway`] talks to text-generation and embedding backends (Ollama-style
//!   HTTP, or a deterministic mock).
//! * [`prompting`] renders questioner and judge prompts.
//! * [`generation`] runs the questioner and builds candidate pools.
//! * [`selection`] reduces a pool to the final questions (judge, random, oracle).
//! * [`evaluation`] labels questions by their most similar reference and
//!   provides the statistics layer.
//! * [`expctl`] runs declarative experiments and renders result tables.
//!
//! A narrative guide lives in the `book/` directory of the repository; its
//! code listings are compiled and run as doctests of this crate.

pub mod corpus;
pub mod evaluation;
pub mod expctl;
pub mod gateway;
pub mod generation;
pub mod prompting;
pub mod scheme_kb;
pub mod selection;
pub mod text;

pub use corpus::{AnnotationLabel, Corpus, Intervention, ReferenceQuestion, SplitSpec};
pub use evaluation::{EvalConfig, EvalLabel, EvaluationOutcome, ScoreReport};
pub use gateway::{BackendDescriptor, EmbeddingVector, Gateway, GenParams};
pub use generation::{CandidateOrigin, CandidatePool, CandidateQuestion};
pub use prompting::SchemeMode;
pub use scheme_kb::{KnowledgeBase, SchemeEntry, TemplateSet};
pub use selection::{SelectionResult, SelectionStrategy};

// Book chapters are compiled as doctests so the guide cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/schemes.md")]
    mod schemes {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
