//! Candidate edits: editable-region markers, edit formats, prompt assembly
//! and the providers that propose edits.

pub mod block;
pub mod diff;
pub mod prompt;
pub mod provider;

pub use block::{BlockError, EvolveBlock};
pub use diff::{
    apply_mutation, parse_response, summarize, ApplyError, MutationKind, MutationResponse,
};
pub use prompt::{
    build_prompt, build_repair_prompt, FeedbackEntry, Inspiration, OptimizationContext,
    PromptOptions, PromptTemplate, TemplateError, DEFAULT_FEEDBACK_CAP,
};
pub use provider::{
    propose, LlmConfig, LlmProvider, MutationProvider, ProposeError, ProviderError, Script,
    ScriptEntry, ScriptOrder, ScriptedProvider,
};
