//! Learnable context, meta-net and task-relevant prompt construction.

mod bank;
mod params;
mod task;

pub use bank::{assemble, encode_pairs, encode_prompt, AssembledPrompt, PromptBank};
pub use params::{meta_hidden, BoundPrompt, ContextPrompt, MetaNet, PromptParams};
pub use task::{
    build_task_prompts, read_corpus, write_corpus, PromptRecord, PromptSpec, QuestionType,
    TaskKind, TaskRelevantPrompt, ANSWER_SLOT,
};
