//! The query-to-SID policy: token vocabulary, prompts for the three supervised
//! stages, a small causal decoder, supervised training, and trie-constrained
//! decoding with exact sequence scoring.

mod data;
mod decode;
mod model;
mod sft;
mod vocab;
#[cfg(test)]
pub(crate) mod tests;

pub use data::{
    build_stage_dataset, item_prompt, positive_items, query_prompt, recent_history, session_prompt,
    user_query_prompt, DatasetOptions, DatasetReport, Example, Prompt, Stage,
};
pub use decode::{beam_search, beam_search_with, exhaustive_ranking, sample_sids, sequence_logprob, Beam};
pub use model::{Norm, PolicyConfig, PolicyModel};
pub use sft::{level_accuracy, masked_token_loss, sft_loss, sft_train, SftConfig, SftLog};
pub use vocab::{ConstraintTrie, SidVocab};
