//! Generative retrieval over semantic item identifiers.
//!
//! The crate is `no_std` with `alloc`. It carries the numerical and
//! algorithmic pipeline end to end:
//!
//! * [`corpus`]: a seeded synthetic e-commerce corpus with ground-truth structure.
//! * [`nn`]: a small reverse-mode autodiff tape, layers, and an Adam optimizer.
//! * [`cqsid`]: a three-level residual quantizer whose first level is pinned to
//!   item categories, trained with reconstruction, commitment and bidirectional
//!   InfoNCE losses and EMA codebooks with dead-code restart.
//! * [`sid_index`]: identifier grouping, the SID-to-items lookup table, the
//!   valid-identifier trie, pool filtering and incremental attachment.
//! * [`seq2sid`]: the query-to-SID decoder, prompt construction, supervised
//!   training and trie-constrained decoding.
//! * [`eg_grpo`]: group-relative policy optimization with expert injection.
//! * [`eval`]: hitrate protocols.
//!
//! File IO, configuration and the command line live in the companion `gensid`
//! crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod cqsid;
pub mod eg_grpo;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod seq2sid;
pub mod sid_index;

pub use error::{Error, Result};
