//! Knowledge-graph link prediction with a text encoder trained in two stages.
//!
//! The pipeline is:
//!
//! 1. [`kg`] loads a benchmark directory, mirrors every triple through an inverse
//!    relation and indexes the known-true completions.
//! 2. [`text`] induces a word vocabulary and lays out token sequences for whole
//!    triples, `(head, relation)` query pairs and single entities.
//! 3. [`sampler`] and [`pretrain`] train the [`model`] encoder with masked entity,
//!    relation and token prediction over triple sequences.
//! 4. [`finetune`] trains the same encoder as a Siamese bi-encoder where every
//!    cross pair inside a batch is a negative.
//! 5. [`eval`] ranks every catalog entity for each query in the filtered setting.
//!
//! Everything that loops over independent items (samples, sequences, queries) goes
//! through [`exec::Exec`] so it can run on rayon or sequentially.

pub mod error;
pub mod eval;
pub mod exec;
pub mod finetune;
pub mod kg;
pub mod log;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod sampler;
pub mod text;

pub use error::{Error, Result};
pub use exec::Exec;
