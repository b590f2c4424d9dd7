//! Integer embeddings learned from integer-sequence corpora.
//!
//! The crate covers the full pipeline: ingesting an OEIS `stripped` dump,
//! building vocabularies, learning embeddings (LSA, skipgram with digit
//! n-gram subwords, an LSTM language model), probing the vectors for
//! arithmetic properties, and the downstream task battery (sequence
//! completion, analogies, seed-set expansion).

pub mod corpus;
pub mod embed;
pub mod error;
pub mod lsa;
pub mod lstm;
pub mod probes;
pub mod skipgram;
pub mod tasks;
pub mod token;
pub mod vocab;

pub use error::{Error, Result};
