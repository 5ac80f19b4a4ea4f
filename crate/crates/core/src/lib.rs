//! Merging an external bilingual lexicon into neural machine translation
//! through source-side annotation: tags, replacement, mixed phrases and a
//! token-type embedding channel.

pub mod annotator;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod miner;
pub mod model;
pub mod subword;
pub mod synthgen;
pub mod text;
pub mod vocab;

pub use error::{Error, Result};
