//! On-disk formats and in-memory containers.

pub mod corpus;
pub mod pairs;
pub mod store;

pub use corpus::{Report, TextCorpus};
pub use pairs::{PairRecord, PseudoPairedDataset};
pub use store::EmbeddingStore;
