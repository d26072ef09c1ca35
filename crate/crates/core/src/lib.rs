//! Neural text coherence: a BiLSTM sentence encoder with a language-model
//! loss, bilinear features between adjacent sentences, a lightweight
//! convolution global module and a window-level pairwise ranking loss,
//! together with permutation datasets for discrimination tasks.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod net;
pub mod pairs_io;
pub mod permgen;
pub mod reference;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use corpus::{Doc, Document, EmbeddingTable, TextDocument, Vocab};
pub use error::{Error, Result};
pub use evaluator::{evaluate, transfer_eval, EvalResult};
pub use model::{CoherenceModel, ModelConfig, Session};
pub use permgen::{make_pairs, DatasetSpec, PairSample, Span, Task};
pub use trainer::{train, TrainConfig, TrainReport};
