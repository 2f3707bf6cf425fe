//! Few-shot NER prototypical networks with prototype normalization.
//!
//! Embedding dumps feed a trainable affine projection, whose outputs are
//! averaged into class prototypes and scored by squared Euclidean distance.
//! Normalizing prototypes to unit length removes the bias that lets
//! prototype norms (and through them, word frequencies) decide predictions.

pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod math;
pub mod protohead;
pub mod sampler;
pub mod trainer;

pub use corpus::{Dataset, FrequencyTable, LabelSchema, Sentence, Split};
pub use encoder::{load_embedding_dump, synth_generate, EmbeddingStore, EpisodeBatch, ProjectionParams, SyntheticConfig, SyntheticCorpus};
pub use error::{Error, Result};
pub use math::{Mat, NormStats};
pub use protohead::{episode_forward, NormalizationMode, Prototypes};
pub use sampler::{sample_episode, sample_episodes, Episode, EpisodeSpec};
pub use trainer::{evaluate, train, EvalReport, TrainConfig, TrainOutcome};
