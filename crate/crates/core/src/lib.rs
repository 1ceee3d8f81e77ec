//! Partial-alignment text-video retrieval with adaptive decomposition tokens.

pub mod dual_comm;
pub mod encoders;
pub mod error;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod parser;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{grad_check, GradCheckReport, Gradients, Graph, Tensor, Var};
pub use model::{EmbeddingVariant, ModelSpec, ModelVariant, T2vModel};
pub use objectives::LossBreakdown;
pub use retrieval::{RetrievalReport, ScoringMethod};
pub use synth::{CorpusSpec, QueryKind, SyntheticCorpus};
pub use train::{Checkpoint, EvalOptions, TrainConfig, TrainError};
