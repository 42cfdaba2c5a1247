//! Multi-task graph property prediction with a shared GCN backbone, a bank of
//! low-rank residual adapters and a learned task-to-adapter relation matrix.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod routing;
pub mod synth;
pub mod tensor;
pub mod train;

pub use adapter::{AdapterBank, AdapterKind, AdapterParams};
pub use autodiff::{Tape, Var};
pub use backbone::Backbone;
pub use error::{Error, ErrorClass, Result};
pub use graph::{make_batch, normalize_adjacency, Graph, GraphBatch};
pub use model::{Model, ModelConfig, OpCount, RegLevel};
pub use objectives::{LossReport, ObjectiveConfig};
pub use routing::{route, RelationMatrix, RoutingConfig, RoutingOutcome};
pub use tensor::Tensor;
