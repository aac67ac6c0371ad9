//! Static batch-isolation checking for ONNX inference graphs.
//!
//! When a server batches requests from several users into one forward pass,
//! each user's output should depend only on that user's input. The
//! [`checker`] proves this for a fixed-shape graph by propagating per-user
//! provenance labels through every operator. The [`interp`] module is a
//! reference interpreter used to probe the same property empirically, and
//! [`forge`] builds the graph-level backdoors that violate it.

pub mod checker;
pub mod error;
pub mod fixtures;
pub mod forge;
pub mod graph;
pub mod interp;
pub mod label;
pub mod rules;
pub mod tensor;

pub use checker::{check, BatchingConfig, Checker, InputSpec, Outcome, OutputSpec, Verdict, Violation};
pub use error::{Error, Result};
pub use graph::{load_model, load_model_from_path, save_model, save_model_to_path, GraphModel};
pub use interp::{execute, execute_traced, Interpreter};
pub use label::{Label, LabelState, ShadowTensor};
pub use tensor::json::TensorMap;
pub use tensor::{DType, TensorValue};
