//! Differentiable primitives, layers and the gradient checker.

pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod layers;
pub mod param;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Objective, ParamCheck};
pub use graph::{Graph, NodeGrads, NodeId};
pub use layers::{downsample_conv, Conv1d, Dense, LayerNorm, TransformerBlock, TransformerEncoderConfig, TransformerStack};
pub use param::{GradBuffer, ParamId, ParamStore, Parameter};
