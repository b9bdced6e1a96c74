//! Numeric substrate: autodiff graph, layers, and gradient certification.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;

pub use gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport};
pub use graph::{sigmoid, BatchNormStats, Gradients, Graph, Var};
pub use layers::{ConvSpec, Layer, LayerKind, LayerStack, Mode};
pub use params::{ParamEntry, ParamRole, ParamStore, INIT_SCHEME};
