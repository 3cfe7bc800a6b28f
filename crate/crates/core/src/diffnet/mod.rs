//! Reverse-mode gradient engine, parameter storage, the two fully connected
//! networks and the Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod mlp;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{check_gradients, check_jacobian, registered_ops, CheckOptions, GradCheckReport, Input};
pub use graph::{Gradients, Graph, Grads, Var};
pub use mlp::{mlp_forward, BoundMlp, MlpSpec};
pub use params::{Checkpoint, ParameterTape, Segment};
