//! Dense kernels with analytic gradients.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod matrix;
mod params;

pub use adam::Adam;
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions};
pub use graph::{linear_row, softmax, Grads, Graph, Var};
pub use layers::{uniform_init, GradTape, LinearLayer, Mlp};
pub use matrix::Matrix;
pub use params::{ParamId, ParamSet};

/// Normalization epsilon shared by every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;
