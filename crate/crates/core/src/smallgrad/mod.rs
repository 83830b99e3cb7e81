//! Dense linear algebra and MLPs with exact manual gradients.

mod matrix;
mod mlp;
mod snapshot;

pub use matrix::{dot, norm, sub, Matrix};
pub use mlp::{
    finite_difference_check, input_gradient_check, Activation, Architecture, ForwardTrace, GradientTape, Layer,
    LayerGrad, Mlp,
};
pub use snapshot::{from_snapshot, to_snapshot, SNAPSHOT_HEADER};
