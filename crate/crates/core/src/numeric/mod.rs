//! Dense batched numerics: matrices, feed-forward networks, a reverse-mode
//! gradient tape and the Adam optimizer.

mod activation;
mod matrix;
mod net;
mod optim;
mod tape;

pub use activation::Activation;
pub(crate) use activation::softmax_in_place;
pub use matrix::{gemm, Matrix};
pub use net::{gradients, BoundNet, DenseNet, Layer, NetGrads};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
