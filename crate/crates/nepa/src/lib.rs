//! Next-embedding predictive autoregression (NEPA) at desk scale.
//!
//! A causal vision transformer is trained to predict the embedding of the
//! next image patch from the embeddings of the previous ones, under a
//! negative-cosine objective with a stop-gradient on the targets. The crate
//! carries its own small autodiff engine ([`tensor`]) so every gradient in
//! the stack can be checked against finite differences.

pub mod analysis;
pub mod backbone;
pub mod checks;
pub mod data;
pub mod error;
pub mod objective;
pub mod optim;
pub mod params;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Gradients, Tape, Tensor, Var};
