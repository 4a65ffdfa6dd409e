//! Graph convolution applied across the channels of CNN feature maps,
//! for image deblurring and super-resolution.
//!
//! Each channel of a feature map becomes a node of a pre-generated
//! Watts–Strogatz graph. At every pixel the channel values form a graph
//! signal that is mixed by the symmetric renormalized aggregator
//! `D^-1/2 (A + I) D^-1/2` and a shared weight matrix.

pub mod cli;
pub mod dataio;
pub mod diagnostics;
pub mod error;
pub mod gcfeat;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod trainer;
pub mod wsgraph;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
