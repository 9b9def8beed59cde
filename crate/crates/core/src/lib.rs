//! Anti-aliasing semantic reconstruction for few-shot segmentation.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! tensors ([`autodiff::Graph`]). The model pipeline is
//! encoder → semantic vectors → reconstruction → filtering → decoder, and
//! [`harness`] wires it into training, evaluation and the ablation studies
//! on the synthetic benchmark in [`episodes`].

pub mod analysis;
pub mod autodiff;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod filtering;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod params;
pub mod reconstruction;
pub mod semantics;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
