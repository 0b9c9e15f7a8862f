//! A compressed residual squeeze network with one auxiliary classifier, built on
//! a small from-scratch computation-graph engine.

pub mod archs;
pub mod datasets;
pub mod error;
pub mod files;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod supervision;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Shape, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub mod tensors {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    pub mod graphs {}
    #[doc = include_str!("../../../book/src/network.md")]
    pub mod network {}
    #[doc = include_str!("../../../book/src/supervision.md")]
    pub mod supervision {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    pub mod datasets {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
