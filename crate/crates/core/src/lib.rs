//! Parameter-efficient fine-tuning of Mamba projectors.
//!
//! The crate is layered bottom-up:
//!
//! - [`linalg`]: dense matrices, products, pseudo-inverse, block-diagonal assembly
//! - [`autodiff`]: eager reverse-mode tape with a finite-difference checker
//! - [`mamba`]: ZOH discretisation, selective scan, the Mamba block and a small classifier
//! - [`adapters`]: ProDiaL, LoRA, DoRA, BitFit and full fine-tuning, merging and counting
//! - [`analysis`]: transform recovery `pinv(W) W'` and diagonal-dominance reports
//! - [`checkpoint`]: the `PDLB` named-tensor file format
//! - [`gradcheck`]: a finite-difference suite over all of the above

pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod mamba;

pub use error::{Error, Result};
pub use linalg::{BlockLayout, Matrix};
