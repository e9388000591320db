//! Two-level VQ tokenization and stratified non-autoregressive generation.

pub mod data;
pub mod decode;
pub mod error;
pub mod harness;
pub mod nar;
pub mod nn;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
