//! Learned per-token decoding control.
//!
//! Two small heads read a frozen language model's final hidden state and
//! predict a temperature and a top-p threshold for every generated token.
//! They are trained end to end through a differentiable relaxation of
//! nucleus truncation ([`soft_topp`]) and used at inference by a sampler that
//! applies hard truncation at the predicted values ([`decoding`]).

pub mod backbone;
pub mod decoding;
pub mod error;
pub mod evalkit;
pub mod heads;
pub mod numerics;
pub mod paramfile;
pub mod rng;
pub mod soft_topp;
pub mod training;

pub use error::{Error, ErrorKind, Result};
