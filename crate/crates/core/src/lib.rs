// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpretability engines for encoder-decoder and decoder-only transformers.

pub mod attribution;
mod autodiff;
pub mod corpus;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod projection;
pub mod store;

pub use error::{Error, Result};
