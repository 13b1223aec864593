// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod analytics;
pub mod autointerp;
pub mod bundle;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod pairing;
pub mod qk;
pub mod solver;
pub mod tokenizer;
pub mod tracer;

pub use error::{Error, Result};
