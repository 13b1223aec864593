// SPDX-License-Identifier: MIT OR Apache-2.0

//! Signal autointerpretation: corpus caching, context retrieval, interpreter
//! and judge requests, and the statistics deciding interpretability.

pub mod client;
pub mod corpus;
pub mod fuzz;
pub mod interpret;
pub mod retrieval;
pub mod stats;
