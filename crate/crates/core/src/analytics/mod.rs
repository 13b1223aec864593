// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit comparison: prompt datasets, component vectors, clustering and signal similarity.

pub mod clustering;
pub mod components;
pub mod ioi;
pub mod signals;
