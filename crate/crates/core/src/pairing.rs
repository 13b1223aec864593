// SPDX-License-Identifier: MIT OR Apache-2.0

//! Optimal paired directions across the bilinear form `p^T Omega q`.
//!
//! For a unit destination direction `p` the maximiser over unit `q` is
//! `Omega^T p / |Omega^T p|`, and symmetrically `Omega q / |Omega q|` on the
//! destination side. When the product vanishes every unit vector is optimal
//! and the result is [`Paired::Degenerate`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CircuitEdge;
use crate::qk::{Side, UnifiedHead};

/// Relative size of `|Omega^T p|` below which the pair is treated as degenerate.
pub const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPair {
    pub layer: usize,
    pub head: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Channels the originating signal was built from.
    pub channels: Vec<usize>,
}

impl SignalPair {
    pub fn p_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.p)
    }

    pub fn q_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Paired {
    Unit(DVector<f64>),
    Degenerate,
}

impl Paired {
    pub fn unit(self) -> Option<DVector<f64>> {
        match self {
            Paired::Unit(v) => Some(v),
            Paired::Degenerate => None,
        }
    }
}

fn unit_input(x: &DVector<f64>) -> Result<DVector<f64>> {
    let n = x.norm();
    if !n.is_finite() {
        return Err(Error::Validation("non-finite signal".into()));
    }
    if n <= f64::MIN_POSITIVE {
        return Err(Error::ZeroVector);
    }
    Ok(x / n)
}

fn finish(y: DVector<f64>, scale: f64) -> Paired {
    let n = y.norm();
    if n <= DEGENERATE_TOL * scale.max(f64::MIN_POSITIVE) {
        Paired::Degenerate
    } else {
        Paired::Unit(y / n)
    }
}

/// `Omega^T p / |Omega^T p|` for an explicit matrix; `p` is normalized first.
pub fn pair_dst_with(omega: &DMatrix<f64>, p: &DVector<f64>) -> Result<Paired> {
    let p = unit_input(p)?;
    let scale = omega.norm();
    Ok(finish(omega.tr_mul(&p), scale))
}

/// `Omega q / |Omega q|` for an explicit matrix; `q` is normalized first.
pub fn pair_src_with(omega: &DMatrix<f64>, q: &DVector<f64>) -> Result<Paired> {
    let q = unit_input(q)?;
    let scale = omega.norm();
    Ok(finish(omega * q, scale))
}

/// Source direction paired with destination direction `p`, computed through the factored SVD.
pub fn pair_from_destination(head: &UnifiedHead, p: &DVector<f64>) -> Result<Paired> {
    let p = unit_input(p)?;
    let svd = &head.svd;
    let coeff = svd.u.tr_mul(&p).component_mul(&svd.sigma);
    let scale = svd.sigma.max();
    Ok(finish(&svd.v * coeff, scale))
}

/// Destination direction paired with source direction `q`.
pub fn pair_from_source(head: &UnifiedHead, q: &DVector<f64>) -> Result<Paired> {
    let q = unit_input(q)?;
    let svd = &head.svd;
    let coeff = svd.v.tr_mul(&q).component_mul(&svd.sigma);
    let scale = svd.sigma.max();
    Ok(finish(&svd.u * coeff, scale))
}

/// Builds the signal pair for a traced edge from its embedded signal vectors.
///
/// The summed vectors give the direction on the edge's own side; the
/// opposite direction comes from the pairing rule. `Ok(None)` marks a
/// degenerate pair, which downstream retrieval skips.
pub fn pair_for_edge(head: &UnifiedHead, edge: &CircuitEdge) -> Result<Option<SignalPair>> {
    let dim = head.d_model();
    let mut sum = DVector::zeros(dim);
    for s in &edge.signals {
        let v = s.vector.as_ref().ok_or(Error::MissingVectors)?;
        if v.len() != dim {
            return Err(Error::GraphFormat(format!(
                "signal vector has length {}, head expects {dim}",
                v.len()
            )));
        }
        sum += DVector::from_column_slice(v);
    }
    let own = match unit_input(&sum) {
        Ok(v) => v,
        Err(Error::ZeroVector) => return Ok(None),
        Err(e) => return Err(e),
    };
    let other = match edge.side {
        Side::Dst => pair_from_destination(head, &own)?,
        Side::Src => pair_from_source(head, &own)?,
    };
    let Some(other) = other.unit() else {
        return Ok(None);
    };
    let (p, q) = match edge.side {
        Side::Dst => (own, other),
        Side::Src => (other, own),
    };
    Ok(Some(SignalPair {
        layer: head.layer,
        head: head.head,
        p: p.as_slice().to_vec(),
        q: q.as_slice().to_vec(),
        channels: edge.signals.iter().map(|s| s.sv).collect(),
    }))
}
