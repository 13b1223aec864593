// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-node signal summaries and cross-circuit signal similarity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CircuitGraph;
use crate::model::ComponentId;
use crate::qk::Side;

/// Normalized sums of the destination and source signals entering one head-at-token node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSummary {
    pub component: ComponentId,
    pub token: usize,
    pub label: String,
    pub dst: Vec<f64>,
    pub src: Vec<f64>,
    /// Side had incoming signals whose sum cancelled to zero.
    pub dst_degenerate: bool,
    pub src_degenerate: bool,
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        false
    }
}

/// One summary per attention-head node with at least one incoming signal, ordered by node id.
pub fn signal_summaries(graph: &CircuitGraph) -> Result<Vec<SignalSummary>> {
    struct Acc {
        dst: Option<Vec<f64>>,
        src: Option<Vec<f64>>,
    }
    let mut acc: BTreeMap<usize, Acc> = BTreeMap::new();
    for e in &graph.edges {
        let node = graph.node(e.downstream)?;
        if !node.component.is_head() {
            continue;
        }
        for sig in &e.signals {
            let v = sig.vector.as_ref().ok_or(Error::MissingVectors)?;
            let a = acc.entry(e.downstream).or_insert(Acc { dst: None, src: None });
            let slot = match e.side {
                Side::Dst => &mut a.dst,
                Side::Src => &mut a.src,
            };
            let sum = slot.get_or_insert_with(|| vec![0.0; v.len()]);
            if sum.len() != v.len() {
                return Err(Error::GraphFormat("signal vectors differ in length".into()));
            }
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
    }
    let dim = acc
        .values()
        .flat_map(|a| a.dst.iter().chain(a.src.iter()))
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    acc.into_iter()
        .map(|(id, a)| {
            let node = graph.node(id)?;
            let (mut dst, had_dst) = (a.dst.clone().unwrap_or_else(|| vec![0.0; dim]), a.dst.is_some());
            let (mut src, had_src) = (a.src.clone().unwrap_or_else(|| vec![0.0; dim]), a.src.is_some());
            let dst_ok = normalize(&mut dst);
            let src_ok = normalize(&mut src);
            Ok(SignalSummary {
                component: node.component,
                token: node.token,
                label: format!("{}@{}{}", node.component, node.token, node.token_str),
                dst,
                src,
                dst_degenerate: had_dst && !dst_ok,
                src_degenerate: had_src && !src_ok,
            })
        })
        .collect()
}

/// Cosine similarity table between summaries of two circuits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("node");
        for c in &self.cols {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.values) {
            out.push_str(r);
            for v in row {
                out.push_str(&format!("\t{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

fn product(a: &[SignalSummary], b: &[SignalSummary], pick: fn(&SignalSummary) -> &[f64]) -> SimilarityMatrix {
    SimilarityMatrix {
        rows: a.iter().map(|s| s.label.clone()).collect(),
        cols: b.iter().map(|s| s.label.clone()).collect(),
        values: a
            .iter()
            .map(|x| {
                b.iter()
                    .map(|y| pick(x).iter().zip(pick(y)).map(|(p, q)| p * q).sum())
                    .collect()
            })
            .collect(),
    }
}

/// `(S_dst^A S_dst^B^T, S_src^A S_src^B^T)`.
pub fn signal_similarity(a: &CircuitGraph, b: &CircuitGraph) -> Result<(SimilarityMatrix, SimilarityMatrix)> {
    let sa = signal_summaries(a)?;
    let sb = signal_summaries(b)?;
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::EmptyInput("a circuit has no head with incoming signals".into()));
    }
    if let (Some(x), Some(y)) = (sa.first(), sb.first()) {
        if x.dst.len() != y.dst.len() {
            return Err(Error::GraphFormat("circuits come from models of different width".into()));
        }
    }
    Ok((product(&sa, &sb, |s| &s.dst), product(&sa, &sb, |s| &s.src)))
}
