// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary component vectors of circuit graphs and the Jaccard distance.
//!
//! Only attention heads and MLPs are vocabulary entries; embeddings and norm
//! or bias pseudo-components are left out. Edge keys are
//! `(upstream head or MLP, downstream head)` pairs with tokens, side and
//! channel dropped; `edge_sv` keys add the channel index.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CircuitGraph;
use crate::model::ComponentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Node,
    Edge,
    EdgeSv,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Node => "node",
            Granularity::Edge => "edge",
            Granularity::EdgeSv => "edge_sv",
        })
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Granularity::Node),
            "edge" => Ok(Granularity::Edge),
            "edge_sv" => Ok(Granularity::EdgeSv),
            _ => Err(Error::Config(format!("unknown granularity {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKey {
    Node(ComponentId),
    Edge(ComponentId, ComponentId),
    EdgeSv(ComponentId, ComponentId, usize),
}

impl fmt::Display for ComponentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentKey::Node(c) => write!(f, "{c}"),
            ComponentKey::Edge(u, d) => write!(f, "{u}->{d}"),
            ComponentKey::EdgeSv(u, d, k) => write!(f, "{u}->{d}#{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentVector {
    pub granularity: Granularity,
    pub keys: BTreeSet<ComponentKey>,
}

impl ComponentVector {
    pub fn new(granularity: Granularity, keys: impl IntoIterator<Item = ComponentKey>) -> Self {
        Self {
            granularity,
            keys: keys.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Node keys mentioned by edge or edge_sv keys.
    pub fn endpoint_nodes(&self) -> BTreeSet<ComponentKey> {
        let mut out = BTreeSet::new();
        for k in &self.keys {
            match *k {
                ComponentKey::Node(c) => {
                    out.insert(ComponentKey::Node(c));
                }
                ComponentKey::Edge(u, d) | ComponentKey::EdgeSv(u, d, _) => {
                    out.insert(ComponentKey::Node(u));
                    out.insert(ComponentKey::Node(d));
                }
            }
        }
        out
    }

    /// Edge keys obtained by dropping channel indices.
    pub fn coarsen_to_edges(&self) -> BTreeSet<ComponentKey> {
        self.keys
            .iter()
            .map(|k| match *k {
                ComponentKey::EdgeSv(u, d, _) => ComponentKey::Edge(u, d),
                other => other,
            })
            .collect()
    }
}

pub fn component_vector(graph: &CircuitGraph, granularity: Granularity) -> ComponentVector {
    let mut keys = BTreeSet::new();
    match granularity {
        Granularity::Node => {
            for n in &graph.nodes {
                if n.component.is_block() {
                    keys.insert(ComponentKey::Node(n.component));
                }
            }
        }
        Granularity::Edge | Granularity::EdgeSv => {
            for e in &graph.edges {
                let (Some(up), Some(down)) = (graph.nodes.get(e.upstream), graph.nodes.get(e.downstream))
                else {
                    continue;
                };
                if !up.component.is_block() {
                    continue;
                }
                if granularity == Granularity::Edge {
                    keys.insert(ComponentKey::Edge(up.component, down.component));
                } else {
                    for s in &e.signals {
                        keys.insert(ComponentKey::EdgeSv(up.component, down.component, s.sv));
                    }
                }
            }
        }
    }
    ComponentVector { granularity, keys }
}

/// `1 - |a & b| / |a | b|`; two empty sets are at distance zero.
pub fn jaccard_distance(a: &ComponentVector, b: &ComponentVector) -> Result<f64> {
    if a.granularity != b.granularity {
        return Err(Error::GranularityMismatch(
            a.granularity.to_string(),
            b.granularity.to_string(),
        ));
    }
    Ok(jaccard_sets(&a.keys, &b.keys))
}

pub(crate) fn jaccard_sets<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Heads and MLPs of an `L`-layer, `H`-head model.
pub fn node_vocabulary(n_layers: usize, n_heads: usize) -> Vec<ComponentKey> {
    let mut out = Vec::with_capacity(n_layers * (n_heads + 1));
    for layer in 0..n_layers {
        for head in 0..n_heads {
            out.push(ComponentKey::Node(ComponentId::AttnHead { layer, head }));
        }
        out.push(ComponentKey::Node(ComponentId::Mlp { layer }));
    }
    out
}

/// Every `(upstream head or MLP, downstream head)` pair with the upstream in an earlier layer.
pub fn possible_edges(n_layers: usize, n_heads: usize) -> Vec<ComponentKey> {
    let mut out = Vec::new();
    for dl in 0..n_layers {
        for dh in 0..n_heads {
            let down = ComponentId::AttnHead { layer: dl, head: dh };
            for ul in 0..dl {
                for uh in 0..n_heads {
                    out.push(ComponentKey::Edge(ComponentId::AttnHead { layer: ul, head: uh }, down));
                }
                out.push(ComponentKey::Edge(ComponentId::Mlp { layer: ul }, down));
            }
        }
    }
    out
}

/// Closed form of `possible_edges(L, H).len()`: `L(H+1) * (L-1)H / 2`.
pub fn possible_edge_count(n_layers: usize, n_heads: usize) -> usize {
    n_layers * (n_heads + 1) * n_layers.saturating_sub(1) * n_heads / 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{CircuitEdge, CircuitNode, EdgeSignal};
    use crate::qk::Side;

    fn set(keys: &[usize]) -> ComponentVector {
        ComponentVector::new(
            Granularity::Node,
            keys.iter().map(|&l| ComponentKey::Node(ComponentId::Mlp { layer: l })),
        )
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_distance(&set(&[1, 2]), &set(&[1, 2])).unwrap(), 0.0);
        assert_eq!(jaccard_distance(&set(&[1]), &set(&[2])).unwrap(), 1.0);
        assert!((jaccard_distance(&set(&[1, 2]), &set(&[2, 3])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard_distance(&set(&[]), &set(&[])).unwrap(), 0.0);
        let e = ComponentVector::new(Granularity::Edge, []);
        assert!(matches!(jaccard_distance(&set(&[]), &e), Err(Error::GranularityMismatch(..))));
    }

    #[test]
    fn gpt2_small_shape_counts() {
        assert_eq!(node_vocabulary(12, 12).len(), 156);
        assert_eq!(possible_edges(12, 12).len(), 10_296);
        assert_eq!(possible_edge_count(12, 12), 10_296);
        for (l, h) in [(1, 1), (2, 3), (5, 4), (7, 7)] {
            assert_eq!(possible_edges(l, h).len(), possible_edge_count(l, h));
        }
    }

    #[test]
    fn one_edge_two_channels() {
        let mut g = CircuitGraph::empty("", 0);
        g.token_strs = vec!["x".into()];
        let node = |id, component| CircuitNode {
            id,
            component,
            token: 0,
            token_str: "x".into(),
            roles: vec![],
        };
        g.nodes = vec![
            node(0, ComponentId::AttnHead { layer: 2, head: 1 }),
            node(1, ComponentId::AttnHead { layer: 0, head: 0 }),
            node(2, ComponentId::Embed),
        ];
        let sig = |sv| EdgeSignal { sv, ig: 0.1, vector: None };
        g.edges = vec![
            CircuitEdge { upstream: 1, downstream: 0, side: Side::Dst, d: 0, s: 0, signals: vec![sig(0), sig(2)], label: None },
            CircuitEdge { upstream: 2, downstream: 0, side: Side::Src, d: 0, s: 0, signals: vec![sig(1)], label: None },
        ];
        assert_eq!(component_vector(&g, Granularity::Edge).len(), 1);
        assert_eq!(component_vector(&g, Granularity::EdgeSv).len(), 2);
        assert_eq!(component_vector(&g, Granularity::Node).len(), 2);
        assert!(component_vector(&CircuitGraph::empty("", 0), Granularity::EdgeSv).is_empty());
    }
}
