// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-prompt circuit graph and its file formats.
//!
//! The structured format is JSON with the following top-level fields:
//!
//! * `version`: format tag, currently `"qkcircuit-graph/1"`.
//! * `prompt`, `tokens`, `token_strs`: the traced input.
//! * `target`, `target_str`, `contrast`: logit direction that seeded the trace.
//! * `tau_scale`, `rho`: threshold settings.
//! * `metadata`: free-form string map (model id, seed, ...).
//! * `nodes`: `{id, component, token, token_str, roles}`; `component` uses the
//!   dotted form of [`ComponentId`] (`head.3.2`, `mlp.0`, `embed`, ...).
//! * `edges`: `{upstream, downstream, side, d, s, signals, label}`; `upstream`
//!   and `downstream` are node ids, `signals` lists `{sv, ig, vector}` with
//!   `vector` present only when the trace kept residual-space vectors.
//!
//! DOT and HTML exports are write-only views.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ComponentId;
use crate::qk::Side;

pub const GRAPH_VERSION: &str = "qkcircuit-graph/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Seed,
    Expanded,
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitNode {
    pub id: usize,
    pub component: ComponentId,
    pub token: usize,
    pub token_str: String,
    pub roles: Vec<NodeRole>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSignal {
    pub sv: usize,
    pub ig: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitEdge {
    pub upstream: usize,
    /// Always an attention-head node.
    pub downstream: usize,
    pub side: Side,
    pub d: usize,
    pub s: usize,
    pub signals: Vec<EdgeSignal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitGraph {
    pub version: String,
    pub prompt: String,
    pub tokens: Vec<u32>,
    pub token_strs: Vec<String>,
    pub target: u32,
    pub target_str: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<u32>,
    pub tau_scale: f64,
    pub rho: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub nodes: Vec<CircuitNode>,
    pub edges: Vec<CircuitEdge>,
}

/// Node and edge counts for size reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub head_nodes: usize,
    pub signals: usize,
}

impl CircuitGraph {
    pub fn empty(prompt: &str, target: u32) -> Self {
        Self {
            version: GRAPH_VERSION.into(),
            prompt: prompt.into(),
            tokens: Vec::new(),
            token_strs: Vec::new(),
            target,
            target_str: String::new(),
            contrast: None,
            tau_scale: 2.5,
            rho: 0.25,
            metadata: BTreeMap::new(),
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn node(&self, id: usize) -> Result<&CircuitNode> {
        self.nodes
            .get(id)
            .filter(|n| n.id == id)
            .ok_or_else(|| Error::GraphFormat(format!("no node {id}")))
    }

    pub fn find_node(&self, component: ComponentId, token: usize) -> Option<&CircuitNode> {
        self.nodes
            .iter()
            .find(|n| n.component == component && n.token == token)
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            nodes: self.nodes.len(),
            edges: self.edges.len(),
            head_nodes: self.nodes.iter().filter(|n| n.component.is_head()).count(),
            signals: self.edges.iter().map(|e| e.signals.len()).sum(),
        }
    }

    pub fn has_vectors(&self) -> bool {
        self.edges
            .iter()
            .flat_map(|e| &e.signals)
            .all(|s| s.vector.is_some())
            && !self.edges.is_empty()
    }

    /// Checks node uniqueness, edge endpoints, layer order and acyclicity.
    pub fn check_integrity(&self) -> Result<()> {
        let fail = |m: String| Err(Error::GraphFormat(m));
        let mut seen = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return fail(format!("node at position {i} has id {}", n.id));
            }
            if seen.insert((n.component, n.token), i).is_some() {
                return fail(format!("duplicate node {} @ {}", n.component, n.token));
            }
        }
        for e in &self.edges {
            let up = self.node(e.upstream)?;
            let down = self.node(e.downstream)?;
            let ComponentId::AttnHead { layer, head } = down.component else {
                return fail(format!("edge into non-head node {}", down.component));
            };
            if e.s > e.d || down.token != e.d {
                return fail(format!("edge into {} has bad pair ({},{})", down.component, e.d, e.s));
            }
            let ok = match up.component {
                ComponentId::Embed | ComponentId::PosEmbed => true,
                ComponentId::AttnHead { layer: l, .. } | ComponentId::Mlp { layer: l } => l < layer,
                ComponentId::LnBias { layer: l, .. } => l == layer,
                ComponentId::QkBias { layer: l, head: h } => l == layer && h == head,
            };
            if !ok {
                return fail(format!(
                    "edge {} -> {} breaks layer order",
                    up.component, down.component
                ));
            }
        }
        if !self.is_acyclic() {
            return fail("graph has a cycle".into());
        }
        Ok(())
    }

    /// Kahn's algorithm over node ids.
    pub fn is_acyclic(&self) -> bool {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &self.edges {
            if e.upstream >= n || e.downstream >= n {
                return false;
            }
            out[e.upstream].push(e.downstream);
            indeg[e.downstream] += 1;
        }
        let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut visited = 0;
        while let Some(i) = stack.pop() {
            visited += 1;
            for &j in &out[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    stack.push(j);
                }
            }
        }
        visited == n
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: CircuitGraph = serde_json::from_str(text)?;
        if g.version != GRAPH_VERSION {
            return Err(Error::GraphFormat(format!(
                "unsupported graph version {:?}",
                g.version
            )));
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn node_label(&self, n: &CircuitNode) -> String {
        format!("{} @ {} {:?}", n.component, n.token, n.token_str)
    }

    fn edge_label(&self, e: &CircuitEdge) -> String {
        let svs: Vec<String> = e.signals.iter().map(|s| s.sv.to_string()).collect();
        let mut label = format!("{} ({},{}) k={}", e.side, e.d, e.s, svs.join(","));
        if let Some(extra) = &e.label {
            label.push_str(": ");
            label.push_str(extra);
        }
        label
    }

    pub fn to_dot(&self) -> String {
        let esc = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        let mut out = String::from("digraph circuit {\n  rankdir=BT;\n");
        for n in &self.nodes {
            let _ = writeln!(out, "  n{} [label=\"{}\"];", n.id, esc(&self.node_label(n)));
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "  n{} -> n{} [label=\"{}\"];",
                e.upstream,
                e.downstream,
                esc(&self.edge_label(e))
            );
        }
        out.push_str("}\n");
        out
    }

    pub fn to_html(&self) -> String {
        let esc = |s: &str| {
            s.replace('&', "&amp;")
                .replace('<', "&lt;")
                .replace('>', "&gt;")
                .replace('"', "&quot;")
        };
        let mut out = String::new();
        out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>circuit</title>\n");
        out.push_str(
            "<style>body{font-family:sans-serif}table{border-collapse:collapse}\
             td,th{border:1px solid #999;padding:2px 6px}.seed{background:#fde}</style>\n",
        );
        out.push_str("</head>\n<body>\n");
        let _ = writeln!(out, "<h1>{}</h1>", esc(&self.prompt));
        let _ = writeln!(
            out,
            "<p>target {:?} &middot; {} nodes &middot; {} edges</p>",
            esc(&self.target_str),
            self.nodes.len(),
            self.edges.len()
        );
        out.push_str("<h2>Nodes</h2>\n<table>\n<tr><th>id</th><th>component</th><th>token</th><th>roles</th></tr>\n");
        for n in &self.nodes {
            let roles: Vec<String> = n.roles.iter().map(|r| format!("{r:?}").to_lowercase()).collect();
            let class = if n.roles.contains(&NodeRole::Seed) { " class=\"seed\"" } else { "" };
            let _ = writeln!(
                out,
                "<tr{class}><td>{}</td><td>{}</td><td>{} {}</td><td>{}</td></tr>",
                n.id,
                n.component,
                n.token,
                esc(&n.token_str),
                roles.join(" ")
            );
        }
        out.push_str("</table>\n<h2>Edges</h2>\n<table>\n<tr><th>from</th><th>to</th><th>signal</th></tr>\n");
        for e in &self.edges {
            let (up, down) = (&self.nodes[e.upstream], &self.nodes[e.downstream]);
            let _ = writeln!(
                out,
                "<tr><td>{}</td><td>{}</td><td>{}</td></tr>",
                esc(&self.node_label(up)),
                esc(&self.node_label(down)),
                esc(&self.edge_label(e))
            );
        }
        out.push_str("</table>\n</body>\n</html>\n");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Json,
    Dot,
    Html,
}

impl std::str::FromStr for GraphFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(GraphFormat::Json),
            "dot" => Ok(GraphFormat::Dot),
            "html" => Ok(GraphFormat::Html),
            _ => Err(Error::Config(format!("unknown graph format {s:?}"))),
        }
    }
}

pub fn export_graph(graph: &CircuitGraph, format: GraphFormat, path: &Path) -> Result<()> {
    let text = match format {
        GraphFormat::Json => graph.to_json()?,
        GraphFormat::Dot => graph.to_dot(),
        GraphFormat::Html => graph.to_html(),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
