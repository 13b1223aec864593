// SPDX-License-Identifier: MIT OR Apache-2.0

//! Recursive circuit construction for one prompt.
//!
//! Seeds are the components whose direct effect on the target logit direction
//! is at least `rho` times the largest positive one. Every attention-head node
//! `(head, t)` is expanded over the sources whose weight reaches `tau(t)`; both
//! sides of each such weight are solved, and every selected signal becomes an
//! edge from its component (attached at `t` for destination signals, at the
//! source for source signals) into the head node. Upstream heads are expanded
//! in turn; everything else is a leaf. Each `(head, d, s)` is solved once.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::graph::{CircuitEdge, CircuitGraph, CircuitNode, EdgeSignal, NodeRole, GRAPH_VERSION};
use crate::linalg::Ecdf;
use crate::model::{forward, ActivationCache, ComponentId};
use crate::qk::{build_unified_head, Side, UnifiedHead};
use crate::solver::{apply_intervention, candidate_signals, solve_pair, Intervention, REPLAY_SLACK};

pub const DEFAULT_TAU_SCALE: f64 = 2.5;
pub const DEFAULT_RHO: f64 = 0.25;

/// Attention-significance threshold `tau(d) = scale / (d + 1)` for 0-based `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauPolicy {
    pub scale: f64,
}

impl Default for TauPolicy {
    fn default() -> Self {
        Self {
            scale: DEFAULT_TAU_SCALE,
        }
    }
}

impl TauPolicy {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 1.0 && scale.is_finite()) {
            return Err(Error::Config(format!(
                "tau scale must exceed 1 (uniform attention would pass), got {scale}"
            )));
        }
        Ok(Self { scale })
    }

    pub fn tau(&self, d: usize) -> f64 {
        self.scale / (d + 1) as f64
    }
}

/// ECDF of `(d + 1) * A_ds` over all heads, rows and causal sources.
#[derive(Debug, Clone)]
pub struct TauCalibration {
    pub ecdf: Ecdf,
    pub suggested_scale: f64,
    /// Knee of the ECDF curve (largest distance below the chord); report only.
    pub knee: Option<f64>,
}

/// Scaled attention statistic `(d + 1) A_ds` for every head, row and source of one cache.
pub fn scaled_attention_stats(cache: &ActivationCache) -> Vec<f64> {
    let n = cache.len();
    let mut out = Vec::new();
    for layer in &cache.layers {
        for h in &layer.heads {
            for d in 0..n {
                for s in 0..=d {
                    out.push((d + 1) as f64 * h.weights[(d, s)]);
                }
            }
        }
    }
    out
}

pub fn calibrate_tau(bundle: &ModelBundle, prompts: &[Vec<u32>]) -> Result<TauCalibration> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("calibration corpus has no prompts".into()));
    }
    let mut stats = Vec::new();
    for p in prompts {
        stats.extend(scaled_attention_stats(&forward(bundle, p)?));
    }
    let ecdf = Ecdf::build(stats)?;
    let knee = ecdf_knee(&ecdf);
    Ok(TauCalibration {
        ecdf,
        suggested_scale: DEFAULT_TAU_SCALE,
        knee,
    })
}

fn ecdf_knee(ecdf: &Ecdf) -> Option<f64> {
    let steps = ecdf.steps();
    let (x0, x1) = (steps.first()?.0, steps.last()?.0);
    if x1 <= x0 {
        return None;
    }
    steps
        .iter()
        .map(|&(x, y)| (x, (x - x0) / (x1 - x0) - y))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(x, _)| x)
}

/// Direct effect of every final-residual writer on `unembed[:, target]`
/// (minus `unembed[:, contrast]`), through the frozen final norm, at the last token.
pub fn direct_effects(
    bundle: &ModelBundle,
    cache: &ActivationCache,
    target: u32,
    contrast: Option<u32>,
) -> Result<Vec<(ComponentId, f64)>> {
    let v = bundle.config.vocab_size;
    for t in std::iter::once(target).chain(contrast) {
        if t as usize >= v {
            return Err(Error::TokenOutOfVocab {
                id: t as usize,
                vocab: v,
            });
        }
    }
    let unembed = bundle.matrix("unembed")?;
    let mut dir: DVector<f64> = unembed.column(target as usize).into_owned();
    if let Some(c) = contrast {
        dir -= unembed.column(c as usize);
    }
    let last = cache.len() - 1;
    Ok(cache
        .normed_input_parts(bundle, cache.n_layers(), last)?
        .into_iter()
        .map(|(c, part)| (c, part.dot(&dir)))
        .collect())
}

/// Components whose direct effect is at least `rho` times the largest positive
/// one, sorted by descending effect (ties in component order).
pub fn seed_components(
    bundle: &ModelBundle,
    cache: &ActivationCache,
    target: u32,
    contrast: Option<u32>,
    rho: f64,
) -> Result<Vec<(ComponentId, f64)>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho must be in [0, 1], got {rho}")));
    }
    let effects = direct_effects(bundle, cache, target, contrast)?;
    let max = effects.iter().map(|e| e.1).fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(Vec::new());
    }
    let mut seeds: Vec<(ComponentId, f64)> = effects
        .into_iter()
        .filter(|&(_, a)| a > 0.0 && a >= rho * max)
        .collect();
    seeds.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    pub tau: TauPolicy,
    pub rho: f64,
    pub contrast: Option<u32>,
    /// Keep residual-space signal vectors on edges (needed for signal summaries).
    pub keep_vectors: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            tau: TauPolicy::default(),
            rho: DEFAULT_RHO,
            contrast: None,
            keep_vectors: true,
        }
    }
}

struct GraphBuilder {
    nodes: Vec<CircuitNode>,
    index: HashMap<(ComponentId, usize), usize>,
    edges: BTreeMap<(usize, usize, Side, usize, usize), Vec<EdgeSignal>>,
}

impl GraphBuilder {
    fn node(&mut self, cache: &ActivationCache, c: ComponentId, token: usize) -> (usize, bool) {
        if let Some(&id) = self.index.get(&(c, token)) {
            return (id, false);
        }
        let id = self.nodes.len();
        self.nodes.push(CircuitNode {
            id,
            component: c,
            token,
            token_str: cache.token_strs[token].clone(),
            roles: Vec::new(),
        });
        self.index.insert((c, token), id);
        (id, true)
    }

    fn add_role(&mut self, id: usize, role: NodeRole) {
        let roles = &mut self.nodes[id].roles;
        if !roles.contains(&role) {
            roles.push(role);
            roles.sort();
        }
    }
}

/// Traces the circuit of `tokens` for the logit of `target`.
pub fn trace(
    bundle: &ModelBundle,
    prompt: &str,
    tokens: &[u32],
    target: u32,
    opts: &TraceOptions,
) -> Result<CircuitGraph> {
    TauPolicy::new(opts.tau.scale)?;
    let cache = forward(bundle, tokens)?;
    let seeds = seed_components(bundle, &cache, target, opts.contrast, opts.rho)?;
    if seeds.is_empty() {
        return Err(Error::NoSeed);
    }
    let last = cache.len() - 1;
    let mut b = GraphBuilder {
        nodes: Vec::new(),
        index: HashMap::new(),
        edges: BTreeMap::new(),
    };
    let mut queue = VecDeque::new();
    for (c, _) in &seeds {
        let (id, _) = b.node(&cache, *c, last);
        b.add_role(id, NodeRole::Seed);
        if c.is_head() {
            queue.push_back(id);
        }
    }

    let mut heads: HashMap<(usize, usize), UnifiedHead> = HashMap::new();
    let mut expanded = vec![false; b.nodes.len()];
    while let Some(id) = queue.pop_front() {
        if expanded.get(id).copied().unwrap_or(false) {
            continue;
        }
        if expanded.len() <= id {
            expanded.resize(id + 1, false);
        }
        expanded[id] = true;
        let (component, t) = (b.nodes[id].component, b.nodes[id].token);
        let ComponentId::AttnHead { layer, head } = component else {
            continue;
        };
        b.add_role(id, NodeRole::Expanded);
        if !heads.contains_key(&(layer, head)) {
            heads.insert((layer, head), build_unified_head(bundle, layer, head)?);
        }
        let uh = &heads[&(layer, head)];
        let tau = opts.tau.tau(t);
        let weights = &cache.layers[layer].heads[head].weights;
        for s in 0..=t {
            if weights[(t, s)] < tau {
                continue;
            }
            for side in [Side::Dst, Side::Src] {
                let set = solve_pair(bundle, &cache, uh, t, s, side, tau)?;
                let attach = match side {
                    Side::Dst => t,
                    Side::Src => s,
                };
                for r in set.removed {
                    let (up, fresh) = b.node(&cache, r.candidate.component, attach);
                    if fresh && r.candidate.component.is_head() {
                        queue.push_back(up);
                    }
                    b.edges
                        .entry((up, id, side, t, s))
                        .or_default()
                        .push(EdgeSignal {
                            sv: r.candidate.sv,
                            ig: r.ig,
                            vector: opts.keep_vectors.then_some(r.vector),
                        });
                }
            }
        }
    }
    for id in 0..b.nodes.len() {
        if !b.nodes[id].component.is_head() {
            b.add_role(id, NodeRole::Leaf);
        }
    }

    let mut metadata = BTreeMap::new();
    for key in ["model_id", "seed"] {
        if let Some(v) = bundle.metadata.get(key) {
            metadata.insert(key.to_string(), v.clone());
        }
    }
    let target_str = bundle
        .tokenizer()
        .map(|t| t.decode_token(target).to_string())
        .unwrap_or_else(|| format!("<{target}>"));
    let graph = CircuitGraph {
        version: GRAPH_VERSION.into(),
        prompt: prompt.to_string(),
        tokens: tokens.to_vec(),
        token_strs: cache.token_strs.clone(),
        target,
        target_str,
        contrast: opts.contrast,
        tau_scale: opts.tau.scale,
        rho: opts.rho,
        metadata,
        nodes: b.nodes,
        edges: b
            .edges
            .into_iter()
            .map(|((upstream, downstream, side, d, s), signals)| CircuitEdge {
                upstream,
                downstream,
                side,
                d,
                s,
                signals,
                label: None,
            })
            .collect(),
    };
    graph.check_integrity()?;
    Ok(graph)
}

/// Replay result of one traced `(head, d, s, side)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCheck {
    pub layer: usize,
    pub head: usize,
    pub d: usize,
    pub s: usize,
    pub side: Side,
    pub removed: usize,
    pub weight_after: f64,
    pub tau: f64,
    pub passed: bool,
}

/// Re-derives every traced removal set from the graph's edges and replays it
/// through the full model.
pub fn verify_edges(bundle: &ModelBundle, graph: &CircuitGraph) -> Result<Vec<EdgeCheck>> {
    let cache = forward(bundle, &graph.tokens)?;
    let tau = TauPolicy::new(graph.tau_scale)?;
    let mut groups: BTreeMap<(usize, usize, usize, usize, Side), Vec<(ComponentId, usize)>> =
        BTreeMap::new();
    for e in &graph.edges {
        let ComponentId::AttnHead { layer, head } = graph.node(e.downstream)?.component else {
            return Err(Error::GraphFormat("edge into non-head node".into()));
        };
        let up = graph.node(e.upstream)?.component;
        groups
            .entry((layer, head, e.d, e.s, e.side))
            .or_default()
            .extend(e.signals.iter().map(|sig| (up, sig.sv)));
    }
    let mut heads: HashMap<(usize, usize), UnifiedHead> = HashMap::new();
    let mut out = Vec::with_capacity(groups.len());
    for ((layer, head, d, s, side), removed) in groups {
        if !heads.contains_key(&(layer, head)) {
            heads.insert((layer, head), build_unified_head(bundle, layer, head)?);
        }
        let signals = candidate_signals(bundle, &cache, &heads[&(layer, head)], side, d)?;
        let rows = removed
            .iter()
            .map(|(c, k)| {
                signals
                    .candidates
                    .iter()
                    .position(|ci| ci.component == *c && ci.sv == *k)
                    .ok_or_else(|| Error::GraphFormat(format!("edge signal {c}/{k} not a candidate")))
            })
            .collect::<Result<Vec<_>>>()?;
        let iv = Intervention::from_rows(&signals, layer, head, &rows);
        let outcome = apply_intervention(bundle, &cache, &iv)?;
        let t = tau.tau(d);
        let weight_after = outcome.row[s];
        out.push(EdgeCheck {
            layer,
            head,
            d,
            s,
            side,
            removed: rows.len(),
            weight_after,
            tau: t,
            passed: weight_after < t + REPLAY_SLACK,
        });
    }
    Ok(out)
}
