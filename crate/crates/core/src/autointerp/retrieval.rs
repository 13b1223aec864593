// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ranking corpus token pairs by a signal pair and rendering marked contexts.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{CorpusChunk, CorpusStore, CHUNK_LEN};
use crate::error::{Error, Result};
use crate::pairing::SignalPair;
use crate::qk::{Side, UnifiedHead};

pub const DEFAULT_TOP_K: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredContext {
    pub chunk: usize,
    pub d: usize,
    pub s: usize,
    pub score: f64,
    pub text: String,
}

/// Concatenates the chunk tokens, wrapping `d` in `<< >>` and `s` in `[[ ]]`.
pub fn render_context(tokens: &[String], d: usize, s: usize) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        match (i == d, i == s) {
            (true, true) => out.push_str(&format!("<<[[{t}]]>>")),
            (true, false) => out.push_str(&format!("<<{t}>>")),
            (false, true) => out.push_str(&format!("[[{t}]]")),
            (false, false) => out.push_str(t),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Hit {
    score: f64,
    chunk: usize,
    d: usize,
    s: usize,
}

impl Hit {
    /// Ranking order: higher score first, then lower `(chunk, d, s)`.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.chunk.cmp(&other.chunk))
            .then(self.d.cmp(&other.d))
            .then(self.s.cmp(&other.s))
    }
}

impl Eq for Hit {}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Hit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// Projections `x~^t . p` (destination) and `x~^t . q` (source) for every token of a chunk.
fn projections(head: &UnifiedHead, chunk: &CorpusChunk, p: &DVector<f64>, q: &DVector<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = chunk
        .inputs
        .get(&head.layer)
        .ok_or_else(|| Error::Config(format!("corpus has no cache for layer {}", head.layer)))?;
    let mut a = Vec::with_capacity(CHUNK_LEN);
    let mut b = Vec::with_capacity(CHUNK_LEN);
    for t in 0..x.nrows() {
        let row = x.row(t).transpose();
        a.push(head.effective(Side::Dst, &row, t).dot(p));
        b.push(head.effective(Side::Src, &row, t).dot(q));
    }
    Ok((a, b))
}

fn check(store: &CorpusStore, head: &UnifiedHead, pair: &SignalPair) -> Result<(DVector<f64>, DVector<f64>)> {
    if !store.covers(head.layer) {
        return Err(Error::Config(format!("corpus has no cache for layer {}", head.layer)));
    }
    if pair.p.len() != store.d_model || pair.q.len() != store.d_model {
        return Err(Error::Validation("signal pair width differs from corpus width".into()));
    }
    Ok((pair.p_vec(), pair.q_vec()))
}

/// `score(d, s) = x~^d . p * q . x~^s` for one causal pair.
pub fn score_pair(head: &UnifiedHead, chunk: &CorpusChunk, pair: &SignalPair, d: usize, s: usize) -> Result<f64> {
    if s > d {
        return Err(Error::CausalMask { d, s });
    }
    let x = chunk
        .inputs
        .get(&head.layer)
        .ok_or_else(|| Error::Config(format!("corpus has no cache for layer {}", head.layer)))?;
    let xd = head.effective(Side::Dst, &x.row(d).transpose(), d);
    let xs = head.effective(Side::Src, &x.row(s).transpose(), s);
    Ok(xd.dot(&pair.p_vec()) * pair.q_vec().dot(&xs))
}

/// Top `k` causal token pairs across the store, best first.
pub fn score_contexts(store: &CorpusStore, head: &UnifiedHead, pair: &SignalPair, k: usize) -> Result<Vec<ScoredContext>> {
    let (p, q) = check(store, head, pair)?;
    let mut heap: BinaryHeap<Hit> = BinaryHeap::with_capacity(k + 1);
    for (ci, chunk) in store.chunks.iter().enumerate() {
        let (a, b) = projections(head, chunk, &p, &q)?;
        for d in 0..a.len() {
            for s in 0..=d {
                let hit = Hit { score: a[d] * b[s], chunk: ci, d, s };
                if heap.len() < k {
                    heap.push(hit);
                } else if let Some(worst) = heap.peek() {
                    if hit.rank_cmp(worst) == Ordering::Less {
                        heap.pop();
                        heap.push(hit);
                    }
                }
            }
        }
    }
    let hits = heap.into_sorted_vec();
    Ok(hits
        .into_iter()
        .map(|h| ScoredContext {
            chunk: store.chunks[h.chunk].id,
            d: h.d,
            s: h.s,
            score: h.score,
            text: render_context(&store.chunks[h.chunk].token_strs, h.d, h.s),
        })
        .collect())
}

/// Maps `0..n(n+1)/2` onto causal pairs `(d, s)` with `s <= d`, row by row.
fn triangular_pair(i: usize) -> (usize, usize) {
    let mut d = ((((8 * i + 1) as f64).sqrt() - 1.0) / 2.0) as usize;
    while d * (d + 1) / 2 > i {
        d -= 1;
    }
    while (d + 1) * (d + 2) / 2 <= i {
        d += 1;
    }
    (d, i - d * (d + 1) / 2)
}

/// `n` causal pairs drawn uniformly without replacement, skipping those in `exclude`.
pub fn sample_random_contexts(
    store: &CorpusStore,
    head: &UnifiedHead,
    pair: &SignalPair,
    n: usize,
    exclude: &[ScoredContext],
    seed: u64,
) -> Result<Vec<ScoredContext>> {
    check(store, head, pair)?;
    let per_chunk = CHUNK_LEN * (CHUNK_LEN + 1) / 2;
    let total = store.len() * per_chunk;
    let index = |id: usize| store.chunks.iter().position(|c| c.id == id);
    let mut taken: HashSet<(usize, usize, usize)> = exclude
        .iter()
        .filter_map(|c| index(c.chunk).map(|i| (i, c.d, c.s)))
        .collect();
    if total < taken.len() + n {
        return Err(Error::EmptyInput(format!(
            "corpus has {total} causal pairs, need {n} beyond {} excluded",
            taken.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let ci = rng.random_range(0..store.len());
        let (d, s) = triangular_pair(rng.random_range(0..per_chunk));
        if !taken.insert((ci, d, s)) {
            continue;
        }
        let chunk = &store.chunks[ci];
        out.push(ScoredContext {
            chunk: chunk.id,
            d,
            s,
            score: score_pair(head, chunk, pair, d, s)?,
            text: render_context(&chunk.token_strs, d, s),
        });
    }
    Ok(out)
}
