// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counterfactual signal search for one attention weight.
//!
//! For a head, destination `d` and source `s`, the effective input on one side
//! is split into candidates `(component c, channel k)`: on the destination
//! side `u_k (u_k . x~_c^d)`, on the source side `v_k (v_k . x~_c^j)` for every
//! `j <= d`. The contribution matrix `C` has one row per candidate and one
//! column per source position, scaled by `1/sqrt(R)` so its column sums are the
//! softmax inputs. Integrated gradients along `z(t) = t * a` (with `a` the
//! column sums) rank the rows; rows are then removed greedily, in that fixed
//! order, until the weight on `s` drops below `tau`.
//!
//! Tokens are 0-based, so removing every candidate leaves the uniform weight
//! `1/(d+1)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::model::{forward_with_override, scaled_softmax, ActivationCache, ComponentId, ScoreOverride};
use crate::qk::{Side, UnifiedHead};

pub const DEFAULT_IG_STEPS: usize = 64;
/// Slack allowed when replaying a solution through the model.
pub const REPLAY_SLACK: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateIndex {
    pub component: ComponentId,
    pub sv: usize,
}

/// Projection coefficients of every candidate.
///
/// `coeffs[(i, t)]` is `u_k . x~_c^d` (destination side, single column) or
/// `v_k . x~_c^t` (source side, one column per `t <= d`).
#[derive(Debug, Clone)]
pub struct CandidateSignals {
    pub side: Side,
    pub d: usize,
    pub candidates: Vec<CandidateIndex>,
    pub coeffs: DMatrix<f64>,
    /// Channel directions: columns of `U` (destination) or `V` (source).
    basis: DMatrix<f64>,
}

impl CandidateSignals {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn column(&self, token: usize) -> usize {
        match self.side {
            Side::Dst => 0,
            Side::Src => token,
        }
    }

    /// Residual-space vector of candidate `i` at `token`.
    pub fn vector(&self, i: usize, token: usize) -> DVector<f64> {
        let k = self.candidates[i].sv;
        self.basis.column(k) * self.coeffs[(i, self.column(token))]
    }

    /// Sum of all candidate vectors at `token`; the projection of the
    /// effective vector onto the channel span.
    pub fn sum_at(&self, token: usize) -> DVector<f64> {
        let col = self.column(token);
        let mut out = DVector::zeros(self.basis.nrows());
        for (i, c) in self.candidates.iter().enumerate() {
            out.axpy(self.coeffs[(i, col)], &self.basis.column(c.sv), 1.0);
        }
        out
    }

    /// Tokens whose effective vectors a removal touches.
    pub fn tokens(&self) -> Vec<usize> {
        match self.side {
            Side::Dst => vec![self.d],
            Side::Src => (0..=self.d).collect(),
        }
    }
}

/// Builds the candidate set for one side of head `head` at destination `d`.
pub fn candidate_signals(
    bundle: &ModelBundle,
    cache: &ActivationCache,
    head: &UnifiedHead,
    side: Side,
    d: usize,
) -> Result<CandidateSignals> {
    if d >= cache.len() {
        return Err(Error::OutOfRange(format!("token {d} of {}", cache.len())));
    }
    let basis = match side {
        Side::Dst => head.svd.u.clone(),
        Side::Src => head.svd.v.clone(),
    };
    let n_k = basis.ncols();
    let tokens = match side {
        Side::Dst => vec![d],
        Side::Src => (0..=d).collect::<Vec<_>>(),
    };
    let mut candidates = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); tokens.len()];
    for (col, &t) in tokens.iter().enumerate() {
        let parts = head.effective_parts(bundle, cache, side, t)?;
        for (c, part) in parts {
            let proj = basis.tr_mul(&part);
            for k in 0..n_k {
                if col == 0 {
                    candidates.push(CandidateIndex { component: c, sv: k });
                }
                columns[col].push(proj[k]);
            }
        }
    }
    let q = candidates.len();
    let coeffs = DMatrix::from_fn(q, tokens.len(), |i, j| columns[j][i]);
    Ok(CandidateSignals {
        side,
        d,
        candidates,
        coeffs,
        basis,
    })
}

/// Rows = candidates, columns = sources `0..=d`; entries already divided by `sqrt(R)`.
#[derive(Debug, Clone)]
pub struct ContributionMatrix {
    pub side: Side,
    pub d: usize,
    pub data: DMatrix<f64>,
    pub signals: CandidateSignals,
}

impl ContributionMatrix {
    /// Column sums: the scaled score row `A'_d / sqrt(R)`.
    pub fn column_sums(&self) -> Vec<f64> {
        column_sums(&self.data)
    }
}

pub(crate) fn column_sums(c: &DMatrix<f64>) -> Vec<f64> {
    c.row_sum().iter().copied().collect()
}

pub fn contribution_matrix(
    bundle: &ModelBundle,
    cache: &ActivationCache,
    head: &UnifiedHead,
    side: Side,
    d: usize,
) -> Result<ContributionMatrix> {
    let signals = candidate_signals(bundle, cache, head, side, d)?;
    let sources: Vec<usize> = (0..=d).collect();
    let (xd, xs) = head.effective_vectors(cache, d, &sources)?;
    let scale = (head.d_head() as f64).sqrt();
    let sigma = &head.svd.sigma;
    let q = signals.len();
    let data = match side {
        Side::Dst => {
            // (u_k . x~_c^d) sigma_k (v_k . x~_j)
            let vx: Vec<DVector<f64>> = xs.iter().map(|x| head.svd.v.tr_mul(x)).collect();
            DMatrix::from_fn(q, d + 1, |i, j| {
                let k = signals.candidates[i].sv;
                signals.coeffs[(i, 0)] * sigma[k] * vx[j][k] / scale
            })
        }
        Side::Src => {
            // (x~_d . u_k) sigma_k (v_k . x~_c^j)
            let ux = head.svd.u.tr_mul(&xd);
            DMatrix::from_fn(q, d + 1, |i, j| {
                let k = signals.candidates[i].sv;
                ux[k] * sigma[k] * signals.coeffs[(i, j)] / scale
            })
        }
    };
    Ok(ContributionMatrix {
        side,
        d,
        data,
        signals,
    })
}

/// `d softmax(z)_s / d z_j = p_s (delta_sj - p_j)`.
pub fn softmax_grad(z: &[f64], s: usize) -> Vec<f64> {
    let p = scaled_softmax(z, 1.0);
    (0..z.len())
        .map(|j| p[s] * (f64::from(u8::from(j == s)) - p[j]))
        .collect()
}

/// Integrated-gradients attribution of every row of `c` to softmax output `s`,
/// along the straight path from zero to the column sums, trapezoid rule with
/// `steps` intervals.
pub fn ig_attributions(c: &DMatrix<f64>, s: usize, steps: usize) -> Result<Vec<f64>> {
    let n = c.ncols();
    if n == 0 {
        return Err(Error::EmptyInput("contribution matrix has no columns".into()));
    }
    if s >= n {
        return Err(Error::CausalMask { d: n - 1, s });
    }
    if steps == 0 {
        return Err(Error::Config("IG needs at least one step".into()));
    }
    let a = column_sums(c);
    let mut weighted = DMatrix::zeros(n, steps + 1);
    for t in 0..=steps {
        let frac = t as f64 / steps as f64;
        let z: Vec<f64> = a.iter().map(|v| v * frac).collect();
        let p = scaled_softmax(&z, 1.0);
        let w = if t == 0 || t == steps { 0.5 } else { 1.0 } / steps as f64;
        // IG_i += w p_s (C_is - <C_i, p>)
        for j in 0..n {
            weighted[(j, t)] = -w * p[s] * p[j];
        }
        weighted[(s, t)] += w * p[s];
    }
    let per_step = c * weighted;
    Ok(per_step.column_sum().iter().copied().collect())
}

/// Result of a greedy removal over a contribution matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    /// Removed row indices in removal order.
    pub order: Vec<usize>,
    pub initial_weight: f64,
    pub final_weight: f64,
}

/// Row order used for removal: descending IG, ties by row index.
pub fn removal_order(ig: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ig.len()).collect();
    idx.sort_by(|&a, &b| ig[b].total_cmp(&ig[a]).then(a.cmp(&b)));
    idx
}

/// Removes rows in fixed IG order until `softmax(remaining row sums)[s] < tau`.
pub fn greedy_solve(c: &DMatrix<f64>, s: usize, tau: f64, ig: &[f64]) -> Result<GreedyOutcome> {
    let n = c.ncols();
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if s >= n {
        return Err(Error::CausalMask {
            d: n.saturating_sub(1),
            s,
        });
    }
    if ig.len() != c.nrows() {
        return Err(Error::Validation(format!(
            "{} attributions for {} candidates",
            ig.len(),
            c.nrows()
        )));
    }
    let mut remaining = column_sums(c);
    let initial_weight = scaled_softmax(&remaining, 1.0)[s];
    let mut weight = initial_weight;
    let mut order = Vec::new();
    if weight < tau {
        return Ok(GreedyOutcome {
            order,
            initial_weight,
            final_weight: weight,
        });
    }
    for i in removal_order(ig) {
        for (j, r) in remaining.iter_mut().enumerate() {
            *r -= c[(i, j)];
        }
        order.push(i);
        weight = scaled_softmax(&remaining, 1.0)[s];
        if weight < tau {
            return Ok(GreedyOutcome {
                order,
                initial_weight,
                final_weight: weight,
            });
        }
    }
    Err(Error::TauUnreachable { tau, weight })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedSignal {
    pub candidate: CandidateIndex,
    pub ig: f64,
    /// Residual-space vector at `d` (destination side) or at `s` (source side).
    pub vector: Vec<f64>,
}

/// Selected signals for one `(head, d, s, side)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSet {
    pub layer: usize,
    pub head: usize,
    pub d: usize,
    pub s: usize,
    pub side: Side,
    pub removed: Vec<RemovedSignal>,
    pub initial_weight: f64,
    pub final_weight: f64,
    pub tau_used: f64,
    /// Weight on `s` after replaying the removal through the model.
    pub replay_weight: f64,
}

/// Removal of a set of candidates, expressed as per-token effective-space deltas.
#[derive(Debug, Clone)]
pub struct Intervention {
    pub side: Side,
    pub layer: usize,
    pub head: usize,
    pub d: usize,
    pub removed: Vec<CandidateIndex>,
    /// `(token, delta)`: destination side touches only `d`, source side every `j <= d`.
    pub deltas: Vec<(usize, DVector<f64>)>,
}

impl Intervention {
    pub fn from_rows(signals: &CandidateSignals, layer: usize, head: usize, rows: &[usize]) -> Self {
        let d_model = signals.basis.nrows();
        let deltas = signals
            .tokens()
            .into_iter()
            .map(|t| {
                let mut delta = DVector::zeros(d_model);
                for &i in rows {
                    delta += signals.vector(i, t);
                }
                (t, delta)
            })
            .collect();
        Self {
            side: signals.side,
            layer,
            head,
            d: signals.d,
            removed: rows.iter().map(|&i| signals.candidates[i]).collect(),
            deltas,
        }
    }

    /// Rebuilds the intervention of a stored signal set from the cache it came from.
    pub fn from_signal_set(
        bundle: &ModelBundle,
        cache: &ActivationCache,
        head: &UnifiedHead,
        set: &SignalSet,
    ) -> Result<Self> {
        let signals = candidate_signals(bundle, cache, head, set.side, set.d)?;
        let rows = set
            .removed
            .iter()
            .map(|r| {
                signals
                    .candidates
                    .binary_search(&r.candidate)
                    .map_err(|_| Error::Validation(format!("unknown candidate {:?}", r.candidate)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_rows(&signals, set.layer, set.head, &rows))
    }

    /// Raw score row `0..=d` of the head with the removal applied.
    pub fn modified_scores(&self, bundle: &ModelBundle, cache: &ActivationCache) -> Result<Vec<f64>> {
        let hc = cache.head(self.layer, self.head)?;
        if self.d >= cache.len() {
            return Err(Error::OutOfRange(format!("token {}", self.d)));
        }
        let p = format!("blocks.{}.attn", self.layer);
        let (q, k) = (hc.q.transpose(), hc.k.transpose());
        let mut qd = q.column(self.d).into_owned();
        let mut keys: Vec<DVector<f64>> = (0..=self.d).map(|j| k.column(j).into_owned()).collect();
        match self.side {
            Side::Dst => {
                let wq = bundle.head_matrix(&format!("{p}.W_Q"), self.head)?;
                for (_, delta) in &self.deltas {
                    qd -= wq.tr_mul(delta);
                }
            }
            Side::Src => {
                let wk = bundle.head_matrix(&format!("{p}.W_K"), self.head)?;
                for (t, delta) in &self.deltas {
                    keys[*t] -= wk.tr_mul(delta);
                }
            }
        }
        Ok(keys.iter().map(|kj| qd.dot(kj)).collect())
    }
}

/// Outcome of replaying an intervention through the whole model.
#[derive(Debug, Clone)]
pub struct InterventionOutcome {
    /// New attention weights of row `d`, sources `0..=d`.
    pub row: Vec<f64>,
    pub logits: DMatrix<f64>,
    pub cache: ActivationCache,
}

/// Recomputes the head's row `d` with the removal applied and re-runs every
/// downstream computation.
pub fn apply_intervention(
    bundle: &ModelBundle,
    cache: &ActivationCache,
    intervention: &Intervention,
) -> Result<InterventionOutcome> {
    let cfg = &bundle.config;
    if intervention.layer >= cfg.n_layers || intervention.head >= cfg.n_heads {
        return Err(Error::OutOfRange(format!(
            "head ({},{})",
            intervention.layer, intervention.head
        )));
    }
    let row = intervention.modified_scores(bundle, cache)?;
    let ovr = ScoreOverride {
        layer: intervention.layer,
        head: intervention.head,
        d: intervention.d,
        row,
    };
    let new = forward_with_override(bundle, &cache.tokens, Some(&ovr))?;
    let weights = &new.layers[intervention.layer].heads[intervention.head].weights;
    let row = (0..=intervention.d)
        .map(|s| weights[(intervention.d, s)])
        .collect();
    Ok(InterventionOutcome {
        row,
        logits: new.logits.clone(),
        cache: new,
    })
}

/// Full solve for one attention weight: candidates, contributions, IG,
/// greedy removal, then a replay check of the selected removal.
pub fn solve_pair(
    bundle: &ModelBundle,
    cache: &ActivationCache,
    head: &UnifiedHead,
    d: usize,
    s: usize,
    side: Side,
    tau: f64,
) -> Result<SignalSet> {
    if s > d {
        return Err(Error::CausalMask { d, s });
    }
    let cm = contribution_matrix(bundle, cache, head, side, d)?;
    let ig = ig_attributions(&cm.data, s, DEFAULT_IG_STEPS)?;
    let out = greedy_solve(&cm.data, s, tau, &ig)?;
    let intervention = Intervention::from_rows(&cm.signals, head.layer, head.head, &out.order);
    let scores = intervention.modified_scores(bundle, cache)?;
    let replay_weight = scaled_softmax(&scores, (head.d_head() as f64).sqrt())[s];
    if !(replay_weight < tau + REPLAY_SLACK) {
        return Err(Error::InterventionCheck {
            layer: head.layer,
            head: head.head,
            d,
            s,
            weight: replay_weight,
            tau,
        });
    }
    let attach = match side {
        Side::Dst => d,
        Side::Src => s,
    };
    let removed = out
        .order
        .iter()
        .map(|&i| RemovedSignal {
            candidate: cm.signals.candidates[i],
            ig: ig[i],
            vector: cm.signals.vector(i, attach).iter().copied().collect(),
        })
        .collect();
    Ok(SignalSet {
        layer: head.layer,
        head: head.head,
        d,
        s,
        side,
        removed,
        initial_weight: out.initial_weight,
        final_weight: out.final_weight,
        tau_used: tau,
        replay_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{synth_toy_model, AttnVariant, NormMode, SynthConfig};
    use crate::model::forward;
    use crate::qk::build_unified_head;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_c(rng: &mut ChaCha8Rng, q: usize, n: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(q, n, |_, _| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    fn weight(c: &DMatrix<f64>, s: usize) -> f64 {
        scaled_softmax(&column_sums(c), 1.0)[s]
    }

    #[test]
    fn single_row_ig_is_exact_gap() {
        let c = DMatrix::from_row_slice(1, 3, &[0.3, 2.0, -1.0]);
        let ig = ig_attributions(&c, 1, 64).unwrap();
        assert!((ig[0] - (weight(&c, 1) - 1.0 / 3.0)).abs() < 1e-3);
    }

    #[test]
    fn zero_rows_give_zero_ig() {
        let c = DMatrix::zeros(4, 5);
        assert!(ig_attributions(&c, 2, 64).unwrap().iter().all(|&v| v == 0.0));
        assert!((weight(&c, 2) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ig_source_after_destination_rejected() {
        let c = DMatrix::zeros(2, 3);
        assert!(matches!(ig_attributions(&c, 3, 64), Err(Error::CausalMask { .. })));
    }

    #[test]
    fn coarse_ig_matches_fine_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = random_c(&mut rng, 6, 5, 1.0);
        let coarse = ig_attributions(&c, 2, 64).unwrap();
        let fine = ig_attributions(&c, 2, 65_536).unwrap();
        for (a, b) in coarse.iter().zip(&fine) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let z = [0.4, -1.2, 2.0, 0.1];
        let g = softmax_grad(&z, 2);
        let h = 1e-6;
        for j in 0..4 {
            let mut up = z;
            up[j] += h;
            let mut dn = z;
            dn[j] -= h;
            let fd = (scaled_softmax(&up, 1.0)[2] - scaled_softmax(&dn, 1.0)[2]) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3));
        }
    }

    #[test]
    fn below_tau_needs_no_removal() {
        let c = DMatrix::from_row_slice(2, 3, &[0.0, 0.1, 0.0, 0.0, -0.1, 0.0]);
        let ig = ig_attributions(&c, 1, 64).unwrap();
        let out = greedy_solve(&c, 1, 2.5 / 3.0, &ig).unwrap();
        assert!(out.order.is_empty());
    }

    #[test]
    fn one_dominant_row_suffices() {
        let mut c = DMatrix::zeros(4, 4);
        c[(2, 3)] = 8.0;
        let ig = ig_attributions(&c, 3, 64).unwrap();
        let out = greedy_solve(&c, 3, 2.5 / 4.0, &ig).unwrap();
        assert_eq!(out.order, vec![2]);
    }

    #[test]
    fn nonpositive_tau_rejected() {
        let c = DMatrix::zeros(1, 2);
        assert!(matches!(greedy_solve(&c, 0, 0.0, &[0.0]), Err(Error::Config(_))));
        assert!(matches!(
            greedy_solve(&c, 0, 0.4, &[0.0]),
            Err(Error::TauUnreachable { .. })
        ));
    }

    #[test]
    fn ties_broken_by_index() {
        assert_eq!(removal_order(&[0.5, 1.0, 0.5, -0.2, 1.0]), vec![1, 4, 0, 2, 3]);
    }

    #[test]
    fn greedy_never_beats_brute_force_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let q = rng.random_range(2..=10);
            let n = rng.random_range(2..=5);
            let c = random_c(&mut rng, q, n, 1.5);
            let s = n - 1;
            let tau = 2.5 / n as f64;
            let ig = ig_attributions(&c, s, 64).unwrap();
            let Ok(out) = greedy_solve(&c, s, tau, &ig) else {
                continue;
            };
            let mut best = usize::MAX;
            for mask in 0u32..(1 << q) {
                let mut r = column_sums(&c);
                for i in 0..q {
                    if mask & (1 << i) != 0 {
                        for j in 0..n {
                            r[j] -= c[(i, j)];
                        }
                    }
                }
                if scaled_softmax(&r, 1.0)[s] < tau {
                    best = best.min(mask.count_ones() as usize);
                }
            }
            assert!(out.order.len() >= best);
        }
    }

    fn toy(variant: AttnVariant) -> ModelBundle {
        synth_toy_model(&SynthConfig::new(2, 2, 8, variant, NormMode::FrozenLn, 21).with_init_std(0.6))
            .unwrap()
    }

    #[test]
    fn candidates_reconstruct_channel_projection() {
        for variant in AttnVariant::ALL {
            let b = toy(variant);
            let c = forward(&b, &[4, 8, 15, 16, 23]).unwrap();
            let h = build_unified_head(&b, 1, 1).unwrap();
            let (xd, xs) = h.effective_vectors(&c, 4, &[0, 1, 2, 3, 4]).unwrap();
            let dst = candidate_signals(&b, &c, &h, Side::Dst, 4).unwrap();
            let proj_u = &h.svd.u * h.svd.u.tr_mul(&xd);
            assert!((dst.sum_at(4) - proj_u).norm() < 1e-9);
            let src = candidate_signals(&b, &c, &h, Side::Src, 4).unwrap();
            for j in 0..=4 {
                let proj_v = &h.svd.v * h.svd.v.tr_mul(&xs[j]);
                assert!((src.sum_at(j) - proj_v).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn column_sums_match_cached_scores() {
        for variant in AttnVariant::ALL {
            let b = toy(variant);
            let c = forward(&b, &[1, 2, 3, 4, 5, 6]).unwrap();
            let h = build_unified_head(&b, 1, 0).unwrap();
            for side in [Side::Dst, Side::Src] {
                let cm = contribution_matrix(&b, &c, &h, side, 5).unwrap();
                for (j, v) in cm.column_sums().iter().enumerate() {
                    let want = c.layers[1].heads[0].scores[(5, j)] / 2.0;
                    assert!((v - want).abs() < 1e-8 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn removing_everything_gives_uniform_row() {
        let b = toy(AttnVariant::RopeBias);
        let c = forward(&b, &[3, 9, 27, 81]).unwrap();
        let h = build_unified_head(&b, 1, 1).unwrap();
        for side in [Side::Dst, Side::Src] {
            let cm = contribution_matrix(&b, &c, &h, side, 3).unwrap();
            let all: Vec<usize> = (0..cm.signals.len()).collect();
            let iv = Intervention::from_rows(&cm.signals, 1, 1, &all);
            let out = apply_intervention(&b, &c, &iv).unwrap();
            for w in out.row {
                assert!((w - 0.25).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_removal_changes_nothing() {
        let b = toy(AttnVariant::Bias);
        let c = forward(&b, &[3, 9, 27]).unwrap();
        let h = build_unified_head(&b, 1, 0).unwrap();
        let cm = contribution_matrix(&b, &c, &h, Side::Dst, 2).unwrap();
        let iv = Intervention::from_rows(&cm.signals, 1, 0, &[]);
        let out = apply_intervention(&b, &c, &iv).unwrap();
        assert!((out.logits - &c.logits).norm() < 1e-12);
    }

    #[test]
    fn single_removal_matches_row_sum_prediction() {
        let b = toy(AttnVariant::Rope);
        let c = forward(&b, &[5, 6, 7, 8, 9]).unwrap();
        let h = build_unified_head(&b, 1, 0).unwrap();
        for side in [Side::Dst, Side::Src] {
            let cm = contribution_matrix(&b, &c, &h, side, 4).unwrap();
            let i = (0..cm.signals.len())
                .max_by(|&a, &b| cm.data.row(a).norm().total_cmp(&cm.data.row(b).norm()))
                .unwrap();
            let mut r = cm.column_sums();
            for (j, v) in r.iter_mut().enumerate() {
                *v -= cm.data[(i, j)];
            }
            let predicted = scaled_softmax(&r, 1.0);
            let iv = Intervention::from_rows(&cm.signals, 1, 0, &[i]);
            let out = apply_intervention(&b, &c, &iv).unwrap();
            for (p, w) in predicted.iter().zip(&out.row) {
                assert!((p - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn solve_pair_on_strongest_weight() {
        let b = toy(AttnVariant::Bias);
        let c = forward(&b, &[1, 5, 2, 8, 3, 9]).unwrap();
        let h = build_unified_head(&b, 1, 1).unwrap();
        let w = &c.layers[1].heads[1].weights;
        let (d, s) = (5, (0..6).max_by(|&a, &b| w[(5, a)].total_cmp(&w[(5, b)])).unwrap());
        let tau = 2.5 / 6.0;
        assert!(w[(d, s)] >= tau, "fixture needs a peaked row");
        for side in [Side::Dst, Side::Src] {
            let set = solve_pair(&b, &c, &h, d, s, side, tau).unwrap();
            assert!(!set.removed.is_empty());
            assert!(set.replay_weight < tau);
            let again = solve_pair(&b, &c, &h, d, s, side, tau).unwrap();
            assert_eq!(set, again);
        }
    }

    #[test]
    fn single_token_prompt_removes_until_uniform_is_impossible() {
        let b = toy(AttnVariant::Plain);
        let c = forward(&b, &[7]).unwrap();
        let h = build_unified_head(&b, 0, 0).unwrap();
        // weight is 1 with or without any signal, and tau(0) = 2.5 > 1
        let set = solve_pair(&b, &c, &h, 0, 0, Side::Dst, 2.5).unwrap();
        assert!(set.removed.is_empty());
        assert!(matches!(
            solve_pair(&b, &c, &h, 0, 0, Side::Dst, 0.9),
            Err(Error::TauUnreachable { .. })
        ));
    }
}
