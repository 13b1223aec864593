// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only forward pass that keeps the residual stream decomposed into
//! per-component outputs.
//!
//! Layer norms in `frozen_ln` mode are applied exactly, but the cache also
//! records the per-token `1/std` so each component's contribution to a norm
//! input can be pushed through the same affine map: `gamma * inv_std * (o_c -
//! mean(o_c))`. The additive `beta` then appears as its own pseudo-component.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bundle::{MlpActivation, ModelBundle, NormMode};
use crate::error::{Error, Result};

/// Which layer norm an [`ComponentId::LnBias`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LnSite {
    Attn,
    Final,
}

/// An atomic writer into a residual stream (or into a head's QK input).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ComponentId {
    Embed,
    PosEmbed,
    /// Additive term of a frozen layer norm. `layer` is `n_layers` for the final norm.
    LnBias { layer: usize, site: LnSite },
    /// Query/key bias offset of one head, folded into its bilinear form.
    QkBias { layer: usize, head: usize },
    AttnHead { layer: usize, head: usize },
    Mlp { layer: usize },
}

impl ComponentId {
    fn order_key(&self) -> (usize, u8, usize) {
        match *self {
            ComponentId::Embed => (0, 0, 0),
            ComponentId::PosEmbed => (0, 1, 0),
            ComponentId::LnBias { layer, .. } => (layer + 1, 0, 0),
            ComponentId::QkBias { layer, head } => (layer + 1, 1, head),
            ComponentId::AttnHead { layer, head } => (layer + 1, 2, head),
            ComponentId::Mlp { layer } => (layer + 1, 3, 0),
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, ComponentId::AttnHead { .. })
    }

    /// Heads and MLPs: the components that carry a layer of their own.
    pub fn is_block(&self) -> bool {
        matches!(self, ComponentId::AttnHead { .. } | ComponentId::Mlp { .. })
    }

    pub fn layer(&self) -> Option<usize> {
        match *self {
            ComponentId::AttnHead { layer, .. }
            | ComponentId::Mlp { layer }
            | ComponentId::QkBias { layer, .. }
            | ComponentId::LnBias { layer, .. } => Some(layer),
            ComponentId::Embed | ComponentId::PosEmbed => None,
        }
    }
}

impl Ord for ComponentId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl PartialOrd for ComponentId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ComponentId::Embed => write!(f, "embed"),
            ComponentId::PosEmbed => write!(f, "pos_embed"),
            ComponentId::LnBias {
                layer,
                site: LnSite::Attn,
            } => write!(f, "ln_bias.{layer}"),
            ComponentId::LnBias {
                layer,
                site: LnSite::Final,
            } => write!(f, "ln_bias.final.{layer}"),
            ComponentId::QkBias { layer, head } => write!(f, "qk_bias.{layer}.{head}"),
            ComponentId::AttnHead { layer, head } => write!(f, "head.{layer}.{head}"),
            ComponentId::Mlp { layer } => write!(f, "mlp.{layer}"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::GraphFormat(format!("bad component id {s:?}"));
        let parts: Vec<&str> = s.split('.').collect();
        let num = |i: usize| -> Result<usize> {
            parts.get(i).and_then(|p| p.parse().ok()).ok_or_else(bad)
        };
        let id = match (parts[0], parts.len()) {
            ("embed", 1) => ComponentId::Embed,
            ("pos_embed", 1) => ComponentId::PosEmbed,
            ("ln_bias", 3) if parts[1] == "final" => ComponentId::LnBias {
                layer: num(2)?,
                site: LnSite::Final,
            },
            ("ln_bias", 2) => ComponentId::LnBias {
                layer: num(1)?,
                site: LnSite::Attn,
            },
            ("qk_bias", 3) => ComponentId::QkBias {
                layer: num(1)?,
                head: num(2)?,
            },
            ("head", 3) => ComponentId::AttnHead {
                layer: num(1)?,
                head: num(2)?,
            },
            ("mlp", 2) => ComponentId::Mlp { layer: num(1)? },
            _ => return Err(bad()),
        };
        Ok(id)
    }
}

impl From<ComponentId> for String {
    fn from(c: ComponentId) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for ComponentId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Final-norm bias id for a model with `n_layers` layers.
pub fn final_ln_bias(n_layers: usize) -> ComponentId {
    ComponentId::LnBias {
        layer: n_layers,
        site: LnSite::Final,
    }
}

/// Per-head activations of one layer.
#[derive(Debug, Clone)]
pub struct HeadCache {
    /// Query after bias and rotation, `N x R`.
    pub q: DMatrix<f64>,
    /// Key after bias and rotation, `N x R`.
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Raw scores `q_d . k_s` (no `1/sqrt(R)`); zero above the diagonal.
    pub scores: DMatrix<f64>,
    /// Attention weights; exactly zero above the diagonal.
    pub weights: DMatrix<f64>,
    /// Residual write of this head, `N x D`, including its share of `b_O`.
    pub output: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Residual input `X^l`, `N x D`.
    pub resid: DMatrix<f64>,
    /// Attention input (after the pre-attention norm if any), `N x D`.
    pub attn_in: DMatrix<f64>,
    /// Frozen `1/std` of the pre-attention norm per token.
    pub ln_inv_std: Option<Vec<f64>>,
    pub heads: Vec<HeadCache>,
    /// MLP residual write, `N x D`.
    pub mlp_out: DMatrix<f64>,
}

/// Everything recorded by one forward pass. Immutable once built.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub tokens: Vec<u32>,
    pub token_strs: Vec<String>,
    pub embed_out: DMatrix<f64>,
    pub pos_out: Option<DMatrix<f64>>,
    pub layers: Vec<LayerCache>,
    /// Residual after the last block, `N x D`.
    pub final_resid: DMatrix<f64>,
    pub final_ln_inv_std: Option<Vec<f64>>,
    /// `N x V`.
    pub logits: DMatrix<f64>,
}

/// Replacement raw-score row for one head at one destination token.
#[derive(Debug, Clone)]
pub struct ScoreOverride {
    pub layer: usize,
    pub head: usize,
    pub d: usize,
    /// Raw scores for sources `0..=d`.
    pub row: Vec<f64>,
}

fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Softmax of `row / scale` with max subtraction.
pub fn scaled_softmax(row: &[f64], scale: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| ((x - m) / scale).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Rotary angle table: `theta_i = base^{-2i/rd}` for `i < rd/2`.
pub(crate) fn rope_rotation(r: usize, rd: usize, base: f64, pos: f64) -> DMatrix<f64> {
    // row-vector convention: q_rot = q * R(pos), NeoX half-split pairs (i, i + rd/2)
    let mut m = DMatrix::identity(r, r);
    let half = rd / 2;
    for i in 0..half {
        let theta = base.powf(-2.0 * i as f64 / rd as f64) * pos;
        let (s, c) = theta.sin_cos();
        m[(i, i)] = c;
        m[(i + half, i + half)] = c;
        m[(i, i + half)] = s;
        m[(i + half, i)] = -s;
    }
    m
}

/// Applies the frozen layer norm `gamma * (x - mean) * inv_std + beta` row-wise,
/// returning the output and the per-row `inv_std`.
fn layer_norm(
    x: &DMatrix<f64>,
    gamma: &DVector<f64>,
    beta: &DVector<f64>,
    eps: f64,
) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut out = DMatrix::zeros(n, d);
    let mut inv = Vec::with_capacity(n);
    for j in 0..n {
        let row = x.row(j);
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out[(j, i)] = gamma[i] * (row[i] - mean) * s + beta[i];
        }
        inv.push(s);
    }
    (out, inv)
}

/// Contribution of a raw residual part `o` to a frozen norm's output at one token.
pub fn frozen_ln_part(o: &DVector<f64>, gamma: &DVector<f64>, inv_std: f64) -> DVector<f64> {
    let mean = o.mean();
    o.zip_map(gamma, |v, g| g * (v - mean) * inv_std)
}

/// Runs the model on `tokens`.
pub fn forward(bundle: &ModelBundle, tokens: &[u32]) -> Result<ActivationCache> {
    forward_with_override(bundle, tokens, None)
}

/// Forward pass in which one head's raw score row is replaced before softmax.
pub fn forward_with_override(
    bundle: &ModelBundle,
    tokens: &[u32],
    ovr: Option<&ScoreOverride>,
) -> Result<ActivationCache> {
    let cfg = &bundle.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::EmptyInput("prompt has no tokens".into()));
    }
    if n > cfg.n_ctx {
        return Err(Error::PromptTooLong {
            len: n,
            max: cfg.n_ctx,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfVocab {
            id: bad as usize,
            vocab: cfg.vocab_size,
        });
    }
    if let Some(o) = ovr {
        if o.layer >= cfg.n_layers || o.head >= cfg.n_heads || o.d >= n || o.row.len() != o.d + 1
        {
            return Err(Error::OutOfRange(format!(
                "score override at layer {} head {} token {}",
                o.layer, o.head, o.d
            )));
        }
    }
    let (d_model, r) = (cfg.d_model, cfg.d_head);
    let frozen = cfg.norm_mode == NormMode::FrozenLn;
    let scale = (r as f64).sqrt();

    let embed = bundle.matrix("embed")?;
    let mut embed_out = DMatrix::zeros(n, d_model);
    for (j, &t) in tokens.iter().enumerate() {
        embed_out.set_row(j, &embed.row(t as usize));
    }
    let pos_out = if cfg.has_pos_embed {
        let pe = bundle.matrix("pos_embed")?;
        Some(pe.rows(0, n).into_owned())
    } else {
        None
    };
    let mut x = embed_out.clone();
    if let Some(p) = &pos_out {
        x += p;
    }

    let rope = cfg.attn_variant.has_rope().then(|| {
        let base = cfg.rope_base.unwrap_or(10_000.0);
        (0..n)
            .map(|p| rope_rotation(r, cfg.rotary_dim(), base, p as f64))
            .collect::<Vec<_>>()
    });

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("blocks.{l}");
        let (attn_in, ln_inv_std) = if frozen {
            let (h, inv) = layer_norm(
                &x,
                &bundle.vector(&format!("{p}.ln1.w"))?,
                &bundle.vector(&format!("{p}.ln1.b"))?,
                cfg.ln_eps,
            );
            (h, Some(inv))
        } else {
            (x.clone(), None)
        };
        let b_o = bundle.vector(&format!("{p}.attn.b_O"))? / cfg.n_heads as f64;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut attn_total = DMatrix::zeros(n, d_model);
        for h in 0..cfg.n_heads {
            let wq = bundle.head_matrix(&format!("{p}.attn.W_Q"), h)?;
            let wk = bundle.head_matrix(&format!("{p}.attn.W_K"), h)?;
            let wv = bundle.head_matrix(&format!("{p}.attn.W_V"), h)?;
            let wo = bundle.head_matrix(&format!("{p}.attn.W_O"), h)?;
            let mut q = &attn_in * &wq;
            let mut k = &attn_in * &wk;
            let mut v = &attn_in * &wv;
            if cfg.attn_variant.has_bias() {
                let bq = bundle.head_vector(&format!("{p}.attn.b_Q"), h)?;
                let bk = bundle.head_vector(&format!("{p}.attn.b_K"), h)?;
                for j in 0..n {
                    let mut row = q.row_mut(j);
                    row += bq.transpose();
                    let mut row = k.row_mut(j);
                    row += bk.transpose();
                }
            }
            let bv = bundle.head_vector(&format!("{p}.attn.b_V"), h)?;
            for j in 0..n {
                let mut row = v.row_mut(j);
                row += bv.transpose();
            }
            if let Some(rot) = &rope {
                for j in 0..n {
                    let qr = q.row(j) * &rot[j];
                    q.set_row(j, &qr);
                    let kr = k.row(j) * &rot[j];
                    k.set_row(j, &kr);
                }
            }
            let mut scores = DMatrix::zeros(n, n);
            let mut weights = DMatrix::zeros(n, n);
            for d in 0..n {
                let mut row: Vec<f64> = (0..=d).map(|s| q.row(d).dot(&k.row(s))).collect();
                if let Some(o) = ovr.filter(|o| o.layer == l && o.head == h && o.d == d) {
                    row.clone_from(&o.row);
                }
                let w = scaled_softmax(&row, scale);
                for s in 0..=d {
                    scores[(d, s)] = row[s];
                    weights[(d, s)] = w[s];
                }
            }
            let z = &weights * &v;
            let mut output = &z * &wo;
            for j in 0..n {
                let mut row = output.row_mut(j);
                row += b_o.transpose();
            }
            attn_total += &output;
            heads.push(HeadCache {
                q,
                k,
                v,
                scores,
                weights,
                output,
            });
        }
        let resid = x.clone();
        x += &attn_total;

        let mlp_in = if frozen {
            layer_norm(
                &x,
                &bundle.vector(&format!("{p}.ln2.w"))?,
                &bundle.vector(&format!("{p}.ln2.b"))?,
                cfg.ln_eps,
            )
            .0
        } else {
            x.clone()
        };
        let w_in = bundle.matrix(&format!("{p}.mlp.W_in"))?;
        let b_in = bundle.vector(&format!("{p}.mlp.b_in"))?;
        let w_out = bundle.matrix(&format!("{p}.mlp.W_out"))?;
        let b_out = bundle.vector(&format!("{p}.mlp.b_out"))?;
        let mut hidden = &mlp_in * &w_in;
        for j in 0..n {
            for i in 0..hidden.ncols() {
                let pre = hidden[(j, i)] + b_in[i];
                hidden[(j, i)] = match cfg.mlp_activation {
                    MlpActivation::GeluTanh => gelu_tanh(pre),
                    MlpActivation::Relu => pre.max(0.0),
                };
            }
        }
        let mut mlp_out = &hidden * &w_out;
        for j in 0..n {
            let mut row = mlp_out.row_mut(j);
            row += b_out.transpose();
        }
        x += &mlp_out;
        layers.push(LayerCache {
            resid,
            attn_in,
            ln_inv_std,
            heads,
            mlp_out,
        });
    }

    let (final_in, final_ln_inv_std) = if frozen {
        let (h, inv) = layer_norm(
            &x,
            &bundle.vector("ln_final.w")?,
            &bundle.vector("ln_final.b")?,
            cfg.ln_eps,
        );
        (h, Some(inv))
    } else {
        (x.clone(), None)
    };
    let mut logits = &final_in * bundle.matrix("unembed")?;
    let b_u = bundle.vector("b_U")?;
    for j in 0..n {
        let mut row = logits.row_mut(j);
        row += b_u.transpose();
    }
    let token_strs = match bundle.tokenizer() {
        Some(t) => t.decode(tokens),
        None => tokens.iter().map(|t| format!("<{t}>")).collect(),
    };
    Ok(ActivationCache {
        tokens: tokens.to_vec(),
        token_strs,
        embed_out,
        pos_out,
        layers,
        final_resid: x,
        final_ln_inv_std,
        logits,
    })
}

impl ActivationCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn head(&self, layer: usize, head: usize) -> Result<&HeadCache> {
        self.layers
            .get(layer)
            .and_then(|l| l.heads.get(head))
            .ok_or_else(|| Error::OutOfRange(format!("head ({layer},{head})")))
    }

    /// Attention weight `A_ds` of one head.
    pub fn weight(&self, layer: usize, head: usize, d: usize, s: usize) -> Result<f64> {
        let h = self.head(layer, head)?;
        if d >= self.len() {
            return Err(Error::OutOfRange(format!("token {d}")));
        }
        Ok(h.weights[(d, s)])
    }

    /// Raw residual writers present in `X^layer` (`layer == n_layers` for the final residual).
    pub fn residual_components(&self, layer: usize) -> Vec<ComponentId> {
        let mut out = vec![ComponentId::Embed];
        if self.pos_out.is_some() {
            out.push(ComponentId::PosEmbed);
        }
        for l in 0..layer.min(self.layers.len()) {
            for h in 0..self.layers[l].heads.len() {
                out.push(ComponentId::AttnHead { layer: l, head: h });
            }
            out.push(ComponentId::Mlp { layer: l });
        }
        out
    }

    /// Raw `N x D` residual write of a component.
    pub fn component_output(&self, c: ComponentId) -> Result<&DMatrix<f64>> {
        let missing = || Error::OutOfRange(format!("no residual output for {c}"));
        match c {
            ComponentId::Embed => Ok(&self.embed_out),
            ComponentId::PosEmbed => self.pos_out.as_ref().ok_or_else(missing),
            ComponentId::AttnHead { layer, head } => Ok(&self.head(layer, head)?.output),
            ComponentId::Mlp { layer } => self
                .layers
                .get(layer)
                .map(|l| &l.mlp_out)
                .ok_or_else(missing),
            _ => Err(missing()),
        }
    }

    /// Decomposition of the norm output feeding `layer` (or the unembedding when
    /// `layer == n_layers`) at `token`. The parts sum to that norm output exactly.
    pub fn normed_input_parts(
        &self,
        bundle: &ModelBundle,
        layer: usize,
        token: usize,
    ) -> Result<Vec<(ComponentId, DVector<f64>)>> {
        if token >= self.len() || layer > self.layers.len() {
            return Err(Error::OutOfRange(format!("layer {layer} token {token}")));
        }
        let (inv_std, gamma, beta, bias_id) = if bundle.config.norm_mode == NormMode::FrozenLn {
            let (inv, w, b, id) = if layer == self.layers.len() {
                (
                    self.final_ln_inv_std.as_ref(),
                    "ln_final.w".to_string(),
                    "ln_final.b".to_string(),
                    final_ln_bias(layer),
                )
            } else {
                (
                    self.layers[layer].ln_inv_std.as_ref(),
                    format!("blocks.{layer}.ln1.w"),
                    format!("blocks.{layer}.ln1.b"),
                    ComponentId::LnBias {
                        layer,
                        site: LnSite::Attn,
                    },
                )
            };
            let inv = inv.ok_or_else(|| Error::Validation("cache lacks norm scales".into()))?;
            (
                Some(inv[token]),
                Some(bundle.vector(&w)?),
                Some(bundle.vector(&b)?),
                Some(id),
            )
        } else {
            (None, None, None, None)
        };
        let mut parts = Vec::new();
        for c in self.residual_components(layer) {
            let o = self.component_output(c)?.row(token).transpose();
            let part = match (&gamma, inv_std) {
                (Some(g), Some(s)) => frozen_ln_part(&o, g, s),
                _ => o,
            };
            parts.push((c, part));
        }
        if let (Some(b), Some(id)) = (beta, bias_id) {
            parts.push((id, b));
        }
        parts.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(parts)
    }

    /// Largest relative residual-decomposition error over all layers and tokens.
    pub fn decomposition_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let n_layers = self.layers.len();
        for l in 0..=n_layers {
            let resid = if l == n_layers {
                &self.final_resid
            } else {
                &self.layers[l].resid
            };
            let mut sum = DMatrix::zeros(resid.nrows(), resid.ncols());
            for c in self.residual_components(l) {
                sum += self.component_output(c).expect("listed component");
            }
            for j in 0..resid.nrows() {
                let err = (resid.row(j) - sum.row(j)).norm();
                let scale = resid.row(j).norm().max(f64::MIN_POSITIVE);
                worst = worst.max(err / scale);
            }
        }
        worst
    }
}

/// Cosine similarity and norm ratio between a residual vector before and after
/// an intervention.
pub fn perturbation_metrics(before: &DVector<f64>, after: &DVector<f64>) -> Result<(f64, f64)> {
    let (nb, na) = (before.norm(), after.norm());
    if nb == 0.0 || na == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = (before.dot(after) / (nb * na)).clamp(-1.0, 1.0);
    Ok((cos, na / nb))
}
