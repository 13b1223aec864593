// SPDX-License-Identifier: MIT OR Apache-2.0

//! One attention head's query-key interaction as a pure bilinear form.
//!
//! Every supported variant is rewritten as `x~_d^T Omega x~_s` with
//! `Omega = W_Q W_K^T`. Biases become residual-space offsets
//! `c_d = (W_Q^+)^T b_Q` and `c_s = (W_K^+)^T b_K`; rotary embeddings become
//! position-dependent linear maps `M_d = W_Q R^d W_Q^+` and
//! `M_s = (W_K^T)^+ R^{sT} W_K^T`, so that
//! `x~_d = M_d^T (x_d + c_d)` and `x~_s = M_s (x_s + c_s)`.
//!
//! Rotations use the row-vector convention `q_rot = q R^pos`, hence
//! `R^d R^{sT} = R^{d-s}`. Effective vectors are computed in the R-dimensional
//! head space and lifted back, so `M_d` and `M_s` are only materialised on request.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bundle::{ModelBundle, KAPPA_UNSUPPORTED};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, product_svd, pseudoinverse, SvdResult};
use crate::model::{rope_rotation, ActivationCache, ComponentId};

/// Query side (`Dst`) or key side (`Src`) of an attention score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Dst,
    Src,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Dst => "dst",
            Side::Src => "src",
        })
    }
}

impl std::str::FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dst" => Ok(Side::Dst),
            "src" => Ok(Side::Src),
            _ => Err(Error::Config(format!("unknown side {s:?}"))),
        }
    }
}

/// One singular triple of `Omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub k: usize,
    pub u: DVector<f64>,
    pub sigma: f64,
    pub v: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeParams {
    pub base: f64,
    pub rotary_dim: usize,
}

type OperatorMemo = RwLock<HashMap<(usize, Side), Arc<DMatrix<f64>>>>;

pub struct UnifiedHead {
    pub layer: usize,
    pub head: usize,
    /// `D x R`.
    pub wq: DMatrix<f64>,
    /// `D x R`.
    pub wk: DMatrix<f64>,
    /// `W_Q^+`, `R x D`.
    pub wq_pinv: DMatrix<f64>,
    /// `W_K^+`, `R x D`.
    pub wk_pinv: DMatrix<f64>,
    pub svd: SvdResult,
    pub b_q: Option<DVector<f64>>,
    pub b_k: Option<DVector<f64>>,
    pub c_d: DVector<f64>,
    pub c_s: DVector<f64>,
    pub rope: Option<RopeParams>,
    operators: OperatorMemo,
}

impl fmt::Debug for UnifiedHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UnifiedHead")
            .field("layer", &self.layer)
            .field("head", &self.head)
            .field("sigma", &self.svd.sigma.as_slice())
            .field("rope", &self.rope)
            .finish_non_exhaustive()
    }
}

/// Builds the unified form of head `(layer, head)`.
///
/// Heads whose `W_Q` or `W_K` condition number reaches the unsupported
/// threshold are rejected.
pub fn build_unified_head(bundle: &ModelBundle, layer: usize, head: usize) -> Result<UnifiedHead> {
    let cfg = &bundle.config;
    if layer >= cfg.n_layers || head >= cfg.n_heads {
        return Err(Error::OutOfRange(format!("head ({layer},{head})")));
    }
    let p = format!("blocks.{layer}.attn");
    let wq = bundle.head_matrix(&format!("{p}.W_Q"), head)?;
    let wk = bundle.head_matrix(&format!("{p}.W_K"), head)?;
    let (b_q, b_k) = if cfg.attn_variant.has_bias() {
        (
            Some(bundle.head_vector(&format!("{p}.b_Q"), head)?),
            Some(bundle.head_vector(&format!("{p}.b_K"), head)?),
        )
    } else {
        (None, None)
    };
    let rope = cfg.attn_variant.has_rope().then(|| RopeParams {
        base: cfg.rope_base.unwrap_or(10_000.0),
        rotary_dim: cfg.rotary_dim(),
    });
    UnifiedHead::new(layer, head, wq, wk, b_q, b_k, rope)
}

impl UnifiedHead {
    pub fn new(
        layer: usize,
        head: usize,
        wq: DMatrix<f64>,
        wk: DMatrix<f64>,
        b_q: Option<DVector<f64>>,
        b_k: Option<DVector<f64>>,
        rope: Option<RopeParams>,
    ) -> Result<Self> {
        let kappa = |w: &DMatrix<f64>| condition_number(w).unwrap_or(f64::INFINITY);
        let kappa = kappa(&wq).max(kappa(&wk));
        if !(kappa < KAPPA_UNSUPPORTED) {
            return Err(Error::UnsupportedHead { layer, head, kappa });
        }
        let wq_pinv = pseudoinverse(&wq)?;
        let wk_pinv = pseudoinverse(&wk)?;
        let svd = product_svd(&wq, &wk)?;
        let d = wq.nrows();
        let c_d = b_q
            .as_ref()
            .map(|b| wq_pinv.transpose() * b)
            .unwrap_or_else(|| DVector::zeros(d));
        let c_s = b_k
            .as_ref()
            .map(|b| wk_pinv.transpose() * b)
            .unwrap_or_else(|| DVector::zeros(d));
        Ok(Self {
            layer,
            head,
            wq,
            wk,
            wq_pinv,
            wk_pinv,
            svd,
            b_q,
            b_k,
            c_d,
            c_s,
            rope,
            operators: RwLock::new(HashMap::new()),
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_head(&self) -> usize {
        self.wq.ncols()
    }

    pub fn n_channels(&self) -> usize {
        self.svd.sigma.len()
    }

    pub fn channel(&self, k: usize) -> Channel {
        Channel {
            k,
            u: self.svd.u.column(k).into_owned(),
            sigma: self.svd.sigma[k],
            v: self.svd.v.column(k).into_owned(),
        }
    }

    pub fn channels(&self) -> Vec<Channel> {
        (0..self.n_channels()).map(|k| self.channel(k)).collect()
    }

    /// Dense `Omega`; only for checks on small heads.
    pub fn omega(&self) -> DMatrix<f64> {
        &self.wq * self.wk.transpose()
    }

    pub fn has_bias(&self) -> bool {
        self.b_q.is_some()
    }

    /// `R^pos`, or the identity for non-rotary heads.
    pub fn rotation(&self, pos: usize) -> DMatrix<f64> {
        let r = self.d_head();
        match self.rope {
            Some(p) => rope_rotation(r, p.rotary_dim, p.base, pos as f64),
            None => DMatrix::identity(r, r),
        }
    }

    /// Dense `(M_d, M_s)` for one position, memoised per head.
    pub fn rope_operators(&self, pos: usize) -> Result<(Arc<DMatrix<f64>>, Arc<DMatrix<f64>>)> {
        if self.rope.is_none() {
            return Err(Error::NotRotary);
        }
        let get = |side: Side| -> Arc<DMatrix<f64>> {
            if let Some(m) = self.operators.read().expect("memo lock").get(&(pos, side)) {
                return m.clone();
            }
            let rot = self.rotation(pos);
            let m = match side {
                Side::Dst => &self.wq * rot * &self.wq_pinv,
                Side::Src => self.wk_pinv.transpose() * rot.transpose() * self.wk.transpose(),
            };
            let m = Arc::new(m);
            self.operators
                .write()
                .expect("memo lock")
                .entry((pos, side))
                .or_insert(m)
                .clone()
        };
        Ok((get(Side::Dst), get(Side::Src)))
    }

    /// Maps a residual-space part linearly into effective space (no offset).
    pub fn map_part(&self, side: Side, part: &DVector<f64>, pos: usize) -> DVector<f64> {
        match (self.rope, side) {
            (None, _) => part.clone(),
            // x~ = (W_Q^+)^T (R^d)^T W_Q^T x
            (Some(_), Side::Dst) => {
                let head_space = self.rotation(pos).transpose() * (self.wq.transpose() * part);
                self.wq_pinv.transpose() * head_space
            }
            // x~ = (W_K^+)^T (R^s)^T W_K^T x
            (Some(_), Side::Src) => {
                let head_space = self.rotation(pos).transpose() * (self.wk.transpose() * part);
                self.wk_pinv.transpose() * head_space
            }
        }
    }

    pub fn offset(&self, side: Side) -> &DVector<f64> {
        match side {
            Side::Dst => &self.c_d,
            Side::Src => &self.c_s,
        }
    }

    /// Effective vector for a full residual input at `pos`.
    pub fn effective(&self, side: Side, x: &DVector<f64>, pos: usize) -> DVector<f64> {
        self.map_part(side, &(x + self.offset(side)), pos)
    }

    /// `x~_d^T Omega x~_s` without forming `Omega`.
    pub fn bilinear(&self, xd: &DVector<f64>, xs: &DVector<f64>) -> f64 {
        (self.wq.transpose() * xd).dot(&(self.wk.transpose() * xs))
    }

    /// Score through the unified form: effective vectors, then `Omega`.
    pub fn unified_score(&self, xd: &DVector<f64>, d: usize, xs: &DVector<f64>, s: usize) -> f64 {
        self.bilinear(&self.effective(Side::Dst, xd, d), &self.effective(Side::Src, xs, s))
    }

    /// Score through the model's own formula: `(x_d W_Q + b_Q) R^d . (x_s W_K + b_K) R^s`.
    pub fn native_score(&self, xd: &DVector<f64>, d: usize, xs: &DVector<f64>, s: usize) -> f64 {
        let mut q = self.wq.transpose() * xd;
        let mut k = self.wk.transpose() * xs;
        if let Some(b) = &self.b_q {
            q += b;
        }
        if let Some(b) = &self.b_k {
            k += b;
        }
        let q = self.rotation(d).transpose() * q;
        let k = self.rotation(s).transpose() * k;
        q.dot(&k)
    }

    /// Effective destination vector and effective source vectors read from the cache.
    pub fn effective_vectors(
        &self,
        cache: &ActivationCache,
        d: usize,
        sources: &[usize],
    ) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let layer = cache
            .layers
            .get(self.layer)
            .ok_or_else(|| Error::OutOfRange(format!("layer {}", self.layer)))?;
        let n = cache.len();
        if let Some(&bad) = std::iter::once(&d).chain(sources).find(|&&t| t >= n) {
            return Err(Error::OutOfRange(format!("token {bad} of {n}")));
        }
        let row = |t: usize| layer.attn_in.row(t).transpose();
        let xd = self.effective(Side::Dst, &row(d), d);
        let xs = sources
            .iter()
            .map(|&s| self.effective(Side::Src, &row(s), s))
            .collect();
        Ok((xd, xs))
    }

    /// Per-component decomposition of the effective vector at `token`.
    ///
    /// Includes the head's own bias offset as [`ComponentId::QkBias`] when
    /// present; the parts sum to the effective vector.
    pub fn effective_parts(
        &self,
        bundle: &ModelBundle,
        cache: &ActivationCache,
        side: Side,
        token: usize,
    ) -> Result<Vec<(ComponentId, DVector<f64>)>> {
        let mut parts: Vec<(ComponentId, DVector<f64>)> = cache
            .normed_input_parts(bundle, self.layer, token)?
            .into_iter()
            .map(|(c, o)| (c, self.map_part(side, &o, token)))
            .collect();
        if self.has_bias() {
            parts.push((
                ComponentId::QkBias {
                    layer: self.layer,
                    head: self.head,
                },
                self.map_part(side, self.offset(side), token),
            ));
        }
        parts.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(parts)
    }
}
