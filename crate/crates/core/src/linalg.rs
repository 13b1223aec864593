// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense float64 kernels: thin SVD of a low-rank product, pseudoinverse,
//! condition numbers and the empirical CDF.
//!
//! Everything here is pure. Singular values below [`RANK_CUTOFF`] times the
//! largest one are treated as zero for rank decisions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for rank decisions.
pub const RANK_CUTOFF: f64 = 1e-12;

/// Thin singular value decomposition `U diag(sigma) V^T`.
///
/// Columns of `u` and `v` are orthonormal, `sigma` is sorted descending, and
/// each `(u_k, v_k)` pair is sign-normalised so that the entry of `u_k` with
/// the largest magnitude is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Number of singular values above the rank cutoff.
    pub fn numerical_rank(&self) -> usize {
        let top = self.sigma.get(0).copied().unwrap_or(0.0);
        self.sigma
            .iter()
            .filter(|&&s| top > 0.0 && s >= RANK_CUTOFF * top)
            .count()
    }

    /// Dense `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (k, mut col) in us.column_iter_mut().enumerate() {
            col *= self.sigma[k];
        }
        us * self.v.transpose()
    }

    /// `max(||U^T U - I||_F, ||V^T V - I||_F)`.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.u).max(orthonormality_error(&self.v))
    }
}

/// `||M^T M - I||_F`.
pub fn orthonormality_error(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    (gram - DMatrix::identity(m.ncols(), m.ncols())).norm()
}

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} has non-finite entries")))
    }
}

/// Sorts singular triples descending and applies the sign convention.
fn canonicalize(u: DMatrix<f64>, sigma: DVector<f64>, v: DMatrix<f64>) -> SvdResult {
    let r = sigma.len();
    let mut order: Vec<usize> = (0..r).collect();
    // stable sort keeps the solver's order for exactly equal values
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let mut out_u = DMatrix::zeros(u.nrows(), r);
    let mut out_v = DMatrix::zeros(v.nrows(), r);
    let mut out_s = DVector::zeros(r);
    let top = order.first().map(|&i| sigma[i].max(0.0)).unwrap_or(0.0);
    for (k, &src) in order.iter().enumerate() {
        let mut uk = u.column(src).into_owned();
        let mut vk = v.column(src).into_owned();
        let pivot = uk.iamax();
        if uk[pivot] < 0.0 {
            uk = -uk;
            vk = -vk;
        }
        out_u.set_column(k, &uk);
        out_v.set_column(k, &vk);
        let s = sigma[src].max(0.0);
        out_s[k] = if top > 0.0 && s < RANK_CUTOFF * top { 0.0 } else { s };
    }
    SvdResult {
        u: out_u,
        sigma: out_s,
        v: out_v,
    }
}

/// Thin SVD of an arbitrary matrix, canonicalised.
pub fn thin_svd(m: &DMatrix<f64>) -> Result<SvdResult> {
    ensure_finite(m, "matrix")?;
    if m.is_empty() {
        return Err(Error::Validation("empty matrix".into()));
    }
    let svd = m.clone().svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Validation("SVD did not converge".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Validation("SVD did not converge".into()))?;
    Ok(canonicalize(u, svd.singular_values, v_t.transpose()))
}

/// SVD of `wq * wk^T` (D x D, rank <= R) from the two D x R factors.
///
/// Works through thin QR factorizations of each factor and an R x R core SVD;
/// the D x D product is never formed.
pub fn product_svd(wq: &DMatrix<f64>, wk: &DMatrix<f64>) -> Result<SvdResult> {
    if wq.shape() != wk.shape() {
        return Err(Error::Validation(format!(
            "factor shapes differ: {:?} vs {:?}",
            wq.shape(),
            wk.shape()
        )));
    }
    let (d, r) = wq.shape();
    if r == 0 || d < r {
        return Err(Error::Validation(format!(
            "factors must be D x R with D >= R > 0, got {d} x {r}"
        )));
    }
    ensure_finite(wq, "W_Q")?;
    ensure_finite(wk, "W_K")?;

    let qr_q = wq.clone().qr();
    let qr_k = wk.clone().qr();
    let (qq, rq) = (qr_q.q(), qr_q.r());
    let (qk, rk) = (qr_k.q(), qr_k.r());
    let core = &rq * rk.transpose();
    let core_svd = thin_svd(&core)?;
    let u = qq * &core_svd.u;
    let v = qk * &core_svd.v;
    Ok(canonicalize(u, core_svd.sigma, v))
}

/// Moore-Penrose pseudoinverse of a full-rank matrix.
///
/// Fails with [`Error::DegenerateRank`] when the smallest singular value is
/// below [`RANK_CUTOFF`] times the largest.
pub fn pseudoinverse(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = thin_svd(w)?;
    let top = svd.sigma[0];
    let bottom = svd.sigma[svd.sigma.len() - 1];
    if top <= 0.0 || bottom < RANK_CUTOFF * top {
        return Err(Error::DegenerateRank {
            sigma_min: bottom,
            cutoff: RANK_CUTOFF,
        });
    }
    let mut v_scaled = svd.v.clone();
    for (k, mut col) in v_scaled.column_iter_mut().enumerate() {
        col /= svd.sigma[k];
    }
    Ok(v_scaled * svd.u.transpose())
}

/// `sigma_max / sigma_min`; `f64::INFINITY` when the smallest singular value is zero.
pub fn condition_number(w: &DMatrix<f64>) -> Result<f64> {
    let svd = thin_svd(w)?;
    let top = svd.sigma[0];
    if top <= 0.0 {
        return Err(Error::UndefinedCondition);
    }
    let bottom = svd.sigma[svd.sigma.len() - 1];
    if bottom <= 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(top / bottom)
    }
}

/// Empirical cumulative distribution function.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn build(samples: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut sorted: Vec<f64> = samples.into_iter().collect();
        if sorted.is_empty() {
            return Err(Error::EmptyInput("ECDF needs at least one sample".into()));
        }
        if sorted.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("ECDF sample is not finite".into()));
        }
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    /// Fraction of samples `<= x`.
    pub fn query(&self, x: f64) -> f64 {
        let count = self.sorted.partition_point(|&v| v <= x);
        count as f64 / self.sorted.len() as f64
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// Sample value at cumulative fraction `p` (lower quantile).
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        let idx = ((p.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n) - 1;
        self.sorted[idx]
    }

    /// Distinct sample values with their cumulative fraction, for export.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, &v) in self.sorted.iter().enumerate() {
            let frac = (i + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 = frac,
                _ => out.push((v, frac)),
            }
        }
        out
    }
}
