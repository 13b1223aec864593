// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-sided Fisher exact test and Benjamini-Hochberg FDR control.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn choose_exact(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c.checked_mul((n - i) as u128)? / (i + 1) as u128;
    }
    Some(c)
}

/// `P(X >= accepted_top)` for the hypergeometric count of accepted top
/// examples with both margins of the 2x2 table held fixed.
///
/// Table layout: rows are top / random, columns are accepted / rejected.
/// Counts are summed exactly in integers while the binomials fit in `u128`,
/// in log space otherwise.
pub fn fisher_one_sided(accepted_top: u64, rejected_top: u64, accepted_rand: u64, rejected_rand: u64) -> f64 {
    let top = accepted_top + rejected_top;
    let accepted = accepted_top + accepted_rand;
    let n = top + accepted_rand + rejected_rand;
    let rest = n - accepted;
    let hi = top.min(accepted);
    let terms = (accepted_top..=hi).filter(|&x| top - x <= rest);
    if let Some(denom) = choose_exact(n, top) {
        let num: Option<u128> = terms.clone().try_fold(0u128, |acc, x| {
            let t = choose_exact(accepted, x)?.checked_mul(choose_exact(rest, top - x)?)?;
            acc.checked_add(t)
        });
        if let Some(num) = num {
            return (num as f64 / denom as f64).min(1.0);
        }
    }
    let denom = ln_choose(n, top);
    let p: f64 = terms
        .map(|x| (ln_choose(accepted, x) + ln_choose(rest, top - x) - denom).exp())
        .sum();
    p.min(1.0)
}

/// Benjamini-Hochberg step-up rejections at level `q` over one family.
pub fn bh_reject(p: &[f64], q: f64) -> Result<Vec<bool>> {
    if let Some(&bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::PValueRange(bad));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let cutoff = order
        .iter()
        .enumerate()
        .filter(|(rank, &i)| p[i] <= (rank + 1) as f64 * q / m as f64)
        .map(|(rank, _)| rank + 1)
        .max()
        .unwrap_or(0);
    let mut out = vec![false; m];
    for &i in &order[..cutoff] {
        out[i] = true;
    }
    Ok(out)
}

/// Benjamini-Hochberg applied separately within each group.
pub fn bh_reject_grouped<G: Ord + Clone>(p: &[f64], groups: &[G], q: f64) -> Result<Vec<bool>> {
    if p.len() != groups.len() {
        return Err(Error::Validation(format!("{} p-values but {} group labels", p.len(), groups.len())));
    }
    let mut members: BTreeMap<G, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g.clone()).or_default().push(i);
    }
    let mut out = vec![false; p.len()];
    for idx in members.values() {
        let sub: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        for (&i, r) in idx.iter().zip(bh_reject(&sub, q)?) {
            out[i] = r;
        }
    }
    Ok(out)
}

pub fn rejected_fraction(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        0.0
    } else {
        flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let want = 1.0 / 137_846_528_820.0;
        let got = fisher_one_sided(20, 0, 0, 20);
        assert!((got - want).abs() / want < 1e-12);
    }

    #[test]
    fn symmetric_and_degenerate_tables() {
        assert!(fisher_one_sided(10, 10, 10, 10) > 0.5);
        assert_eq!(fisher_one_sided(0, 20, 0, 20), 1.0);
        assert_eq!(fisher_one_sided(0, 0, 0, 0), 1.0);
    }

    #[test]
    fn bh_threshold_table() {
        assert_eq!(bh_reject(&[0.01, 0.02, 0.04, 0.5], 0.05).unwrap(), vec![true, true, false, false]);
        assert_eq!(bh_reject(&[1.0; 5], 0.05).unwrap(), vec![false; 5]);
        assert_eq!(bh_reject(&[0.0; 5], 0.05).unwrap(), vec![true; 5]);
        assert!(matches!(bh_reject(&[1.5], 0.05), Err(Error::PValueRange(_))));
    }

    #[test]
    fn grouping_is_independent() {
        let p = [0.01, 0.04, 0.01, 0.04];
        let flat = bh_reject(&p, 0.05).unwrap();
        let grouped = bh_reject_grouped(&p, &[0, 0, 1, 1], 0.05).unwrap();
        assert_eq!(flat, vec![true; 4]);
        assert_eq!(grouped, vec![true; 4]);
        let g = bh_reject_grouped(&[0.01, 0.9, 0.03], &["a", "a", "b"], 0.05).unwrap();
        assert_eq!(g, vec![true, false, true]);
    }
}
