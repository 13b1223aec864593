// SPDX-License-Identifier: MIT OR Apache-2.0

//! Average-linkage (UPGMA) clustering over a precomputed distance matrix,
//! medoid selection and group tightness.
//!
//! Cluster ids follow the usual convention: leaves are `0..n`, the cluster
//! created by merge `i` is `n + i`. Among equally close pairs the one with the
//! smallest `(lower id, higher id)` merges first.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense symmetric distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates symmetry (exact), zero diagonal and finite entries.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Validation(format!(
                "distance matrix needs {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(Error::Validation(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let (a, b) = (data[i * n + j], data[j * n + i]);
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::Validation(format!("bad distance at ({i},{j})")));
                }
                if a != b {
                    return Err(Error::NonSymmetric(i, j));
                }
            }
        }
        Ok(Self { n, data })
    }

    /// All pairwise distances of `items`, computed in parallel over rows.
    pub fn from_fn<T: Sync>(items: &[T], dist: impl Fn(&T, &T) -> f64 + Sync) -> Self {
        let n = items.len();
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| dist(&items[i], &items[j])).collect())
            .collect();
        let mut data = vec![0.0; n * n];
        for (i, row) in upper.iter().enumerate() {
            for (off, &v) in row.iter().enumerate() {
                let j = i + 1 + off;
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Mean over all unordered pairs.
    pub fn mean_pairwise(&self) -> Option<f64> {
        mean_within(self, &(0..self.n).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
    pub leaf_order: Vec<usize>,
}

type Key = (f64, usize, usize);

fn key_lt(a: &Key, b: &Key) -> bool {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).is_lt()
}

/// UPGMA merge sequence.
///
/// Each active slot caches its closest partner; after a merge only rows whose
/// cached partner disappeared are rescanned, so typical inputs cost `O(n^2)`.
pub fn average_linkage(dm: &DistanceMatrix) -> Result<Dendrogram> {
    let n = dm.len();
    if n == 0 {
        return Err(Error::EmptyInput("no items to cluster".into()));
    }
    let mut dist: Vec<Vec<f64>> = (0..n).map(|i| dm.row(i).to_vec()).collect();
    let mut id: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let key = |id: &[usize], dist: &[Vec<f64>], i: usize, j: usize| -> Key {
        let (a, b) = (id[i], id[j]);
        (dist[i][j], a.min(b), a.max(b))
    };
    let scan = |id: &[usize], dist: &[Vec<f64>], active: &[bool], i: usize| -> Option<(Key, usize)> {
        let mut best: Option<(Key, usize)> = None;
        for j in 0..n {
            if j != i && active[j] {
                let k = key(id, dist, i, j);
                if best.is_none_or(|(bk, _)| key_lt(&k, &bk)) {
                    best = Some((k, j));
                }
            }
        }
        best
    };
    let mut nearest: Vec<Option<(Key, usize)>> = (0..n).map(|i| scan(&id, &dist, &active, i)).collect();

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let (i, (k, j)) = nearest
            .iter()
            .enumerate()
            .filter(|(i, _)| active[*i])
            .filter_map(|(i, nb)| nb.map(|nb| (i, nb)))
            .min_by(|x, y| {
                if key_lt(&x.1 .0, &y.1 .0) {
                    std::cmp::Ordering::Less
                } else if key_lt(&y.1 .0, &x.1 .0) {
                    std::cmp::Ordering::Greater
                } else {
                    x.0.cmp(&y.0)
                }
            })
            .expect("at least two active clusters");
        let (keep, gone) = (i.min(j), i.max(j));
        let new_size = size[i] + size[j];
        merges.push(Merge {
            a: k.1,
            b: k.2,
            height: k.0,
            size: new_size,
        });
        for m in 0..n {
            if active[m] && m != keep && m != gone {
                let v = (size[keep] as f64 * dist[keep][m] + size[gone] as f64 * dist[gone][m])
                    / new_size as f64;
                dist[keep][m] = v;
                dist[m][keep] = v;
            }
        }
        active[gone] = false;
        id[keep] = n + step;
        size[keep] = new_size;
        nearest[gone] = None;
        nearest[keep] = scan(&id, &dist, &active, keep);
        for m in 0..n {
            if !active[m] || m == keep {
                continue;
            }
            let stale = matches!(nearest[m], Some((_, p)) if p == keep || p == gone);
            if stale {
                nearest[m] = scan(&id, &dist, &active, m);
            } else {
                let cand = key(&id, &dist, m, keep);
                if nearest[m].is_none_or(|(bk, _)| key_lt(&cand, &bk)) {
                    nearest[m] = Some((cand, keep));
                }
            }
        }
    }
    let leaf_order = leaf_order(n, &merges);
    Ok(Dendrogram {
        n,
        merges,
        leaf_order,
    })
}

/// Leaves left to right, placing the smaller child first (lower id on ties).
fn leaf_order(n: usize, merges: &[Merge]) -> Vec<usize> {
    if merges.is_empty() {
        return (0..n).collect();
    }
    let size_of = |c: usize| if c < n { 1 } else { merges[c - n].size };
    let mut out = Vec::with_capacity(n);
    let mut stack = vec![n + merges.len() - 1];
    while let Some(c) = stack.pop() {
        if c < n {
            out.push(c);
            continue;
        }
        let m = merges[c - n];
        let (first, second) = if (size_of(m.b), m.b) < (size_of(m.a), m.a) {
            (m.b, m.a)
        } else {
            (m.a, m.b)
        };
        stack.push(second);
        stack.push(first);
    }
    out
}

impl Dendrogram {
    fn labels_after(&self, n_merges: usize) -> Vec<usize> {
        let n = self.n;
        let mut parent: Vec<usize> = (0..n + n_merges).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (step, m) in self.merges.iter().take(n_merges).enumerate() {
            let c = n + step;
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            parent[ra] = c;
            parent[rb] = c;
        }
        let mut map = std::collections::HashMap::new();
        (0..n)
            .map(|i| {
                let r = find(&mut parent, i);
                let next = map.len();
                *map.entry(r).or_insert(next)
            })
            .collect()
    }

    /// Flat labels for exactly `k` clusters, numbered by first leaf occurrence.
    pub fn cut_k(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return Err(Error::Config(format!("cannot cut {} items into {k} clusters", self.n)));
        }
        Ok(self.labels_after(self.n - k))
    }

    /// Flat labels after applying every merge with height `<= h`.
    pub fn cut_height(&self, h: f64) -> Vec<usize> {
        let count = self.merges.iter().take_while(|m| m.height <= h).count();
        self.labels_after(count)
    }
}

/// Member minimising summed distance to the others; ties go to the lowest id.
pub fn medoid(members: &[usize], dist: impl Fn(usize, usize) -> f64) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for &i in members {
        let total: f64 = members.iter().map(|&j| if i == j { 0.0 } else { dist(i, j) }).sum();
        let better = match best {
            None => true,
            Some((bt, bi)) => total < bt || (total == bt && i < bi),
        };
        if better {
            best = Some((total, i));
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| Error::EmptyInput("medoid of an empty cluster".into()))
}

fn mean_within(dm: &DistanceMatrix, members: &[usize]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, &i) in members.iter().enumerate() {
        for &j in &members[x + 1..] {
            sum += dm.get(i, j);
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WithinDistanceRow {
    pub group: String,
    pub size: usize,
    pub mean_within: f64,
    pub normalized: f64,
}

/// Mean within-group distance divided by the mean distance over the whole matrix.
pub fn normalized_within_distance(
    dm: &DistanceMatrix,
    groups: &[(String, Vec<usize>)],
) -> Result<Vec<WithinDistanceRow>> {
    let overall = dm
        .mean_pairwise()
        .ok_or_else(|| Error::DegenerateGroup("need at least two items overall".into()))?;
    groups
        .iter()
        .map(|(name, members)| {
            let within = mean_within(dm, members)
                .ok_or_else(|| Error::DegenerateGroup(format!("group {name} has fewer than two members")))?;
            let normalized = if overall > 0.0 {
                within / overall
            } else if within == 0.0 {
                0.0
            } else {
                return Err(Error::DegenerateGroup("overall mean distance is zero".into()));
            };
            Ok(WithinDistanceRow {
                group: name.clone(),
                size: members.len(),
                mean_within: within,
                normalized,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(n: usize, v: &[f64]) -> DistanceMatrix {
        DistanceMatrix::new(n, v.to_vec()).unwrap()
    }

    #[test]
    fn three_point_example() {
        let d = dm(3, &[0.0, 0.9, 0.9, 0.9, 0.0, 0.1, 0.9, 0.1, 0.0]);
        let t = average_linkage(&d).unwrap();
        assert_eq!(t.merges.len(), 2);
        assert_eq!((t.merges[0].a, t.merges[0].b, t.merges[0].height), (1, 2, 0.1));
        assert_eq!((t.merges[1].a, t.merges[1].b), (0, 3));
        assert!((t.merges[1].height - 0.9).abs() < 1e-15);
        assert_eq!(t.leaf_order, vec![0, 1, 2]);
        assert_eq!(t.cut_k(2).unwrap(), vec![0, 1, 1]);
        assert_eq!(t.cut_height(0.5), vec![0, 1, 1]);
        assert_eq!(t.cut_height(1.0), vec![0, 0, 0]);
    }

    #[test]
    fn two_points_single_merge() {
        let t = average_linkage(&dm(2, &[0.0, 0.4, 0.4, 0.0])).unwrap();
        assert_eq!(t.merges, vec![Merge { a: 0, b: 1, height: 0.4, size: 2 }]);
    }

    #[test]
    fn asymmetric_input_rejected() {
        assert!(matches!(
            DistanceMatrix::new(2, vec![0.0, 0.4, 0.5, 0.0]),
            Err(Error::NonSymmetric(1, 0))
        ));
    }

    #[test]
    fn medoid_cases() {
        assert_eq!(medoid(&[4], |_, _| 1.0).unwrap(), 4);
        assert_eq!(medoid(&[7, 3], |_, _| 0.5).unwrap(), 3);
        assert!(medoid(&[], |_, _| 0.0).is_err());
    }

    #[test]
    fn identical_items_have_zero_within_distance() {
        let d = DistanceMatrix::from_fn(&[1, 1, 1, 1], |_, _| 0.0);
        let rows = normalized_within_distance(&d, &[("g".into(), vec![0, 1, 2])]).unwrap();
        assert_eq!(rows[0].normalized, 0.0);
        assert!(normalized_within_distance(&d, &[("g".into(), vec![0])]).is_err());
    }
}
