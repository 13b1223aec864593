// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use num_bigint::BigUint;
use proptest::prelude::*;

use qkcircuit::analytics::clustering::{average_linkage, medoid, DistanceMatrix};
use qkcircuit::analytics::components::{jaccard_distance, ComponentKey, ComponentVector, Granularity};
use qkcircuit::autointerp::stats::{bh_reject, fisher_one_sided};
use qkcircuit::linalg::Ecdf;
use qkcircuit::model::ComponentId;
use qkcircuit::pairing::{pair_dst_with, pair_src_with};
use qkcircuit::solver::{greedy_solve, ig_attributions, softmax_grad};

fn head(i: u8) -> ComponentId {
    ComponentId::AttnHead {
        layer: (i / 4) as usize,
        head: (i % 4) as usize,
    }
}

fn node_set() -> impl Strategy<Value = ComponentVector> {
    prop::collection::btree_set(0u8..16, 0..10)
        .prop_map(|s| ComponentVector::new(Granularity::Node, s.into_iter().map(|i| ComponentKey::Node(head(i)))))
}

fn symmetric(n: usize, vals: &[f64]) -> DistanceMatrix {
    let mut data = vec![0.0; n * n];
    let mut it = vals.iter();
    for i in 0..n {
        for j in i + 1..n {
            let v = *it.next().unwrap();
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    DistanceMatrix::new(n, data).unwrap()
}

fn matrix() -> impl Strategy<Value = DistanceMatrix> {
    (2usize..14).prop_flat_map(|n| {
        prop::collection::vec(0.0f64..1.0, n * (n - 1) / 2).prop_map(move |v| symmetric(n, &v))
    })
}

/// Average linkage recomputed from leaf-pair averages on every step.
fn naive_upgma(dm: &DistanceMatrix) -> Vec<(usize, usize, f64)> {
    let n = dm.len();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut out = Vec::new();
    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let (a, b) = (&clusters[x], &clusters[y]);
                let mut sum = 0.0;
                for &i in &a.1 {
                    for &j in &b.1 {
                        sum += dm.get(i, j);
                    }
                }
                let avg = sum / (a.1.len() * b.1.len()) as f64;
                let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                let better = match best {
                    None => true,
                    Some((d, l, h, _, _)) => (avg, lo, hi) < (d, l, h),
                };
                if better {
                    best = Some((avg, lo, hi, x, y));
                }
            }
        }
        let (d, lo, hi, x, y) = best.unwrap();
        let mut members = clusters[x].1.clone();
        members.extend(&clusters[y].1);
        clusters.remove(y);
        clusters[x] = (n + step, members);
        out.push((lo, hi, d));
    }
    out
}

fn binom(n: u64, k: u64) -> BigUint {
    let mut c = BigUint::from(1u8);
    for i in 0..k {
        c = c * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    c
}

fn big_f64(x: &BigUint) -> f64 {
    x.to_string().parse().unwrap()
}

proptest! {
    #[test]
    fn jaccard_is_a_metric(a in node_set(), b in node_set(), c in node_set()) {
        let d = |x: &ComponentVector, y: &ComponentVector| jaccard_distance(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!((0.0..=1.0).contains(&d(&a, &b)));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        if d(&a, &b) == 0.0 {
            prop_assert_eq!(&a.keys, &b.keys);
        }
    }

    #[test]
    fn refinement_projects_onto_coarser_levels(
        edges in prop::collection::btree_set((0u8..16, 0u8..16, 0usize..3), 1..12)
    ) {
        let keys: Vec<ComponentKey> = edges
            .iter()
            .filter(|(u, d, _)| u / 4 < d / 4)
            .map(|&(u, d, k)| ComponentKey::EdgeSv(head(u), head(d), k))
            .collect();
        let sv = ComponentVector::new(Granularity::EdgeSv, keys.clone());
        let coarse: BTreeSet<ComponentKey> = edges
            .iter()
            .filter(|(u, d, _)| u / 4 < d / 4)
            .map(|&(u, d, _)| ComponentKey::Edge(head(u), head(d)))
            .collect();
        prop_assert_eq!(sv.coarsen_to_edges(), coarse.clone());
        let nodes: BTreeSet<ComponentKey> = coarse
            .iter()
            .flat_map(|k| match k {
                ComponentKey::Edge(u, d) => [ComponentKey::Node(*u), ComponentKey::Node(*d)],
                _ => unreachable!(),
            })
            .collect();
        prop_assert_eq!(sv.endpoint_nodes(), nodes);
    }

    #[test]
    fn ecdf_is_monotone_and_tallies(xs in prop::collection::vec(-5.0f64..5.0, 1..60), probes in prop::collection::vec(-6.0f64..6.0, 1..20)) {
        let e = Ecdf::build(xs.clone()).unwrap();
        let mut sorted = probes.clone();
        sorted.sort_by(f64::total_cmp);
        let mut last = 0.0;
        for p in sorted {
            let f = e.query(p);
            let tally = xs.iter().filter(|&&x| x <= p).count() as f64 / xs.len() as f64;
            prop_assert_eq!(f, tally);
            prop_assert!(f >= last);
            last = f;
        }
        prop_assert_eq!(e.query(5.0), 1.0);
    }

    #[test]
    fn linkage_matches_naive_reference(dm in matrix()) {
        let got = average_linkage(&dm).unwrap();
        let want = naive_upgma(&dm);
        prop_assert_eq!(got.merges.len(), want.len());
        for (m, w) in got.merges.iter().zip(&want) {
            prop_assert_eq!((m.a, m.b), (w.0, w.1));
            prop_assert!((m.height - w.2).abs() < 1e-12);
        }
        let mut leaves = got.leaf_order.clone();
        leaves.sort();
        prop_assert_eq!(leaves, (0..dm.len()).collect::<Vec<_>>());
    }

    #[test]
    fn linkage_heights_are_permutation_invariant(dm in matrix(), seed in any::<u64>()) {
        let n = dm.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pd = DistanceMatrix::new(n, (0..n * n).map(|x| dm.get(perm[x / n], perm[x % n])).collect()).unwrap();
        let h1: Vec<f64> = average_linkage(&dm).unwrap().merges.iter().map(|m| m.height).collect();
        let h2: Vec<f64> = average_linkage(&pd).unwrap().merges.iter().map(|m| m.height).collect();
        for (a, b) in h1.iter().zip(&h2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // flat partitions agree after mapping indices back
        let k = 1 + n / 3;
        let l1 = average_linkage(&dm).unwrap().cut_k(k).unwrap();
        let l2 = average_linkage(&pd).unwrap().cut_k(k).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(l2[i] == l2[j], l1[perm[i]] == l1[perm[j]]);
            }
        }
    }

    #[test]
    fn medoid_is_brute_force_argmin(dm in matrix(), mask in any::<u32>()) {
        let mut members: Vec<usize> = (0..dm.len()).filter(|i| mask >> i & 1 == 1).collect();
        if members.is_empty() {
            members.push(0);
        }
        let got = medoid(&members, |i, j| dm.get(i, j)).unwrap();
        let cost = |i: usize| members.iter().map(|&j| dm.get(i, j)).sum::<f64>();
        let best = members.iter().map(|&i| cost(i)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(cost(got), best);
        prop_assert!(members.iter().all(|&i| cost(i) > best || i >= got));
    }

    #[test]
    fn fisher_matches_exact_enumeration(at in 0u64..=20, rt in 0u64..=20, ar in 0u64..=20, rr in 0u64..=20) {
        let top = at + rt;
        let acc = at + ar;
        let n = top + ar + rr;
        prop_assume!(n <= 40 && n > 0);
        let rest = n - acc;
        let mut num = BigUint::from(0u8);
        for x in at..=top.min(acc) {
            if top - x <= rest {
                num += binom(acc, x) * binom(rest, top - x);
            }
        }
        let want = big_f64(&num) / big_f64(&binom(n, top));
        let got = fisher_one_sided(at, rt, ar, rr);
        prop_assert!((got - want).abs() <= 1e-12 * want, "{} vs {}", got, want);
    }

    #[test]
    fn fisher_is_monotone_in_accepted_top(at in 0u64..19, rt in 1u64..20, ar in 0u64..20, rr in 0u64..20) {
        // moving one top example from rejected to accepted cannot raise p
        prop_assert!(fisher_one_sided(at + 1, rt - 1, ar, rr) <= fisher_one_sided(at, rt, ar, rr) + 1e-15);
    }

    #[test]
    fn bh_matches_threshold_rule_and_is_a_prefix(p in prop::collection::vec(0.0f64..=1.0, 1..50), q in 0.01f64..0.3) {
        let got = bh_reject(&p, q).unwrap();
        let m = p.len();
        let mut sorted = p.clone();
        sorted.sort_by(f64::total_cmp);
        let k = (1..=m).rev().find(|&k| sorted[k - 1] <= k as f64 * q / m as f64).unwrap_or(0);
        prop_assert_eq!(got.iter().filter(|&&r| r).count(), k);
        let max_rejected = p.iter().zip(&got).filter(|x| *x.1).map(|x| *x.0).fold(f64::NEG_INFINITY, f64::max);
        let min_kept = p.iter().zip(&got).filter(|x| !*x.1).map(|x| *x.0).fold(f64::INFINITY, f64::min);
        prop_assert!(max_rejected <= min_kept);
    }

    #[test]
    fn pairing_maximises_bilinear_form(vals in prop::collection::vec(-1.0f64..1.0, 36), pv in prop::collection::vec(-1.0f64..1.0, 6)) {
        let omega = DMatrix::from_vec(6, 6, vals);
        let p = DVector::from_vec(pv);
        prop_assume!(p.norm() > 1e-3);
        let p = p.normalize();
        let Some(q) = pair_dst_with(&omega, &p).unwrap().unit() else { return Ok(()); };
        let best = p.dot(&(&omega * &q));
        prop_assert!((best - omega.tr_mul(&p).norm()).abs() < 1e-9);
        for k in 0..6 {
            let mut e = DVector::zeros(6);
            e[k] = 1.0;
            prop_assert!(p.dot(&(&omega * &e)).abs() <= best + 1e-12);
        }
        // pairing q back yields a destination at least as good as p
        let back = pair_src_with(&omega, &q).unwrap().unit().unwrap();
        prop_assert!(p.dot(&(&omega * &q)) <= back.dot(&(&omega * &q)) + 1e-12);
    }

    #[test]
    fn ig_is_complete(vals in prop::collection::vec(-2.0f64..2.0, 4 * 6), s in 0usize..6) {
        let c = DMatrix::from_vec(4, 6, vals);
        let ig = ig_attributions(&c, s, 64).unwrap();
        let z: Vec<f64> = c.row_sum().iter().copied().collect();
        let soft = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let t: f64 = e.iter().sum();
            e[s] / t
        };
        let total: f64 = ig.iter().sum();
        prop_assert!((total - (soft(&z) - 1.0 / 6.0)).abs() < 1e-3);
        let g = softmax_grad(&z, s);
        for j in 0..6 {
            let h = 1e-6;
            let mut up = z.clone();
            let mut dn = z.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (soft(&up) - soft(&dn)) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3));
        }
    }

    #[test]
    fn greedy_terminates_below_tau_or_exhausts(vals in prop::collection::vec(-3.0f64..3.0, 5 * 7), s in 0usize..7, scale in 0.3f64..4.0) {
        let c = DMatrix::from_vec(5, 7, vals);
        let tau = scale / 7.0;
        let ig = ig_attributions(&c, s, 16).unwrap();
        match greedy_solve(&c, s, tau, &ig) {
            Ok(out) => {
                prop_assert!(out.final_weight < tau);
                let mut seen = BTreeSet::new();
                prop_assert!(out.order.iter().all(|i| *i < 5 && seen.insert(*i)));
            }
            // with every row removed the weight is uniform, so only tau <= 1/n can fail
            Err(qkcircuit::Error::TauUnreachable { weight, .. }) => {
                prop_assert!(scale <= 1.0);
                prop_assert!((weight - 1.0 / 7.0).abs() < 1e-12);
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }
}
