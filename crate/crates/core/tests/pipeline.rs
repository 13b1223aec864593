// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tracing, pairing and corpus retrieval on seeded toy bundles.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qkcircuit::autointerp::corpus::{build_corpus_cache_from_ids, CorpusStore, CHUNK_LEN};
use qkcircuit::autointerp::retrieval::{sample_random_contexts, score_contexts, score_pair};
use qkcircuit::bundle::{synth_toy_model, AttnVariant, ModelBundle, NormMode, SynthConfig};
use qkcircuit::graph::CircuitGraph;
use qkcircuit::model::ComponentId;
use qkcircuit::pairing::{pair_for_edge, SignalPair};
use qkcircuit::qk::{build_unified_head, Side};
use qkcircuit::tracer::{trace, verify_edges, TraceOptions};
use qkcircuit::Error;

fn toy(variant: AttnVariant, seed: u64) -> ModelBundle {
    synth_toy_model(&SynthConfig::new(3, 2, 16, variant, NormMode::FrozenLn, seed).with_init_std(0.6)).unwrap()
}

fn prompt(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<u32> {
    let n = rng.random_range(4..10);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn traced(bundle: &ModelBundle, n: usize, seed: u64) -> Vec<CircuitGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = bundle.config.vocab_size;
    let mut out = Vec::new();
    while out.len() < n {
        let toks = prompt(&mut rng, v);
        let target = rng.random_range(0..v as u32);
        match trace(bundle, "", &toks, target, &TraceOptions::default()) {
            Ok(g) => out.push(g),
            Err(Error::NoSeed) => {}
            Err(e) => panic!("{e}"),
        }
    }
    out
}

#[test]
fn traced_graphs_are_layer_ordered_and_sound() {
    for (i, v) in AttnVariant::ALL.into_iter().enumerate() {
        let b = toy(v, 40 + i as u64);
        let graphs = traced(&b, 6, i as u64);
        assert!(graphs.iter().any(|g| !g.edges.is_empty()), "{v:?}: every graph empty");
        for g in &graphs {
            g.check_integrity().unwrap();
            assert!(g.is_acyclic());
            for e in &g.edges {
                let up = &g.nodes[e.upstream];
                let down = &g.nodes[e.downstream];
                // component order strictly increases along edges, so no cycle can close
                assert!(up.component < down.component, "{} -> {}", up.component, down.component);
                assert!(up.token <= down.token);
                let attach = if e.side == Side::Dst { e.d } else { e.s };
                assert_eq!(up.token, attach);
            }
            for c in verify_edges(&b, g).unwrap() {
                assert!(c.passed, "{c:?}");
            }
        }
    }
}

#[test]
fn tracing_is_deterministic() {
    let b = toy(AttnVariant::RopeBias, 8);
    let first: Vec<String> = traced(&b, 3, 99).iter().map(|g| g.to_json().unwrap()).collect();
    for _ in 0..3 {
        let again: Vec<String> = traced(&b, 3, 99).iter().map(|g| g.to_json().unwrap()).collect();
        assert_eq!(first, again);
    }
    for text in &first {
        assert_eq!(&CircuitGraph::from_json(text).unwrap().to_json().unwrap(), text);
    }
}

#[test]
fn edge_pairs_lie_in_channel_subspaces() {
    let b = toy(AttnVariant::Bias, 3);
    let mut checked = 0;
    for g in traced(&b, 6, 5) {
        for e in &g.edges {
            let ComponentId::AttnHead { layer, head } = g.nodes[e.downstream].component else {
                unreachable!()
            };
            let h = build_unified_head(&b, layer, head).unwrap();
            let Some(pair) = pair_for_edge(&h, e).unwrap() else { continue };
            let (p, q) = (pair.p_vec(), pair.q_vec());
            assert!((p.norm() - 1.0).abs() < 1e-9 && (q.norm() - 1.0).abs() < 1e-9);
            let omega = h.omega();
            let (own, other, expect) = match e.side {
                Side::Dst => (&p, &q, omega.tr_mul(&p)),
                Side::Src => (&q, &p, &omega * &q),
            };
            assert!((other - expect.normalize()).norm() < 1e-8);
            // the derived direction sits in the span of the opposite singular basis
            let basis = if e.side == Side::Dst { &h.svd.v } else { &h.svd.u };
            let proj = basis * basis.tr_mul(other);
            assert!((proj - other).norm() < 1e-8);
            // and it pairs at least as well as the edge's own direction reflected back
            let score = |a: &DVector<f64>, c: &DVector<f64>| match e.side {
                Side::Dst => a.dot(&(&omega * c)),
                Side::Src => c.dot(&(&omega * a)),
            };
            assert!(score(own, other) >= score(own, own) - 1e-12);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

fn corpus(b: &ModelBundle, n_docs: usize, seed: u64) -> CorpusStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = b.config.vocab_size as u32;
    let docs: Vec<Vec<u32>> = (0..n_docs)
        .map(|_| (0..2 * CHUNK_LEN + 5).map(|_| rng.random_range(0..v)).collect())
        .collect();
    build_corpus_cache_from_ids(b, &docs, &[1]).unwrap()
}

fn random_pair(rng: &mut ChaCha8Rng, layer: usize, head: usize, dim: usize) -> SignalPair {
    let mut unit = || {
        let v = DVector::<f64>::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        v.normalize().as_slice().to_vec()
    };
    SignalPair {
        layer,
        head,
        p: unit(),
        q: unit(),
        channels: vec![],
    }
}

#[test]
fn top_k_matches_exhaustive_ranking() {
    let b = toy(AttnVariant::Rope, 2);
    let store = corpus(&b, 3, 1);
    assert_eq!(store.len(), 6);
    let h = build_unified_head(&b, 1, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let pair = random_pair(&mut rng, 1, 1, 16);
        let mut all = Vec::new();
        for (ci, c) in store.chunks.iter().enumerate() {
            for d in 0..CHUNK_LEN {
                for s in 0..=d {
                    all.push((score_pair(&h, c, &pair, d, s).unwrap(), ci, d, s));
                }
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
        let top = score_contexts(&store, &h, &pair, 25).unwrap();
        assert_eq!(top.len(), 25);
        for (got, want) in top.iter().zip(&all) {
            assert_eq!((got.chunk, got.d, got.s), (store.chunks[want.1].id, want.2, want.3));
            assert!((got.score - want.0).abs() <= 1e-12 * want.0.abs().max(1.0));
        }
        let random = sample_random_contexts(&store, &h, &pair, 20, &top, 7).unwrap();
        assert_eq!(random.len(), 20);
        for r in &random {
            assert!(r.s <= r.d);
            assert!(!top.iter().any(|t| (t.chunk, t.d, t.s) == (r.chunk, r.d, r.s)));
        }
    }
}

#[test]
fn planted_pair_ranks_first() {
    let b = toy(AttnVariant::Plain, 6);
    let mut store = corpus(&b, 4, 2);
    let h = build_unified_head(&b, 1, 0).unwrap();
    let pair = random_pair(&mut ChaCha8Rng::seed_from_u64(0), 1, 0, 16);
    let planted = 5;
    let x = store.chunks[planted].inputs.get_mut(&1).unwrap();
    for i in 0..16 {
        x[(20, i)] = 50.0 * pair.p[i];
        x[(9, i)] = 50.0 * pair.q[i];
    }
    let top = score_contexts(&store, &h, &pair, 3).unwrap();
    assert_eq!((top[0].chunk, top[0].d, top[0].s), (store.chunks[planted].id, 20, 9));
    assert!(top[0].text.contains("<<") && top[0].text.contains("[["));
}

#[test]
fn corpus_cache_round_trips() {
    let b = toy(AttnVariant::Bias, 1);
    let store = corpus(&b, 2, 3);
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path(), false).unwrap();
    let back = CorpusStore::load(dir.path()).unwrap();
    assert_eq!(back, store);
    back.check_compatible(&b).unwrap();
    let other = synth_toy_model(&SynthConfig::new(1, 2, 8, AttnVariant::Plain, NormMode::None, 0)).unwrap();
    assert!(back.check_compatible(&other).is_err());
}
