// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logits and attention rows against a scalar-loop reimplementation that reads
//! the raw `f32` tensors directly.

use qkcircuit::bundle::{synth_toy_model, AttnVariant, ModelBundle, NormMode, SynthConfig};
use qkcircuit::model::forward;

struct Naive<'a> {
    b: &'a ModelBundle,
}

impl Naive<'_> {
    fn t(&self, name: &str) -> Vec<f64> {
        self.b.tensors[name].data.iter().map(|&x| x as f64).collect()
    }

    fn ln(&self, x: &[f64], w: &str, bias: &str) -> Vec<f64> {
        if self.b.config.norm_mode == NormMode::None {
            return x.to_vec();
        }
        let (g, be) = (self.t(w), self.t(bias));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.b.config.ln_eps).sqrt();
        (0..x.len()).map(|i| g[i] * (x[i] - mean) * inv + be[i]).collect()
    }

    fn rotate(&self, v: &mut [f64], pos: usize) {
        let cfg = &self.b.config;
        if !cfg.attn_variant.has_rope() {
            return;
        }
        let rd = cfg.rotary_dim();
        let half = rd / 2;
        let base = cfg.rope_base.unwrap();
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / rd as f64);
            let (a, b) = (v[i], v[i + half]);
            v[i] = a * theta.cos() - b * theta.sin();
            v[i + half] = a * theta.sin() + b * theta.cos();
        }
    }

    /// Returns logits `[N][V]` and attention weights `[layer][head][d][s]`.
    #[allow(clippy::type_complexity)]
    fn run(&self, tokens: &[u32]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<Vec<f64>>>>) {
        let cfg = &self.b.config;
        let (n, dm, h, r, m, v) = (
            tokens.len(),
            cfg.d_model,
            cfg.n_heads,
            cfg.d_head,
            cfg.d_mlp,
            cfg.vocab_size,
        );
        let embed = self.t("embed");
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &tok)| {
                (0..dm)
                    .map(|i| {
                        let pe = if cfg.has_pos_embed {
                            self.t("pos_embed")[p * dm + i]
                        } else {
                            0.0
                        };
                        embed[tok as usize * dm + i] + pe
                    })
                    .collect()
            })
            .collect();
        let mut all_w = Vec::new();
        for l in 0..cfg.n_layers {
            let p = format!("blocks.{l}");
            let a = |s: &str| self.t(&format!("{p}.attn.{s}"));
            let (wq, wk, wv, wo, bv, bo) = (a("W_Q"), a("W_K"), a("W_V"), a("W_O"), a("b_V"), a("b_O"));
            let (bq, bk) = if cfg.attn_variant.has_bias() {
                (a("b_Q"), a("b_K"))
            } else {
                (vec![0.0; h * r], vec![0.0; h * r])
            };
            let xin: Vec<Vec<f64>> = x
                .iter()
                .map(|row| self.ln(row, &format!("{p}.ln1.w"), &format!("{p}.ln1.b")))
                .collect();
            let mut delta = vec![vec![0.0; dm]; n];
            let mut layer_w = Vec::new();
            for hh in 0..h {
                let proj = |w: &[f64], b: &[f64], row: &[f64]| -> Vec<f64> {
                    (0..r)
                        .map(|j| b[hh * r + j] + (0..dm).map(|i| row[i] * w[(hh * dm + i) * r + j]).sum::<f64>())
                        .collect()
                };
                let mut q: Vec<Vec<f64>> = xin.iter().map(|row| proj(&wq, &bq, row)).collect();
                let mut k: Vec<Vec<f64>> = xin.iter().map(|row| proj(&wk, &bk, row)).collect();
                let vals: Vec<Vec<f64>> = xin.iter().map(|row| proj(&wv, &bv, row)).collect();
                for pos in 0..n {
                    self.rotate(&mut q[pos], pos);
                    self.rotate(&mut k[pos], pos);
                }
                let mut head_w = Vec::new();
                for d in 0..n {
                    let sc: Vec<f64> = (0..=d)
                        .map(|s| (0..r).map(|j| q[d][j] * k[s][j]).sum::<f64>() / (r as f64).sqrt())
                        .collect();
                    let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = sc.iter().map(|z| (z - mx).exp()).collect();
                    let tot: f64 = e.iter().sum();
                    let w: Vec<f64> = e.iter().map(|z| z / tot).collect();
                    let z: Vec<f64> = (0..r).map(|j| (0..=d).map(|s| w[s] * vals[s][j]).sum()).collect();
                    for i in 0..dm {
                        delta[d][i] += bo[i] / h as f64
                            + (0..r).map(|j| z[j] * wo[(hh * r + j) * dm + i]).sum::<f64>();
                    }
                    head_w.push(w);
                }
                layer_w.push(head_w);
            }
            all_w.push(layer_w);
            for (xr, dr) in x.iter_mut().zip(&delta) {
                for (a, b) in xr.iter_mut().zip(dr) {
                    *a += b;
                }
            }
            let (win, bin, wout, bout) = (
                self.t(&format!("{p}.mlp.W_in")),
                self.t(&format!("{p}.mlp.b_in")),
                self.t(&format!("{p}.mlp.W_out")),
                self.t(&format!("{p}.mlp.b_out")),
            );
            for row in x.iter_mut() {
                let u = self.ln(row, &format!("{p}.ln2.w"), &format!("{p}.ln2.b"));
                let hid: Vec<f64> = (0..m)
                    .map(|j| {
                        let z = bin[j] + (0..dm).map(|i| u[i] * win[i * m + j]).sum::<f64>();
                        let c = (2.0 / std::f64::consts::PI).sqrt();
                        0.5 * z * (1.0 + (c * (z + 0.044715 * z * z * z)).tanh())
                    })
                    .collect();
                for i in 0..dm {
                    row[i] += bout[i] + (0..m).map(|j| hid[j] * wout[j * dm + i]).sum::<f64>();
                }
            }
        }
        let (ue, bu) = (self.t("unembed"), self.t("b_U"));
        let logits = x
            .iter()
            .map(|row| {
                let u = self.ln(row, "ln_final.w", "ln_final.b");
                (0..v)
                    .map(|j| bu[j] + (0..dm).map(|i| u[i] * ue[i * v + j]).sum::<f64>())
                    .collect()
            })
            .collect();
        (logits, all_w)
    }
}

fn check(bundle: &ModelBundle, tokens: &[u32]) {
    let (logits, weights) = Naive { b: bundle }.run(tokens);
    let cache = forward(bundle, tokens).unwrap();
    let mut worst: f64 = 0.0;
    for (p, row) in logits.iter().enumerate() {
        for (j, &want) in row.iter().enumerate() {
            worst = worst.max((cache.logits[(p, j)] - want).abs());
        }
    }
    assert!(worst < 1e-6, "{:?}: logit diff {worst}", bundle.config.attn_variant);
    for (l, layer) in weights.iter().enumerate() {
        for (h, head) in layer.iter().enumerate() {
            let got = &cache.layers[l].heads[h].weights;
            for (d, row) in head.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (s, &w) in row.iter().enumerate() {
                    assert!((got[(d, s)] - w).abs() < 1e-9);
                }
                for s in d + 1..tokens.len() {
                    assert_eq!(got[(d, s)], 0.0);
                }
            }
        }
    }
}

#[test]
fn forward_matches_scalar_oracle_for_every_variant() {
    let tokens = [3u32, 17, 5, 42, 8, 8, 29, 1, 60];
    for norm in [NormMode::FrozenLn, NormMode::None] {
        for (i, v) in AttnVariant::ALL.into_iter().enumerate() {
            let spec = SynthConfig::new(2, 2, 16, v, norm, 11 + i as u64).with_init_std(0.4);
            check(&synth_toy_model(&spec).unwrap(), &tokens);
        }
    }
}

#[test]
fn partial_rotary_dim_matches_oracle() {
    let spec = SynthConfig::new(2, 2, 16, AttnVariant::RopeBias, NormMode::FrozenLn, 5).with_init_std(0.4);
    let b = synth_toy_model(&spec).unwrap();
    let mut cfg = b.config.clone();
    cfg.rotary_dim = Some(4);
    let b = ModelBundle::new(cfg, b.tensors.clone(), b.vocab.clone(), b.metadata.clone()).unwrap();
    check(&b, &[9, 2, 33, 4, 11, 0]);
}

#[test]
fn no_position_embedding_matches_oracle() {
    let mut spec = SynthConfig::new(1, 4, 16, AttnVariant::Rope, NormMode::FrozenLn, 2).with_init_std(0.4);
    spec.has_pos_embed = false;
    check(&synth_toy_model(&spec).unwrap(), &[1, 2, 3, 4, 5]);
}
