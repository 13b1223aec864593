// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fuzzing-style evaluation of an interpretation against random controls.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::client::{complete_with_retries, ChatClient, EndpointConfig, RetryPolicy};
use super::retrieval::ScoredContext;
use super::stats::{bh_reject_grouped, fisher_one_sided};
use crate::error::{Error, Result};

pub const FUZZ_SCORING_PROMPT: &str = include_str!("../../assets/fuzzing_scoring_prompt.txt");
pub const N_TOP: usize = 20;
pub const N_RANDOM: usize = 20;
pub const BATCH_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextLabel {
    Top,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzVerdict {
    pub batch: usize,
    /// 1-based position inside the batch prompt.
    pub index: usize,
    pub chunk: usize,
    pub d: usize,
    pub s: usize,
    pub truth: ContextLabel,
    pub judge: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub accepted_top: u64,
    pub rejected_top: u64,
    pub accepted_random: u64,
    pub rejected_random: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzResult {
    pub signal: String,
    pub layer: usize,
    pub verdicts: Vec<FuzzVerdict>,
    pub metrics: FuzzMetrics,
    pub fisher_p: f64,
    /// Set by [`apply_fdr`].
    #[serde(default)]
    pub interpretable: Option<bool>,
}

pub fn fuzz_metrics(verdicts: &[FuzzVerdict]) -> FuzzMetrics {
    let count = |label, j| verdicts.iter().filter(|v| v.truth == label && v.judge == j).count() as u64;
    let (at, rt) = (count(ContextLabel::Top, 1), count(ContextLabel::Top, 0));
    let (ar, rr) = (count(ContextLabel::Random, 1), count(ContextLabel::Random, 0));
    let n = (at + rt + ar + rr) as f64;
    let ratio = |a: u64, b: u64| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    FuzzMetrics {
        accuracy: if n == 0.0 { 0.0 } else { (at + rr) as f64 / n },
        precision: ratio(at, ar),
        recall: ratio(at, rt),
        accepted_top: at,
        rejected_top: rt,
        accepted_random: ar,
        rejected_random: rr,
    }
}

fn verdict_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"["']?(\d+)["']?\s*:\s*["']?(\d+)["']?"#).expect("static regex"))
}

/// Reads the judge's `{index: label}` dictionary; keys must be exactly `1..=n`.
pub fn parse_verdicts(raw: &str, n: usize) -> Result<Vec<u8>> {
    let start = raw.rfind('{').ok_or_else(|| Error::Parse("no dictionary in judge output".into()))?;
    let end = raw[start..]
        .find('}')
        .map(|e| start + e)
        .ok_or_else(|| Error::Parse("unterminated dictionary".into()))?;
    let mut map = BTreeMap::new();
    for cap in verdict_regex().captures_iter(&raw[start..=end]) {
        let k: usize = cap[1].parse().map_err(|_| Error::Parse(format!("bad key {}", &cap[1])))?;
        let v: u8 = match &cap[2] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Parse(format!("label {other} for example {k}"))),
        };
        if map.insert(k, v).is_some() {
            return Err(Error::Parse(format!("example {k} labelled twice")));
        }
    }
    if map.keys().copied().ne(1..=n) {
        return Err(Error::Parse(format!("expected keys 1..={n}, got {:?}", map.keys().collect::<Vec<_>>())));
    }
    Ok(map.into_values().collect())
}

pub fn fuzz_user_prompt(interpretation: &str, batch: &[&ScoredContext]) -> String {
    let mut out = format!("Feature interpretation: {interpretation}\nText examples:\n");
    for (i, c) in batch.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, c.text));
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn fuzz_score(
    client: &dyn ChatClient,
    endpoint: &EndpointConfig,
    policy: RetryPolicy,
    signal: &str,
    layer: usize,
    interpretation: &str,
    top: &[ScoredContext],
    random: &[ScoredContext],
    seed: u64,
) -> Result<FuzzResult> {
    if top.len() < N_TOP || random.len() != N_RANDOM {
        return Err(Error::Config(format!(
            "need {N_TOP} top and {N_RANDOM} random contexts, got {} and {}",
            top.len(),
            random.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tops: Vec<&ScoredContext> = top[..N_TOP].iter().collect();
    let mut rands: Vec<&ScoredContext> = random.iter().collect();
    tops.shuffle(&mut rng);
    rands.shuffle(&mut rng);
    let half = BATCH_SIZE / 2;
    let mut verdicts = Vec::with_capacity(N_TOP + N_RANDOM);
    for b in 0..N_TOP / half {
        let mut batch: Vec<(&ScoredContext, ContextLabel)> = tops[b * half..(b + 1) * half]
            .iter()
            .map(|&c| (c, ContextLabel::Top))
            .chain(rands[b * half..(b + 1) * half].iter().map(|&c| (c, ContextLabel::Random)))
            .collect();
        batch.shuffle(&mut rng);
        let contexts: Vec<&ScoredContext> = batch.iter().map(|x| x.0).collect();
        let req = endpoint.request(FUZZ_SCORING_PROMPT, &fuzz_user_prompt(interpretation, &contexts));
        let (labels, _) = complete_with_retries(client, &req, policy, |raw| parse_verdicts(raw, BATCH_SIZE))?;
        for (i, ((c, truth), judge)) in batch.iter().zip(labels).enumerate() {
            verdicts.push(FuzzVerdict {
                batch: b,
                index: i + 1,
                chunk: c.chunk,
                d: c.d,
                s: c.s,
                truth: *truth,
                judge,
            });
        }
    }
    let metrics = fuzz_metrics(&verdicts);
    let fisher_p = fisher_one_sided(
        metrics.accepted_top,
        metrics.rejected_top,
        metrics.accepted_random,
        metrics.rejected_random,
    );
    Ok(FuzzResult {
        signal: signal.to_string(),
        layer,
        verdicts,
        metrics,
        fisher_p,
        interpretable: None,
    })
}

/// Flags signals interpretable by Benjamini-Hochberg at level `q` within each
/// layer and returns the overall interpretable fraction.
pub fn apply_fdr(results: &mut [FuzzResult], q: f64) -> Result<f64> {
    let p: Vec<f64> = results.iter().map(|r| r.fisher_p).collect();
    let groups: Vec<usize> = results.iter().map(|r| r.layer).collect();
    let flags = bh_reject_grouped(&p, &groups, q)?;
    for (r, f) in results.iter_mut().zip(&flags) {
        r.interpretable = Some(*f);
    }
    Ok(super::stats::rejected_fraction(&flags))
}
