// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qkcircuit::autointerp::client::{
    ChatClient, EndpointConfig, MockClient, RecordingClient, RetryPolicy,
};
use qkcircuit::autointerp::fuzz::fuzz_score;
use qkcircuit::autointerp::interpret::request_interpretation;
use qkcircuit::autointerp::retrieval::ScoredContext;
use serde_json::Value;

fn qk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkcircuit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qk(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    /// Toy bundle, 40 IOI prompts and their traced graphs.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let r = |n: &str| root.join(n);
        ok(&["synth-toy", "--layers", "3", "--heads", "2", "--d-model", "16", "--init-std", "0.6", "--seed", "3", "--out", p(&r("toy"))]);
        ok(&["gen-ioi", "--n", "40", "--seed", "1", "--out", p(&r("ioi"))]);
        ok(&[
            "trace",
            "--bundle",
            p(&r("toy/bundle")),
            "--prompts",
            p(&r("ioi/prompts.jsonl")),
            "--verify",
            "--out",
            p(&r("trace")),
        ]);
        Fixture { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn graphs(&self) -> Vec<PathBuf> {
        let mut g: Vec<PathBuf> = fs::read_dir(self.path("trace/graphs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        g.sort();
        g
    }
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn trace_edge_checks_pass_and_runs_reproduce() {
    let f = Fixture::new();
    let checks = fs::read_to_string(f.path("trace/edge_checks.tsv")).unwrap();
    let rows: Vec<&str> = checks.lines().skip(1).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.ends_with("\ttrue")), "{checks}");

    let manifest: Value = serde_json::from_str(&fs::read_to_string(f.path("trace/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "trace");
    assert!(manifest["outputs"]["edge_checks.tsv"].is_string());

    ok(&[
        "trace",
        "--bundle",
        p(&f.path("toy/bundle")),
        "--prompts",
        p(&f.path("ioi/prompts.jsonl")),
        "--verify",
        "--out",
        p(&f.path("trace2")),
    ]);
    let again: Value = serde_json::from_str(&fs::read_to_string(f.path("trace2/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"], again["outputs"]);
}

#[test]
fn cluster_edge_sv_assigns_every_graph() {
    let f = Fixture::new();
    let graphs = f.graphs();
    assert!(graphs.len() >= 30, "only {} graphs traced", graphs.len());
    let mut args = vec!["cluster", "--granularity", "edge_sv", "--k", "3"];
    let out = f.path("cluster");
    args.extend(["--out", p(&out)]);
    let names: Vec<&str> = graphs[..30].iter().map(|g| p(g)).collect();
    args.extend(names);
    ok(&args);
    let tsv = fs::read_to_string(out.join("assignments.tsv")).unwrap();
    assert_eq!(tsv.lines().skip(1).count(), 30);
    let dist = fs::read_to_string(out.join("distances.tsv")).unwrap();
    assert_eq!(dist.lines().count(), 31);
    let labels: std::collections::BTreeSet<&str> =
        tsv.lines().skip(1).map(|l| l.rsplit('\t').next().unwrap()).collect();
    assert!(labels.len() <= 3);

    let rep = f.path("represent");
    ok(&["represent", "--group-by", "template", "--out", p(&rep), p(&f.path("trace/graphs"))]);
    assert!(fs::read_to_string(rep.join("representatives.tsv")).unwrap().lines().count() > 1);
}

#[test]
fn fdr_on_p_value_table() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("p.tsv");
    fs::write(&input, "id\tgroup\tp\na\t0\t0.01\nb\t0\t0.02\nc\t0\t0.04\nd\t0\t0.5\n").unwrap();
    let out = dir.path().join("fdr");
    ok(&["fdr", "--q", "0.05", "--input", p(&input), "--out", p(&out)]);
    let flags: Vec<String> = fs::read_to_string(out.join("fdr.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap().to_string())
        .collect();
    assert_eq!(flags, ["true", "true", "false", "false"]);
}

#[test]
fn errors_are_single_line_and_classed() {
    let dir = tempfile::tempdir().unwrap();
    let out = qk(&["fdr", "--input", p(&dir.path().join("missing.tsv")), "--out", p(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(err.starts_with("error["));

    fs::write(dir.path().join("busy"), "").unwrap();
    let out = qk(&["gen-ioi", "--n", "2", "--out", p(dir.path())]);
    assert!(!out.status.success());
}

fn contexts_of(v: &Value, key: &str) -> Vec<ScoredContext> {
    serde_json::from_value(v[key].clone()).unwrap()
}

fn endpoint() -> EndpointConfig {
    EndpointConfig {
        url: String::new(),
        model: "mock".into(),
        auth_env: None,
        temperature: 0.0,
        max_tokens: None,
        timeout_secs: 120,
    }
}

#[test]
fn autointerp_pipeline_replays_recorded_responses() {
    let f = Fixture::new();
    let graph = f
        .graphs()
        .into_iter()
        .max_by_key(|g| fs::read_to_string(g).unwrap().len())
        .unwrap();
    let bundle = f.path("toy/bundle");
    ok(&["pair-signal", "--bundle", p(&bundle), "--graph", p(&graph), "--out", p(&f.path("pairs"))]);

    let prompts: Vec<String> = read_jsonl(&f.path("ioi/prompts.jsonl"))
        .iter()
        .map(|v| v["text"].as_str().unwrap().to_string())
        .collect();
    let corpus_txt = f.path("corpus.txt");
    fs::write(&corpus_txt, prompts.chunks(5).map(|c| c.join(" ")).collect::<Vec<_>>().join("\n")).unwrap();
    ok(&["build-corpus", "--bundle", p(&bundle), "--corpus", p(&corpus_txt), "--out", p(&f.path("corpus"))]);
    ok(&[
        "retrieve",
        "--bundle",
        p(&bundle),
        "--corpus",
        p(&f.path("corpus/corpus")),
        "--pairs",
        p(&f.path("pairs/pairs.jsonl")),
        "--top-k",
        "20",
        "--out",
        p(&f.path("retrieve")),
    ]);
    let records = read_jsonl(&f.path("retrieve/contexts.jsonl"));
    assert!(!records.is_empty());

    // record what a live endpoint would have answered, through the library's own request builders
    let replay = f.path("replay.jsonl");
    let ep = endpoint();
    let policy = RetryPolicy::immediate(0);
    let interpreter = MockClient::new(|r| {
        Ok(format!("[interpretation]: tokens seen {} chars in", r.user.len() % 7))
    });
    let judge = MockClient::new(|r| {
        let body: Vec<String> = r
            .user
            .lines()
            .filter_map(|l| l.split_once(". ").filter(|(k, _)| k.parse::<usize>().is_ok()))
            .map(|(k, t)| format!("{k}: {}", u8::from(t.contains("<<[["))))
            .collect();
        Ok(format!("{{{}}}", body.join(", ")))
    });
    let rec_i = RecordingClient::new(interpreter, &replay);
    let rec_j = RecordingClient::new(judge, &replay);
    for (i, r) in records.iter().enumerate() {
        let id = r["id"].as_str().unwrap();
        let layer = r["layer"].as_u64().unwrap() as usize;
        let head = r["head"].as_u64().unwrap() as usize;
        let top = contexts_of(r, "top");
        let interp = request_interpretation(&rec_i as &dyn ChatClient, &ep, policy, id, layer, head, &top).unwrap();
        fuzz_score(&rec_j, &ep, policy, id, layer, interp.text.as_deref().unwrap(), &top, &contexts_of(r, "random"), i as u64)
            .unwrap();
    }

    let ctx = f.path("retrieve/contexts.jsonl");
    ok(&["interpret", "--contexts", p(&ctx), "--model", "mock", "--replay", p(&replay), "--out", p(&f.path("interpret"))]);
    let interps = read_jsonl(&f.path("interpret/interpretations.jsonl"));
    assert_eq!(interps.len(), records.len());
    assert!(interps.iter().all(|v| v["text"].as_str().unwrap().starts_with("tokens seen")));

    ok(&[
        "score",
        "--contexts",
        p(&ctx),
        "--interpretations",
        p(&f.path("interpret/interpretations.jsonl")),
        "--model",
        "mock",
        "--replay",
        p(&replay),
        "--out",
        p(&f.path("score")),
    ]);
    let scores = read_jsonl(&f.path("score/scores.jsonl"));
    assert_eq!(scores.len(), records.len());
    ok(&["fdr", "--input", p(&f.path("score/scores.jsonl")), "--out", p(&f.path("fdr"))]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(f.path("fdr/fdr_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["total"], records.len());

    // a replay file missing the judge's answers cannot score
    let partial = f.path("partial.jsonl");
    let kept: Vec<String> = fs::read_to_string(&replay)
        .unwrap()
        .lines()
        .take(records.len())
        .map(str::to_string)
        .collect();
    fs::write(&partial, kept.join("\n") + "\n").unwrap();
    let out = qk(&[
        "score",
        "--contexts",
        p(&ctx),
        "--interpretations",
        p(&f.path("interpret/interpretations.jsonl")),
        "--model",
        "mock",
        "--replay",
        p(&partial),
        "--retries",
        "0",
        "--out",
        p(&f.path("score2")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error["));
}
