// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qkcircuit::analytics::clustering::{average_linkage, medoid, normalized_within_distance, DistanceMatrix};
use qkcircuit::analytics::components::{component_vector, jaccard_distance, ComponentVector, Granularity};
use qkcircuit::analytics::ioi::{gen_ioi_dataset, IoiPrompt};
use qkcircuit::analytics::signals::signal_similarity;
use qkcircuit::autointerp::client::{
    ChatClient, EndpointConfig, HttpClient, RecordingClient, ReplayClient, RetryPolicy,
};
use qkcircuit::autointerp::corpus::{build_corpus_cache, CorpusStore};
use qkcircuit::autointerp::fuzz::{apply_fdr, fuzz_score, FuzzResult, N_RANDOM, N_TOP};
use qkcircuit::autointerp::interpret::{request_interpretation, InterpretationRecord};
use qkcircuit::autointerp::retrieval::{sample_random_contexts, score_contexts, ScoredContext, DEFAULT_TOP_K};
use qkcircuit::autointerp::stats::{bh_reject_grouped, rejected_fraction};
use qkcircuit::bundle::{load_bundle, save_bundle, synth_toy_model, AttnVariant, ModelBundle, NormMode, SynthConfig};
use qkcircuit::graph::{export_graph, CircuitGraph, GraphFormat};
use qkcircuit::pairing::{pair_for_edge, SignalPair};
use qkcircuit::qk::{build_unified_head, Side, UnifiedHead};
use qkcircuit::tokenizer::Tokenizer;
use qkcircuit::tracer::{calibrate_tau, trace, verify_edges, TauPolicy, TraceOptions, DEFAULT_RHO, DEFAULT_TAU_SCALE};
use qkcircuit::{Error, Result};

use crate::config::RunConfig;
use crate::rundir::RunDir;
use crate::{Cli, Command, EndpointOpts};

pub const DEFAULT_Q: f64 = 0.05;
pub const DEFAULT_CUT_HEIGHT: f64 = 0.5;

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    run: RunDir,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    let seed = cli.global.seed.or(cfg.seed).unwrap_or(0);
    if let Some(j) = cli.global.jobs.or(cfg.jobs) {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // A second initialisation in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let name = cli.command.name();
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("qkcircuit-out").join(name));
    let run = RunDir::create(&out, cli.global.force)?;
    let ctx = Ctx { cfg, seed, run };
    match cli.command {
        Command::SynthToy { layers, heads, d_model, variant, norm, init_std } => {
            synth_toy(&ctx, layers, heads, d_model, &variant, &norm, init_std)?
        }
        Command::Trace {
            bundle,
            prompt,
            prompts,
            target,
            target_id,
            contrast,
            contrast_subject,
            tau_scale,
            rho,
            no_vectors,
            verify,
        } => {
            let opts = TraceOptions {
                tau: TauPolicy::new(tau_scale.or(ctx.cfg.tau_scale).unwrap_or(DEFAULT_TAU_SCALE))?,
                rho: rho.or(ctx.cfg.rho).unwrap_or(DEFAULT_RHO),
                contrast: None,
                keep_vectors: !no_vectors,
            };
            if !(0.0..=1.0).contains(&opts.rho) {
                return Err(Error::Config(format!("rho must lie in [0, 1], got {}", opts.rho)));
            }
            let b = open_bundle(&ctx, bundle)?;
            let jobs = match (prompt, prompts) {
                (Some(text), None) => {
                    let tok = tokenizer(&b)?;
                    let target = resolve_token(&tok, target.as_deref(), target_id)?
                        .ok_or_else(|| Error::Config("--target or --target-id is required".into()))?;
                    let contrast = resolve_token(&tok, contrast.as_deref(), None)?;
                    vec![TraceJob { prompt: text, target, contrast, meta: BTreeMap::new() }]
                }
                (None, Some(path)) => ioi_jobs(&b, &path, contrast_subject)?,
                _ => return Err(Error::Config("give exactly one of --prompt or --prompts".into())),
            };
            run_trace(&ctx, &b, jobs, &opts, verify)?
        }
        Command::CalibrateTau { bundle, prompts } => {
            let b = open_bundle(&ctx, bundle)?;
            calibrate(&ctx, &b, &prompts)?
        }
        Command::GenIoi { n, words } => {
            let words = match words {
                Some(p) => serde_json::from_str(&read_text(&p)?)?,
                None => ctx.cfg.words.clone().unwrap_or_default(),
            };
            let prompts = gen_ioi_dataset(&words, n, ctx.seed)?;
            ctx.run.write_jsonl("prompts.jsonl", &prompts)?;
            println!("{} prompts", prompts.len());
        }
        Command::Cluster { graphs, granularity, k, height } => {
            let g = granularity.or(ctx.cfg.granularity).unwrap_or(Granularity::Edge);
            cluster(&ctx, &graphs, g, k, height)?
        }
        Command::Represent { graphs, granularity, group_by, assignments } => {
            let g = granularity.or(ctx.cfg.granularity).unwrap_or(Granularity::Edge);
            represent(&ctx, &graphs, g, group_by.as_deref(), assignments.as_deref())?
        }
        Command::CompareSignals { a, b } => {
            let (dst, src) = signal_similarity(&CircuitGraph::load(&a)?, &CircuitGraph::load(&b)?)?;
            ctx.run.write("sim_dst.tsv", dst.to_tsv())?;
            ctx.run.write("sim_src.tsv", src.to_tsv())?;
            println!("{} x {} nodes", dst.rows.len(), dst.cols.len());
        }
        Command::PairSignal { bundle, graph, edge } => {
            let b = open_bundle(&ctx, bundle)?;
            pair_signals(&ctx, &b, &graph, edge)?
        }
        Command::BuildCorpus { bundle, corpus, layers } => {
            let b = open_bundle(&ctx, bundle)?;
            let docs: Vec<String> = read_text(&corpus)?.lines().map(str::to_string).collect();
            let layers = if layers.is_empty() { (0..b.config.n_layers).collect() } else { layers };
            let store = build_corpus_cache(&b, &docs, &layers)?;
            if store.is_empty() {
                return Err(Error::EmptyInput("no document reaches one full chunk".into()));
            }
            store.save(&ctx.run.path("corpus"), false)?;
            println!("{} chunks", store.len());
        }
        Command::Retrieve { bundle, corpus, pairs, top_k } => {
            let b = open_bundle(&ctx, bundle)?;
            let k = top_k.or(ctx.cfg.top_k).unwrap_or(DEFAULT_TOP_K);
            if k < N_TOP {
                return Err(Error::Config(format!("top-k must be at least {N_TOP}")));
            }
            retrieve(&ctx, &b, &corpus, &pairs, k)?
        }
        Command::Interpret { contexts, endpoint } => {
            let ep = endpoint_config(&endpoint, ctx.cfg.interpreter.as_ref())?;
            interpret(&ctx, &contexts, &endpoint, &ep)?
        }
        Command::Score { contexts, interpretations, endpoint } => {
            let ep = endpoint_config(&endpoint, ctx.cfg.judge.as_ref())?;
            score(&ctx, &contexts, &interpretations, &endpoint, &ep)?
        }
        Command::Fdr { input, q } => {
            let q = q.or(ctx.cfg.q).unwrap_or(DEFAULT_Q);
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("q must lie in (0, 1], got {q}")));
            }
            fdr(&ctx, &input, q)?
        }
        Command::Export { graph, format } => {
            let fmt: GraphFormat = format.parse()?;
            let ext = match fmt {
                GraphFormat::Json => "json",
                GraphFormat::Dot => "dot",
                GraphFormat::Html => "html",
            };
            export_graph(&CircuitGraph::load(&graph)?, fmt, &ctx.run.path(&format!("graph.{ext}")))?;
        }
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    ctx.run.finish(name, &args, ctx.seed)
}

fn open_bundle(ctx: &Ctx, flag: Option<PathBuf>) -> Result<ModelBundle> {
    let path = flag
        .or_else(|| ctx.cfg.bundle.clone())
        .ok_or_else(|| Error::Config("no bundle given (--bundle or `bundle` in the config)".into()))?;
    load_bundle(&path)
}

fn tokenizer(b: &ModelBundle) -> Result<Tokenizer> {
    b.tokenizer()
        .ok_or_else(|| Error::Config("bundle carries no vocabulary; pass token ids".into()))
}

fn resolve_token(tok: &Tokenizer, text: Option<&str>, id: Option<u32>) -> Result<Option<u32>> {
    match (text, id) {
        (_, Some(id)) => {
            if id as usize >= tok.vocab_size() {
                return Err(Error::TokenOutOfVocab { id: id as usize, vocab: tok.vocab_size() });
            }
            Ok(Some(id))
        }
        (Some(t), None) => tok
            .token_id(t)
            .map(Some)
            .ok_or_else(|| Error::UnknownToken(t.to_string())),
        (None, None) => Ok(None),
    }
}

fn synth_toy(ctx: &Ctx, layers: usize, heads: usize, d_model: usize, variant: &str, norm: &str, init_std: Option<f64>) -> Result<()> {
    let variant: AttnVariant = variant.parse()?;
    let norm: NormMode = norm.parse()?;
    let mut spec = SynthConfig::new(layers, heads, d_model, variant, norm, ctx.seed);
    if let Some(s) = init_std {
        spec = spec.with_init_std(s);
    }
    let b = synth_toy_model(&spec)?;
    save_bundle(&b, &ctx.run.path("bundle"), false)?;
    let worst = b
        .diagnostics()
        .heads
        .iter()
        .map(|h| h.kappa_q.max(h.kappa_k))
        .fold(0.0, f64::max);
    println!("bundle written; largest head condition number {worst:.3}");
    Ok(())
}

struct TraceJob {
    prompt: String,
    target: u32,
    contrast: Option<u32>,
    meta: BTreeMap<String, String>,
}

fn ioi_jobs(b: &ModelBundle, path: &Path, contrast_subject: bool) -> Result<Vec<TraceJob>> {
    let tok = tokenizer(b)?;
    let prompts: Vec<IoiPrompt> = read_jsonl(path)?;
    prompts
        .into_iter()
        .map(|p| {
            let target = resolve_token(&tok, Some(&p.answer()), None)?.expect("text given");
            let contrast = if contrast_subject {
                resolve_token(&tok, Some(&format!(" {}", p.b)), None)?
            } else {
                None
            };
            let meta = BTreeMap::from([
                ("template".to_string(), p.template.to_string()),
                ("high_level".to_string(), p.high_level.to_string()),
                ("io".to_string(), p.a.clone()),
                ("subject".to_string(), p.b.clone()),
            ]);
            Ok(TraceJob { prompt: p.text, target, contrast, meta })
        })
        .collect()
}

#[derive(Serialize)]
struct Skipped {
    index: usize,
    reason: String,
}

fn run_trace(ctx: &Ctx, b: &ModelBundle, jobs: Vec<TraceJob>, opts: &TraceOptions, verify: bool) -> Result<()> {
    let tok = tokenizer(b)?;
    let results: Vec<Result<Option<CircuitGraph>>> = jobs
        .par_iter()
        .map(|job| {
            let tokens = tok.encode(&job.prompt)?;
            let mut o = opts.clone();
            o.contrast = job.contrast;
            match trace(b, &job.prompt, &tokens, job.target, &o) {
                Ok(mut g) => {
                    g.metadata.extend(job.meta.clone());
                    Ok(Some(g))
                }
                Err(Error::NoSeed) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut checks = String::from("graph\tlayer\thead\td\ts\tside\tremoved\tweight_after\ttau\tpassed\n");
    let mut failed = None;
    let mut skipped = Vec::new();
    let mut written = 0;
    for (i, r) in results.into_iter().enumerate() {
        let Some(g) = r? else {
            skipped.push(Skipped { index: i, reason: "no component raises the target logit".into() });
            continue;
        };
        let name = format!("graphs/{i:05}.json");
        ctx.run.write(&name, g.to_json()?)?;
        written += 1;
        if verify {
            for c in verify_edges(b, &g)? {
                checks.push_str(&format!(
                    "{i:05}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.9}\t{:.9}\t{}\n",
                    c.layer, c.head, c.d, c.s, c.side, c.removed, c.weight_after, c.tau, c.passed
                ));
                if !c.passed && failed.is_none() {
                    failed = Some(Error::InterventionCheck {
                        layer: c.layer,
                        head: c.head,
                        d: c.d,
                        s: c.s,
                        weight: c.weight_after,
                        tau: c.tau,
                    });
                }
            }
        }
    }
    if verify {
        ctx.run.write("edge_checks.tsv", checks)?;
    }
    if !skipped.is_empty() {
        ctx.run.write_jsonl("skipped.jsonl", &skipped)?;
    }
    println!("{written} graphs, {} skipped", skipped.len());
    match failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn calibrate(ctx: &Ctx, b: &ModelBundle, path: &Path) -> Result<()> {
    let tok = tokenizer(b)?;
    let prompts = read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match serde_json::from_str::<IoiPrompt>(l) {
            Ok(p) => tok.encode(&p.text),
            Err(_) => tok.encode(l),
        })
        .collect::<Result<Vec<_>>>()?;
    let cal = calibrate_tau(b, &prompts)?;
    let mut tsv = String::from("x\tF\n");
    for (x, f) in cal.ecdf.steps() {
        tsv.push_str(&format!("{x:.9}\t{f:.9}\n"));
    }
    ctx.run.write("ecdf.tsv", tsv)?;
    let summary = serde_json::json!({
        "samples": cal.ecdf.len(),
        "suggested_scale": cal.suggested_scale,
        "knee": cal.knee,
        "median": cal.ecdf.quantile(0.5),
        "p90": cal.ecdf.quantile(0.9),
        "p99": cal.ecdf.quantile(0.99),
        "fraction_above_suggested": 1.0 - cal.ecdf.query(cal.suggested_scale),
    });
    ctx.run.write_json("calibration.json", &summary)?;
    println!("{} samples; suggested scale {}", cal.ecdf.len(), cal.suggested_scale);
    Ok(())
}

fn graph_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json") && f.file_name().is_some_and(|n| n != "run.json"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("no graph files found".into()));
    }
    Ok(out)
}

fn graph_label(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

struct Loaded {
    labels: Vec<String>,
    graphs: Vec<CircuitGraph>,
    dm: DistanceMatrix,
}

fn load_and_measure(inputs: &[PathBuf], g: Granularity) -> Result<Loaded> {
    let files = graph_files(inputs)?;
    let graphs = files.par_iter().map(|f| CircuitGraph::load(f)).collect::<Result<Vec<_>>>()?;
    let mut labels: Vec<String> = files.iter().map(|f| graph_label(f)).collect();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for l in labels.iter_mut() {
        let n = seen.entry(l.clone()).or_default();
        *n += 1;
        if *n > 1 {
            *l = format!("{l}#{n}");
        }
    }
    let vectors: Vec<ComponentVector> = graphs.iter().map(|gr| component_vector(gr, g)).collect();
    let dm = DistanceMatrix::from_fn(&vectors, |a, b| jaccard_distance(a, b).expect("same granularity"));
    Ok(Loaded { labels, graphs, dm })
}

fn matrix_tsv(labels: &[String], dm: &DistanceMatrix) -> String {
    let mut out = String::from("graph");
    for l in labels {
        out.push('\t');
        out.push_str(l);
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        out.push_str(l);
        for v in dm.row(i) {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\n');
    }
    out
}

fn cluster(ctx: &Ctx, inputs: &[PathBuf], g: Granularity, k: Option<usize>, height: Option<f64>) -> Result<()> {
    let data = load_and_measure(inputs, g)?;
    let tree = average_linkage(&data.dm)?;
    let labels = match k {
        Some(k) => tree.cut_k(k)?,
        None => tree.cut_height(height.unwrap_or(DEFAULT_CUT_HEIGHT)),
    };
    ctx.run.write("distances.tsv", matrix_tsv(&data.labels, &data.dm))?;
    let mut tsv = String::from("graph\tcluster\n");
    for (l, c) in data.labels.iter().zip(&labels) {
        tsv.push_str(&format!("{l}\t{c}\n"));
    }
    ctx.run.write("assignments.tsv", tsv)?;
    ctx.run.write_json(
        "dendrogram.json",
        &serde_json::json!({
            "granularity": g,
            "labels": data.labels,
            "merges": tree.merges,
            "leaf_order": tree.leaf_order,
        }),
    )?;
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
    println!("{} graphs in {n_clusters} clusters", data.labels.len());
    Ok(())
}

fn represent(ctx: &Ctx, inputs: &[PathBuf], g: Granularity, group_by: Option<&str>, assignments: Option<&Path>) -> Result<()> {
    let data = load_and_measure(inputs, g)?;
    let group_of: Vec<String> = if let Some(key) = group_by {
        data.graphs
            .iter()
            .zip(&data.labels)
            .map(|(gr, l)| {
                gr.metadata
                    .get(key)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("graph {l} has no metadata key {key:?}")))
            })
            .collect::<Result<_>>()?
    } else if let Some(path) = assignments {
        let map: HashMap<String, String> = read_text(path)?
            .lines()
            .skip(1)
            .filter_map(|l| l.split_once('\t').map(|(a, b)| (a.to_string(), b.to_string())))
            .collect();
        data.labels
            .iter()
            .map(|l| map.get(l).cloned().ok_or_else(|| Error::Config(format!("graph {l} missing from assignments"))))
            .collect::<Result<_>>()?
    } else {
        vec!["all".to_string(); data.labels.len()]
    };
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, gname) in group_of.iter().enumerate() {
        groups.entry(gname.clone()).or_default().push(i);
    }
    let mut tsv = String::from("group\tsize\tmedoid\tmean_within\tnormalized_within\n");
    for (name, members) in &groups {
        let m = medoid(members, |i, j| data.dm.get(i, j))?;
        let (mean, norm) = match normalized_within_distance(&data.dm, &[(name.clone(), members.clone())]) {
            Ok(rows) => (format!("{:.6}", rows[0].mean_within), format!("{:.6}", rows[0].normalized)),
            Err(Error::DegenerateGroup(_)) => ("NA".to_string(), "NA".to_string()),
            Err(e) => return Err(e),
        };
        tsv.push_str(&format!("{name}\t{}\t{}\t{mean}\t{norm}\n", members.len(), data.labels[m]));
    }
    ctx.run.write("representatives.tsv", tsv)?;
    println!("{} groups", groups.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub graph: String,
    pub edge: usize,
    pub side: Side,
    pub d: usize,
    pub s: usize,
    pub pair: SignalPair,
}

fn head_of(g: &CircuitGraph, edge: usize) -> Result<Option<(usize, usize)>> {
    let e = g
        .edges
        .get(edge)
        .ok_or_else(|| Error::OutOfRange(format!("edge {edge} of {}", g.edges.len())))?;
    Ok(match g.node(e.downstream)?.component {
        qkcircuit::model::ComponentId::AttnHead { layer, head } => Some((layer, head)),
        _ => None,
    })
}

fn pair_signals(ctx: &Ctx, b: &ModelBundle, path: &Path, edge: Option<usize>) -> Result<()> {
    let g = CircuitGraph::load(path)?;
    if !g.edges.is_empty() && !g.has_vectors() {
        return Err(Error::MissingVectors);
    }
    let label = graph_label(path);
    let edges: Vec<usize> = match edge {
        Some(e) => vec![e],
        None => (0..g.edges.len()).collect(),
    };
    let mut heads: HashMap<(usize, usize), UnifiedHead> = HashMap::new();
    let mut records = Vec::new();
    let mut degenerate = 0;
    for e in edges {
        let Some((layer, head)) = head_of(&g, e)? else {
            continue;
        };
        let uh = match heads.entry((layer, head)) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => v.insert(build_unified_head(b, layer, head)?),
        };
        let edge = &g.edges[e];
        match pair_for_edge(uh, edge)? {
            Some(pair) => records.push(PairRecord {
                id: format!("{label}/e{e}/L{layer}H{head}"),
                graph: label.clone(),
                edge: e,
                side: edge.side,
                d: edge.d,
                s: edge.s,
                pair,
            }),
            None => degenerate += 1,
        }
    }
    ctx.run.write_jsonl("pairs.jsonl", &records)?;
    println!("{} pairs, {degenerate} degenerate skipped", records.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextRecord {
    pub id: String,
    pub layer: usize,
    pub head: usize,
    pub top: Vec<ScoredContext>,
    pub random: Vec<ScoredContext>,
}

fn retrieve(ctx: &Ctx, b: &ModelBundle, corpus: &Path, pairs: &Path, k: usize) -> Result<()> {
    let store = CorpusStore::load(corpus)?;
    store.check_compatible(b)?;
    let pairs: Vec<PairRecord> = read_jsonl(pairs)?;
    let records = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let head = build_unified_head(b, p.pair.layer, p.pair.head)?;
            let top = score_contexts(&store, &head, &p.pair, k)?;
            let random = sample_random_contexts(&store, &head, &p.pair, N_RANDOM, &top, ctx.seed.wrapping_add(i as u64))?;
            Ok(ContextRecord { id: p.id.clone(), layer: p.pair.layer, head: p.pair.head, top, random })
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.run.write_jsonl("contexts.jsonl", &records)?;
    println!("{} signals", records.len());
    Ok(())
}

fn endpoint_config(opts: &EndpointOpts, base: Option<&EndpointConfig>) -> Result<EndpointConfig> {
    let mut ep = base.cloned().unwrap_or(EndpointConfig {
        url: String::new(),
        model: String::new(),
        auth_env: None,
        temperature: 0.0,
        max_tokens: None,
        timeout_secs: 120,
    });
    if let Some(u) = &opts.url {
        ep.url = u.clone();
    }
    if let Some(m) = &opts.model {
        ep.model = m.clone();
    }
    if let Some(a) = &opts.auth_env {
        ep.auth_env = Some(a.clone());
    }
    if ep.model.is_empty() {
        return Err(Error::Config("endpoint model name is required".into()));
    }
    if ep.url.is_empty() && opts.replay.is_none() {
        return Err(Error::Config("endpoint URL is required unless --replay is given".into()));
    }
    Ok(ep)
}

fn make_client(opts: &EndpointOpts, ep: &EndpointConfig) -> Result<Box<dyn ChatClient>> {
    if let Some(p) = &opts.replay {
        return Ok(Box::new(ReplayClient::load(p)?));
    }
    let http = HttpClient::new(ep)?;
    Ok(match &opts.record {
        Some(p) => Box::new(RecordingClient::new(http, p)),
        None => Box::new(http),
    })
}

fn retry_policy(opts: &EndpointOpts) -> RetryPolicy {
    RetryPolicy {
        retries: opts.retries,
        ..RetryPolicy::default()
    }
}

fn interpret(ctx: &Ctx, contexts: &Path, opts: &EndpointOpts, ep: &EndpointConfig) -> Result<()> {
    let records: Vec<ContextRecord> = read_jsonl(contexts)?;
    let client = make_client(opts, ep)?;
    let policy = retry_policy(opts);
    let out = records
        .par_iter()
        .map(|r| request_interpretation(&*client, ep, policy, &r.id, r.layer, r.head, &r.top))
        .collect::<Result<Vec<_>>>()?;
    ctx.run.write_jsonl("interpretations.jsonl", &out)?;
    let none = out.iter().filter(|r| r.none_found).count();
    println!("{} interpretations, {none} without a valid interpretation", out.len());
    Ok(())
}

fn score(ctx: &Ctx, contexts: &Path, interpretations: &Path, opts: &EndpointOpts, ep: &EndpointConfig) -> Result<()> {
    let records: Vec<ContextRecord> = read_jsonl(contexts)?;
    let interps: HashMap<String, InterpretationRecord> = read_jsonl::<InterpretationRecord>(interpretations)?
        .into_iter()
        .map(|r| (r.signal.clone(), r))
        .collect();
    let client = make_client(opts, ep)?;
    let policy = retry_policy(opts);
    let jobs: Vec<(usize, &ContextRecord, &str)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| interps.get(&r.id).and_then(|x| x.text.as_deref()).map(|t| (i, r, t)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, r, text)| {
            fuzz_score(&*client, ep, policy, &r.id, r.layer, text, &r.top, &r.random, ctx.seed.wrapping_add(i as u64))
        })
        .collect::<Result<Vec<FuzzResult>>>()?;
    ctx.run.write_jsonl("scores.jsonl", &results)?;
    let mut tsv = String::from("signal\tbatch\tindex\tchunk\td\ts\ttruth\tjudge\n");
    for r in &results {
        for v in &r.verdicts {
            let truth = serde_json::to_value(v.truth)?;
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.signal,
                v.batch,
                v.index,
                v.chunk,
                v.d,
                v.s,
                truth.as_str().unwrap_or_default(),
                v.judge
            ));
        }
    }
    ctx.run.write("verdicts.tsv", tsv)?;
    println!("{} signals scored", results.len());
    Ok(())
}

fn fdr(ctx: &Ctx, input: &Path, q: f64) -> Result<()> {
    let is_jsonl = input.extension().is_some_and(|e| e == "jsonl" || e == "json");
    let (ids, groups, p): (Vec<String>, Vec<String>, Vec<f64>) = if is_jsonl {
        let mut results: Vec<FuzzResult> = read_jsonl(input)?;
        apply_fdr(&mut results, q)?;
        let ids = results.iter().map(|r| r.signal.clone()).collect();
        let groups = results.iter().map(|r| r.layer.to_string()).collect();
        let p = results.iter().map(|r| r.fisher_p).collect();
        (ids, groups, p)
    } else {
        let mut ids = Vec::new();
        let mut groups = Vec::new();
        let mut p = Vec::new();
        for (n, line) in read_text(input)?.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if line.trim().is_empty() || (n == 0 && cols.last().is_some_and(|c| c.parse::<f64>().is_err())) {
                continue;
            }
            let [id, group, pv] = cols[..] else {
                return Err(Error::Config(format!("line {} needs id, group and p columns", n + 1)));
            };
            ids.push(id.to_string());
            groups.push(group.to_string());
            p.push(pv.trim().parse().map_err(|_| Error::Config(format!("bad p-value {pv:?} on line {}", n + 1)))?);
        }
        (ids, groups, p)
    };
    let flags = bh_reject_grouped(&p, &groups, q)?;
    let mut tsv = String::from("id\tgroup\tp\treject\n");
    for i in 0..ids.len() {
        tsv.push_str(&format!("{}\t{}\t{:e}\t{}\n", ids[i], groups[i], p[i], flags[i]));
    }
    ctx.run.write("fdr.tsv", tsv)?;
    let mut per_group: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (g, f) in groups.iter().zip(&flags) {
        let e = per_group.entry(g).or_default();
        e.0 += 1;
        e.1 += *f as usize;
    }
    let fraction = rejected_fraction(&flags);
    ctx.run.write_json(
        "fdr_summary.json",
        &serde_json::json!({
            "q": q,
            "total": flags.len(),
            "rejected": flags.iter().filter(|&&f| f).count(),
            "interpretable_fraction": fraction,
            "per_group": per_group.iter().map(|(g, (n, r))| (g.to_string(), serde_json::json!({"total": n, "rejected": r}))).collect::<BTreeMap<_, _>>(),
        }),
    )?;
    println!("{} of {} flagged ({fraction:.3})", flags.iter().filter(|&&f| f).count(), flags.len());
    Ok(())
}
