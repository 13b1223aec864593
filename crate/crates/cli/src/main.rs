// SPDX-License-Identifier: MIT OR Apache-2.0

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qkcircuit::analytics::components::Granularity;

#[derive(Parser, Debug)]
#[command(name = "qkcircuit", version, about = "Attention circuit tracing and signal analysis")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// TOML run configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-prompt and per-signal work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Run directory receiving every output and `run.json`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty run directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EndpointOpts {
    #[arg(long)]
    pub url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub auth_env: Option<String>,
    /// Append every endpoint response to this JSON-lines file.
    #[arg(long, conflicts_with = "replay")]
    pub record: Option<PathBuf>,
    /// Answer requests only from a recorded JSON-lines file.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Retries after a transport or parse failure.
    #[arg(long, default_value_t = 2)]
    pub retries: u32,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a random toy model bundle.
    SynthToy {
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value = "plain")]
        variant: String,
        #[arg(long, default_value = "frozen_ln")]
        norm: String,
        #[arg(long)]
        init_std: Option<f64>,
    },
    /// Trace the circuit of one prompt or of every prompt in a JSON-lines file.
    Trace {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, conflicts_with = "prompts")]
        prompt: Option<String>,
        /// Output of `gen-ioi`; targets are the indirect objects.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Target token text, e.g. " Mary".
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        target_id: Option<u32>,
        #[arg(long)]
        contrast: Option<String>,
        /// With --prompts: contrast the indirect object against the subject.
        #[arg(long)]
        contrast_subject: bool,
        #[arg(long)]
        tau_scale: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        /// Drop signal vectors from edges (smaller graphs, no signal analysis).
        #[arg(long)]
        no_vectors: bool,
        /// Replay every edge intervention and write `edge_checks.tsv`.
        #[arg(long)]
        verify: bool,
    },
    /// ECDF of the scaled attention statistic over a prompt corpus.
    CalibrateTau {
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Text file with one prompt per line, or `gen-ioi` output.
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Generate the IOI prompt dataset.
    GenIoi {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// JSON file with `names`, `places`, `objects` arrays.
        #[arg(long)]
        words: Option<PathBuf>,
    },
    /// Cluster circuits by Jaccard distance with average linkage.
    Cluster {
        /// Graph files or directories of graph files.
        #[arg(required = true)]
        graphs: Vec<PathBuf>,
        #[arg(long)]
        granularity: Option<Granularity>,
        #[arg(long, conflicts_with = "height")]
        k: Option<usize>,
        #[arg(long)]
        height: Option<f64>,
    },
    /// Medoid circuit and normalized within-group distance per group.
    Represent {
        #[arg(required = true)]
        graphs: Vec<PathBuf>,
        #[arg(long)]
        granularity: Option<Granularity>,
        /// Graph metadata key defining groups (e.g. `template`).
        #[arg(long, conflicts_with = "assignments")]
        group_by: Option<String>,
        /// `assignments.tsv` from `cluster`.
        #[arg(long)]
        assignments: Option<PathBuf>,
    },
    /// Signal-summary similarity between two circuits.
    CompareSignals {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Paired destination/source directions for traced edges.
    PairSignal {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        graph: PathBuf,
        /// Edge index; all head edges when omitted.
        #[arg(long)]
        edge: Option<usize>,
    },
    /// Cache attention inputs of a text corpus in 32-token chunks.
    BuildCorpus {
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Text file with one document per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated layers; all when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Top and random contexts for every signal pair.
    Retrieve {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Ask the interpreter model to describe each signal.
    Interpret {
        #[arg(long)]
        contexts: PathBuf,
        #[command(flatten)]
        endpoint: EndpointOpts,
    },
    /// Fuzzing evaluation of interpretations by the judge model.
    Score {
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long)]
        interpretations: PathBuf,
        #[command(flatten)]
        endpoint: EndpointOpts,
    },
    /// Benjamini-Hochberg flags within each layer.
    Fdr {
        /// `scores.jsonl` from `score`, or a TSV with columns id, group, p.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        q: Option<f64>,
    },
    /// Convert a graph to JSON, DOT or HTML.
    Export {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value = "dot")]
        format: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthToy { .. } => "synth-toy",
            Command::Trace { .. } => "trace",
            Command::CalibrateTau { .. } => "calibrate-tau",
            Command::GenIoi { .. } => "gen-ioi",
            Command::Cluster { .. } => "cluster",
            Command::Represent { .. } => "represent",
            Command::CompareSignals { .. } => "compare-signals",
            Command::PairSignal { .. } => "pair-signal",
            Command::BuildCorpus { .. } => "build-corpus",
            Command::Retrieve { .. } => "retrieve",
            Command::Interpret { .. } => "interpret",
            Command::Score { .. } => "score",
            Command::Fdr { .. } => "fdr",
            Command::Export { .. } => "export",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
