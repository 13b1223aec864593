// SPDX-License-Identifier: MIT OR Apache-2.0

//! Corpus activation cache: fixed 32-token chunks with the attention inputs
//! of selected layers.
//!
//! On disk a cache is a directory holding `corpus.json`, `tokens.bin`
//! (little-endian `u32`, `[n_chunks, 32]`) and one `layer.{l}.bin` per cached
//! layer (little-endian `f32`, row-major `[n_chunks, 32, D]`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{dir_is_nonempty, sha256_hex, ModelBundle};
use crate::error::{Error, Result};
use crate::model::forward;

pub const CHUNK_LEN: usize = 32;
pub const CORPUS_SCHEMA_VERSION: u32 = 1;
pub const CORPUS_MANIFEST: &str = "corpus.json";
pub const TOKENS_FILE: &str = "tokens.bin";
const FORMAT_TAG: &str = "qkcircuit-corpus";

pub fn layer_file(layer: usize) -> String {
    format!("layer.{layer}.bin")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusChunk {
    pub id: usize,
    pub doc: usize,
    /// Token offset of the chunk inside its document.
    pub start: usize,
    pub tokens: Vec<u32>,
    pub token_strs: Vec<String>,
    /// Attention input per cached layer, `CHUNK_LEN x D`.
    pub inputs: BTreeMap<usize, DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStore {
    pub d_model: usize,
    pub vocab_size: usize,
    pub model_id: Option<String>,
    pub layers: Vec<usize>,
    pub chunks: Vec<CorpusChunk>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChunkEntry {
    id: usize,
    doc: usize,
    start: usize,
    token_strs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    schema_version: u32,
    format: String,
    chunk_len: usize,
    d_model: usize,
    vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_id: Option<String>,
    layers: Vec<usize>,
    chunks: Vec<ChunkEntry>,
    checksums: BTreeMap<String, String>,
}

/// Splits each document into whole chunks; a trailing partial chunk is dropped.
pub fn chunk_documents(docs: &[Vec<u32>]) -> Vec<(usize, usize, Vec<u32>)> {
    let mut out = Vec::new();
    for (doc, ids) in docs.iter().enumerate() {
        for (i, c) in ids.chunks_exact(CHUNK_LEN).enumerate() {
            out.push((doc, i * CHUNK_LEN, c.to_vec()));
        }
    }
    out
}

/// Tokenizes raw documents with the bundle vocabulary and caches them.
pub fn build_corpus_cache(bundle: &ModelBundle, docs: &[String], layers: &[usize]) -> Result<CorpusStore> {
    if docs.iter().all(|d| d.trim().is_empty()) {
        return Err(Error::EmptyInput("corpus has no text".into()));
    }
    let tok = bundle
        .tokenizer()
        .ok_or_else(|| Error::Config("bundle carries no vocabulary".into()))?;
    let ids = docs.iter().map(|d| tok.encode(d)).collect::<Result<Vec<_>>>()?;
    build_corpus_cache_from_ids(bundle, &ids, layers)
}

/// Caches pre-tokenized documents.
pub fn build_corpus_cache_from_ids(bundle: &ModelBundle, docs: &[Vec<u32>], layers: &[usize]) -> Result<CorpusStore> {
    if docs.iter().all(Vec::is_empty) {
        return Err(Error::EmptyInput("corpus has no tokens".into()));
    }
    let cfg = &bundle.config;
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    if layers.is_empty() {
        return Err(Error::Config("no layers selected for caching".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(Error::OutOfRange(format!("layer {l} of {}", cfg.n_layers)));
    }
    let pieces = chunk_documents(docs);
    // rounded to the on-disk f32 precision
    let chunks = pieces
        .into_par_iter()
        .enumerate()
        .map(|(id, (doc, start, tokens))| {
            let cache = forward(bundle, &tokens)?;
            let inputs = layers
                .iter()
                .map(|&l| (l, cache.layers[l].attn_in.map(|x| x as f32 as f64)))
                .collect();
            Ok(CorpusChunk {
                id,
                doc,
                start,
                token_strs: cache.token_strs.clone(),
                tokens,
                inputs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorpusStore {
        d_model: cfg.d_model,
        vocab_size: cfg.vocab_size,
        model_id: bundle.metadata.get("model_id").cloned(),
        layers,
        chunks,
    })
}

impl CorpusStore {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn covers(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }

    /// Width and vocabulary-size parity with a bundle.
    pub fn check_compatible(&self, bundle: &ModelBundle) -> Result<()> {
        if self.d_model != bundle.config.d_model || self.vocab_size != bundle.config.vocab_size {
            return Err(Error::Config(format!(
                "corpus built for D={} V={}, bundle has D={} V={}",
                self.d_model, self.vocab_size, bundle.config.d_model, bundle.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        if !force && dir_is_nonempty(dir)? {
            return Err(Error::DirectoryNotEmpty(dir.to_path_buf()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut checksums = BTreeMap::new();
        let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
            let path = dir.join(&name);
            checksums.insert(name, sha256_hex(&bytes));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        let tokens: Vec<u8> = self
            .chunks
            .iter()
            .flat_map(|c| c.tokens.iter().flat_map(|t| t.to_le_bytes()))
            .collect();
        write(TOKENS_FILE.into(), tokens)?;
        for &l in &self.layers {
            let mut bytes = Vec::with_capacity(self.chunks.len() * CHUNK_LEN * self.d_model * 4);
            for c in &self.chunks {
                let m = &c.inputs[&l];
                for r in 0..m.nrows() {
                    for x in m.row(r).iter() {
                        bytes.extend_from_slice(&(*x as f32).to_le_bytes());
                    }
                }
            }
            write(layer_file(l), bytes)?;
        }
        let manifest = CorpusManifest {
            schema_version: CORPUS_SCHEMA_VERSION,
            format: FORMAT_TAG.into(),
            chunk_len: CHUNK_LEN,
            d_model: self.d_model,
            vocab_size: self.vocab_size,
            model_id: self.model_id.clone(),
            layers: self.layers.clone(),
            chunks: self
                .chunks
                .iter()
                .map(|c| ChunkEntry {
                    id: c.id,
                    doc: c.doc,
                    start: c.start,
                    token_strs: c.token_strs.clone(),
                })
                .collect(),
            checksums,
        };
        let path = dir.join(CORPUS_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CORPUS_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CorpusManifest = serde_json::from_str(&text)?;
        if m.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: m.schema_version,
                expected: CORPUS_SCHEMA_VERSION,
            });
        }
        if m.chunk_len != CHUNK_LEN {
            return Err(Error::Validation(format!("chunk length {} != {CHUNK_LEN}", m.chunk_len)));
        }
        let read = |name: &str, expect_len: usize| -> Result<Vec<u8>> {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let want = m
                .checksums
                .get(name)
                .ok_or_else(|| Error::Validation(format!("no checksum for {name}")))?;
            let got = sha256_hex(&bytes);
            if &got != want {
                return Err(Error::Checksum {
                    file: name.into(),
                    expected: want.clone(),
                    actual: got,
                });
            }
            if bytes.len() != expect_len {
                return Err(Error::ShapeMismatch {
                    name: name.into(),
                    expected: vec![expect_len],
                    actual: vec![bytes.len()],
                });
            }
            Ok(bytes)
        };
        let n = m.chunks.len();
        let tokens = read(TOKENS_FILE, n * CHUNK_LEN * 4)?;
        let tokens: Vec<u32> = tokens
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut per_layer = BTreeMap::new();
        for &l in &m.layers {
            let bytes = read(&layer_file(l), n * CHUNK_LEN * m.d_model * 4)?;
            let vals: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(layer_file(l)));
            }
            per_layer.insert(l, vals);
        }
        let block = CHUNK_LEN * m.d_model;
        let chunks = m
            .chunks
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                if e.token_strs.len() != CHUNK_LEN {
                    return Err(Error::Validation(format!("chunk {} has {} token strings", e.id, e.token_strs.len())));
                }
                Ok(CorpusChunk {
                    id: e.id,
                    doc: e.doc,
                    start: e.start,
                    tokens: tokens[i * CHUNK_LEN..(i + 1) * CHUNK_LEN].to_vec(),
                    token_strs: e.token_strs,
                    inputs: per_layer
                        .iter()
                        .map(|(&l, v)| {
                            (l, DMatrix::from_row_slice(CHUNK_LEN, m.d_model, &v[i * block..(i + 1) * block]))
                        })
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d_model: m.d_model,
            vocab_size: m.vocab_size,
            model_id: m.model_id,
            layers: m.layers,
            chunks,
        })
    }
}
