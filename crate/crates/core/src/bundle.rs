// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model bundle: architecture manifest plus raw little-endian float32 tensors.
//!
//! On disk a bundle is a directory holding `manifest.json` and `tensors.bin`.
//! Every weight is stored in "multiply on the right" orientation: a row vector
//! `x^T` is mapped by `x^T W`. Per-head projections are stacked along a
//! leading head axis.
//!
//! | name                        | shape         | present when          |
//! |-----------------------------|---------------|-----------------------|
//! | `embed`                     | `[V, D]`      | always                |
//! | `pos_embed`                 | `[N_max, D]`  | `has_pos_embed`       |
//! | `blocks.{l}.attn.W_Q/W_K/W_V` | `[H, D, R]` | always                |
//! | `blocks.{l}.attn.W_O`       | `[H, R, D]`   | always                |
//! | `blocks.{l}.attn.b_Q/b_K`   | `[H, R]`      | bias variants         |
//! | `blocks.{l}.attn.b_V`       | `[H, R]`      | always                |
//! | `blocks.{l}.attn.b_O`       | `[D]`         | always                |
//! | `blocks.{l}.ln1.w/b`, `ln2.w/b` | `[D]`     | `frozen_ln`           |
//! | `blocks.{l}.mlp.W_in`       | `[D, M]`      | always                |
//! | `blocks.{l}.mlp.b_in`       | `[M]`         | always                |
//! | `blocks.{l}.mlp.W_out`      | `[M, D]`      | always                |
//! | `blocks.{l}.mlp.b_out`      | `[D]`         | always                |
//! | `ln_final.w/b`              | `[D]`         | `frozen_ln`           |
//! | `unembed`                   | `[D, V]`      | always                |
//! | `b_U`                       | `[V]`         | always                |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::condition_number;
use crate::tokenizer::{toy_vocab, Tokenizer};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";
const FORMAT_TAG: &str = "qkcircuit-bundle";
const ORIENTATION: &str = "row-vector x^T W (multiply on the right); per-head tensors stacked on axis 0";

/// Heads whose `W_Q` or `W_K^T` condition number reaches this are unsupported.
pub const KAPPA_UNSUPPORTED: f64 = 1e6;
/// Synthetic heads are resampled until both condition numbers are below this.
pub const KAPPA_SYNTH_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnVariant {
    Plain,
    Bias,
    Rope,
    RopeBias,
}

impl AttnVariant {
    pub fn has_bias(self) -> bool {
        matches!(self, AttnVariant::Bias | AttnVariant::RopeBias)
    }

    pub fn has_rope(self) -> bool {
        matches!(self, AttnVariant::Rope | AttnVariant::RopeBias)
    }

    pub const ALL: [AttnVariant; 4] = [
        AttnVariant::Plain,
        AttnVariant::Bias,
        AttnVariant::Rope,
        AttnVariant::RopeBias,
    ];
}

impl std::str::FromStr for AttnVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "bias" => Ok(Self::Bias),
            "rope" => Ok(Self::Rope),
            "rope_bias" => Ok(Self::RopeBias),
            other => Err(Error::Config(format!("unknown attention variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    None,
    FrozenLn,
}

impl std::str::FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "frozen_ln" => Ok(Self::FrozenLn),
            other => Err(Error::Config(format!("unknown norm mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpActivation {
    GeluTanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub attn_variant: AttnVariant,
    /// RoPE base frequency; required for rotary variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_base: Option<f64>,
    /// Leading head dimensions that are rotated (NeoX half-split layout). Defaults to `d_head`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotary_dim: Option<usize>,
    pub norm_mode: NormMode,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    pub has_pos_embed: bool,
    pub mlp_activation: MlpActivation,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return fail("layers, heads and d_model must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.vocab_size == 0 || self.n_ctx == 0 || self.d_mlp == 0 {
            return fail("vocab_size, n_ctx and d_mlp must be positive".into());
        }
        if self.attn_variant.has_rope() {
            match self.rope_base {
                Some(b) if b.is_finite() && b > 1.0 => {}
                _ => return fail("rotary variants need rope_base > 1".into()),
            }
            let rd = self.rotary_dim();
            if rd == 0 || rd > self.d_head || rd % 2 != 0 {
                return fail(format!("rotary_dim {rd} must be even and in 1..=d_head"));
            }
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return fail("ln_eps must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn rotary_dim(&self) -> usize {
        self.rotary_dim.unwrap_or(self.d_head)
    }

    /// Expected tensor names and shapes for this architecture.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h, r, m) = (
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.d_head,
            self.d_mlp,
        );
        let mut out = vec![("embed".to_string(), vec![v, d])];
        if self.has_pos_embed {
            out.push(("pos_embed".into(), vec![self.n_ctx, d]));
        }
        for l in 0..self.n_layers {
            let p = format!("blocks.{l}");
            for w in ["W_Q", "W_K", "W_V"] {
                out.push((format!("{p}.attn.{w}"), vec![h, d, r]));
            }
            out.push((format!("{p}.attn.W_O"), vec![h, r, d]));
            if self.attn_variant.has_bias() {
                out.push((format!("{p}.attn.b_Q"), vec![h, r]));
                out.push((format!("{p}.attn.b_K"), vec![h, r]));
            }
            out.push((format!("{p}.attn.b_V"), vec![h, r]));
            out.push((format!("{p}.attn.b_O"), vec![d]));
            if self.norm_mode == NormMode::FrozenLn {
                for n in ["ln1", "ln2"] {
                    out.push((format!("{p}.{n}.w"), vec![d]));
                    out.push((format!("{p}.{n}.b"), vec![d]));
                }
            }
            out.push((format!("{p}.mlp.W_in"), vec![d, m]));
            out.push((format!("{p}.mlp.b_in"), vec![m]));
            out.push((format!("{p}.mlp.W_out"), vec![m, d]));
            out.push((format!("{p}.mlp.b_out"), vec![d]));
        }
        if self.norm_mode == NormMode::FrozenLn {
            out.push(("ln_final.w".into(), vec![d]));
            out.push(("ln_final.b".into(), vec![d]));
        }
        out.push(("unembed".into(), vec![d, v]));
        out.push(("b_U".into(), vec![v]));
        out
    }
}

/// Dense float32 tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Condition numbers of one head's query and key factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDiagnostic {
    pub layer: usize,
    pub head: usize,
    pub kappa_q: f64,
    pub kappa_k: f64,
    pub unsupported: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub heads: Vec<HeadDiagnostic>,
}

impl DiagnosticsReport {
    pub fn unsupported(&self) -> impl Iterator<Item = &HeadDiagnostic> {
        self.heads.iter().filter(|h| h.unsupported)
    }

    pub fn all_clear(&self) -> bool {
        self.heads.iter().all(|h| !h.unsupported)
    }

    pub fn head(&self, layer: usize, head: usize) -> Option<&HeadDiagnostic> {
        self.heads
            .iter()
            .find(|h| h.layer == layer && h.head == head)
    }
}

/// Validated model weights plus architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub vocab: Option<Vec<String>>,
    pub metadata: BTreeMap<String, String>,
    diagnostics: DiagnosticsReport,
}

impl ModelBundle {
    /// Validates shapes and values and computes per-head diagnostics.
    pub fn new(
        config: ModelConfig,
        tensors: BTreeMap<String, Tensor>,
        vocab: Option<Vec<String>>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.tensor_layout() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape != shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    actual: t.shape.clone(),
                });
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        if let Some(v) = &vocab {
            if v.len() != config.vocab_size {
                return Err(Error::Config(format!(
                    "vocabulary has {} entries, config says {}",
                    v.len(),
                    config.vocab_size
                )));
            }
        }
        let mut bundle = Self {
            config,
            tensors,
            vocab,
            metadata,
            diagnostics: DiagnosticsReport::default(),
        };
        bundle.diagnostics = validate_bundle(&bundle);
        Ok(bundle)
    }

    pub fn diagnostics(&self) -> &DiagnosticsReport {
        &self.diagnostics
    }

    pub fn tokenizer(&self) -> Option<Tokenizer> {
        self.vocab.clone().map(Tokenizer::new)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// 2-D tensor as a float64 matrix.
    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let t = self.tensor(name)?;
        if t.shape.len() != 2 {
            return Err(Error::Validation(format!("{name} is not 2-D")));
        }
        Ok(DMatrix::from_row_iterator(
            t.shape[0],
            t.shape[1],
            t.data.iter().map(|&x| x as f64),
        ))
    }

    /// Slice `[head]` of a 3-D `[H, a, b]` tensor as an `a x b` matrix.
    pub fn head_matrix(&self, name: &str, head: usize) -> Result<DMatrix<f64>> {
        let t = self.tensor(name)?;
        if t.shape.len() != 3 || head >= t.shape[0] {
            return Err(Error::OutOfRange(format!("{name}[{head}]")));
        }
        let (a, b) = (t.shape[1], t.shape[2]);
        let start = head * a * b;
        Ok(DMatrix::from_row_iterator(
            a,
            b,
            t.data[start..start + a * b].iter().map(|&x| x as f64),
        ))
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>> {
        let t = self.tensor(name)?;
        if t.shape.len() != 1 {
            return Err(Error::Validation(format!("{name} is not 1-D")));
        }
        Ok(DVector::from_iterator(
            t.data.len(),
            t.data.iter().map(|&x| x as f64),
        ))
    }

    /// Row `[head]` of a 2-D `[H, R]` tensor.
    pub fn head_vector(&self, name: &str, head: usize) -> Result<DVector<f64>> {
        let t = self.tensor(name)?;
        if t.shape.len() != 2 || head >= t.shape[0] {
            return Err(Error::OutOfRange(format!("{name}[{head}]")));
        }
        let r = t.shape[1];
        Ok(DVector::from_iterator(
            r,
            t.data[head * r..(head + 1) * r].iter().map(|&x| x as f64),
        ))
    }
}

/// Per-head condition numbers of `W_Q` and `W_K^T`, flagging any at or above
/// [`KAPPA_UNSUPPORTED`].
pub fn validate_bundle(bundle: &ModelBundle) -> DiagnosticsReport {
    let cfg = &bundle.config;
    let mut heads = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
    for layer in 0..cfg.n_layers {
        for head in 0..cfg.n_heads {
            let kappa = |w: &str| -> f64 {
                bundle
                    .head_matrix(&format!("blocks.{layer}.attn.{w}"), head)
                    .and_then(|m| condition_number(&m))
                    .unwrap_or(f64::INFINITY)
            };
            let kappa_q = kappa("W_Q");
            // W_K^T has the same singular values as W_K
            let kappa_k = kappa("W_K");
            heads.push(HeadDiagnostic {
                layer,
                head,
                kappa_q,
                kappa_k,
                unsupported: !(kappa_q < KAPPA_UNSUPPORTED && kappa_k < KAPPA_UNSUPPORTED),
            });
        }
    }
    DiagnosticsReport { heads }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    file: String,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    format: String,
    orientation: String,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
    checksums: BTreeMap<String, String>,
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Writes `manifest.json` + `tensors.bin`. A non-empty target directory is
/// refused unless `force` is set.
pub fn save_bundle(bundle: &ModelBundle, dir: &Path, force: bool) -> Result<()> {
    if !force && dir_is_nonempty(dir)? {
        return Err(Error::DirectoryNotEmpty(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(bundle.tensors.len());
    for (name, t) in &bundle.tensors {
        let offset = blob.len() as u64;
        for x in &t.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape.clone(),
            file: TENSOR_FILE.into(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        format: FORMAT_TAG.into(),
        orientation: ORIENTATION.into(),
        config: bundle.config.clone(),
        vocab: bundle.vocab.clone(),
        metadata: bundle.metadata.clone(),
        tensors: entries,
        checksums: BTreeMap::from([(TENSOR_FILE.to_string(), sha256_hex(&blob))]),
    };
    let tensor_path = dir.join(TENSOR_FILE);
    let mut f = fs::File::create(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    f.write_all(&blob).map_err(|e| Error::io(&tensor_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Reads and validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            expected: SCHEMA_VERSION,
        });
    }

    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for entry in &manifest.tensors {
        if !blobs.contains_key(&entry.file) {
            let p = dir.join(&entry.file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if let Some(expected) = manifest.checksums.get(&entry.file) {
                let actual = sha256_hex(&bytes);
                if &actual != expected {
                    return Err(Error::Checksum {
                        file: entry.file.clone(),
                        expected: expected.clone(),
                        actual,
                    });
                }
            }
            blobs.insert(entry.file.clone(), bytes);
        }
    }

    // byte ranges must be in bounds and pairwise disjoint per file
    let mut ranges: BTreeMap<&str, Vec<(u64, u64, &str)>> = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Validation(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let n: usize = entry.shape.iter().product();
        if entry.nbytes != 4 * n as u64 {
            return Err(Error::ShapeMismatch {
                name: entry.name.clone(),
                expected: entry.shape.clone(),
                actual: vec![(entry.nbytes / 4) as usize],
            });
        }
        let blob = &blobs[&entry.file];
        let end = entry.offset + entry.nbytes;
        if end > blob.len() as u64 {
            return Err(Error::Validation(format!(
                "tensor {} extends past end of {}",
                entry.name, entry.file
            )));
        }
        ranges
            .entry(entry.file.as_str())
            .or_default()
            .push((entry.offset, end, entry.name.as_str()));
        let bytes = &blob[entry.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    for spans in ranges.values_mut() {
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Validation(format!(
                    "tensors {} and {} overlap",
                    w[0].2, w[1].2
                )));
            }
        }
    }
    ModelBundle::new(manifest.config, tensors, manifest.vocab, manifest.metadata)
}

/// Parameters for [`synth_toy_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub attn_variant: AttnVariant,
    pub norm_mode: NormMode,
    pub seed: u64,
    /// Standard deviation of every Gaussian-initialised weight.
    pub init_std: f64,
    pub d_mlp: Option<usize>,
    pub n_ctx: usize,
    /// Vocabulary size; defaults to the built-in toy vocabulary.
    pub vocab_size: Option<usize>,
    pub rope_base: f64,
    pub has_pos_embed: bool,
}

impl SynthConfig {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        attn_variant: AttnVariant,
        norm_mode: NormMode,
        seed: u64,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            attn_variant,
            norm_mode,
            seed,
            init_std: 0.02,
            d_mlp: None,
            n_ctx: 64,
            vocab_size: None,
            rope_base: 10_000.0,
            has_pos_embed: true,
        }
    }

    pub fn with_init_std(mut self, std: f64) -> Self {
        self.init_std = std;
        self
    }
}

/// Deterministic Gaussian-initialised decoder-only model.
///
/// Heads whose `W_Q` or `W_K` condition number reaches [`KAPPA_SYNTH_MAX`] are
/// resampled. Layer-norm gains start at one; every other tensor is drawn from
/// `N(0, init_std)`.
pub fn synth_toy_model(spec: &SynthConfig) -> Result<ModelBundle> {
    if spec.n_heads == 0 || spec.d_model % spec.n_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {} not divisible by n_heads {}",
            spec.d_model, spec.n_heads
        )));
    }
    if !(spec.init_std > 0.0 && spec.init_std.is_finite()) {
        return Err(Error::Config("init_std must be positive".into()));
    }
    let vocab = toy_vocab(spec.vocab_size);
    let config = ModelConfig {
        n_layers: spec.n_layers,
        n_heads: spec.n_heads,
        d_model: spec.d_model,
        d_head: spec.d_model / spec.n_heads,
        d_mlp: spec.d_mlp.unwrap_or(4 * spec.d_model),
        vocab_size: vocab.len(),
        n_ctx: spec.n_ctx,
        attn_variant: spec.attn_variant,
        rope_base: spec.attn_variant.has_rope().then_some(spec.rope_base),
        rotary_dim: None,
        norm_mode: spec.norm_mode,
        ln_eps: 1e-5,
        has_pos_embed: spec.has_pos_embed,
        mlp_activation: MlpActivation::GeluTanh,
    };
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.init_std)
        .map_err(|e| Error::Config(format!("bad init_std: {e}")))?;
    let draw = |shape: Vec<usize>, rng: &mut ChaCha8Rng| -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(normal) as f32).collect();
        Tensor { shape, data }
    };

    let (d, h, r) = (config.d_model, config.n_heads, config.d_head);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.tensor_layout() {
        let t = if name.ends_with("ln1.w") || name.ends_with("ln2.w") || name == "ln_final.w" {
            Tensor {
                data: vec![1.0; shape.iter().product()],
                shape,
            }
        } else if name.ends_with("attn.W_Q") || name.ends_with("attn.W_K") {
            let mut t = Tensor::zeros(shape);
            for head in 0..h {
                let mut tries = 0;
                let slice = loop {
                    let cand = draw(vec![d, r], &mut rng);
                    let m = DMatrix::from_row_iterator(d, r, cand.data.iter().map(|&x| x as f64));
                    let kappa = condition_number(&m).unwrap_or(f64::INFINITY);
                    if kappa < KAPPA_SYNTH_MAX {
                        break cand.data;
                    }
                    tries += 1;
                    if tries > 100 {
                        return Err(Error::Config(
                            "could not draw a well-conditioned head in 100 tries".into(),
                        ));
                    }
                };
                t.data[head * d * r..(head + 1) * d * r].copy_from_slice(&slice);
            }
            t
        } else {
            draw(shape, &mut rng)
        };
        tensors.insert(name, t);
    }
    let metadata = BTreeMap::from([
        ("model_id".to_string(), "toy".to_string()),
        ("seed".to_string(), spec.seed.to_string()),
        ("init_std".to_string(), spec.init_std.to_string()),
    ]);
    ModelBundle::new(config, tensors, Some(vocab), metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelBundle {
        synth_toy_model(&SynthConfig::new(2, 2, 8, AttnVariant::Bias, NormMode::FrozenLn, 7))
            .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = toy();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path(), false).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn overwrite_refused_without_force() {
        let b = toy();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path(), false).unwrap();
        assert!(matches!(
            save_bundle(&b, dir.path(), false),
            Err(Error::DirectoryNotEmpty(_))
        ));
        save_bundle(&b, dir.path(), true).unwrap();
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let b = toy();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path(), false).unwrap();
        let p = dir.path().join(TENSOR_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[17] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn shape_mismatch_detected() {
        let b = toy();
        let mut tensors = b.tensors.clone();
        tensors.insert("embed".into(), Tensor::zeros(vec![b.config.vocab_size, 9]));
        let err = ModelBundle::new(b.config.clone(), tensors, b.vocab.clone(), BTreeMap::new());
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn missing_and_non_finite_tensors() {
        let b = toy();
        let mut missing = b.tensors.clone();
        missing.remove("unembed");
        assert!(matches!(
            ModelBundle::new(b.config.clone(), missing, None, BTreeMap::new()),
            Err(Error::MissingTensor(_))
        ));
        let mut bad = b.tensors.clone();
        bad.get_mut("b_U").unwrap().data[0] = f32::NAN;
        assert!(matches!(
            ModelBundle::new(b.config.clone(), bad, None, BTreeMap::new()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn schema_version_checked() {
        let b = toy();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path(), false).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replacen(
            "\"schema_version\": 1",
            "\"schema_version\": 99",
            1,
        );
        fs::write(&p, text).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::SchemaVersion { found: 99, .. })
        ));
    }

    #[test]
    fn synth_is_deterministic_and_echoes_rope_base() {
        let spec = SynthConfig::new(1, 2, 8, AttnVariant::Rope, NormMode::None, 3);
        let a = synth_toy_model(&spec).unwrap();
        let b = synth_toy_model(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.config.rope_base, Some(10_000.0));
        assert!(synth_toy_model(&SynthConfig::new(1, 3, 8, AttnVariant::Plain, NormMode::None, 0)).is_err());
    }

    #[test]
    fn synth_heads_are_well_conditioned_across_seeds() {
        for seed in 0..100 {
            let b = synth_toy_model(&SynthConfig::new(1, 2, 8, AttnVariant::Plain, NormMode::None, seed))
                .unwrap();
            for h in &b.diagnostics().heads {
                assert!(h.kappa_q < KAPPA_SYNTH_MAX && h.kappa_k < KAPPA_SYNTH_MAX);
                assert!(!h.unsupported);
            }
        }
    }

    #[test]
    fn duplicated_key_columns_are_flagged() {
        let b = toy();
        let mut tensors = b.tensors.clone();
        let wk = tensors.get_mut("blocks.1.attn.W_K").unwrap();
        let (d, r) = (8, 4);
        // head 0: copy column 0 into column 1
        for row in 0..d {
            wk.data[row * r + 1] = wk.data[row * r];
        }
        let b2 = ModelBundle::new(b.config.clone(), tensors, b.vocab.clone(), b.metadata.clone())
            .unwrap();
        let diag = b2.diagnostics().head(1, 0).unwrap();
        assert!(diag.unsupported);
        assert!(b2.diagnostics().head(1, 1).map(|h| !h.unsupported).unwrap());
    }

    #[test]
    fn identity_weights_have_unit_kappa() {
        let b = toy();
        let mut tensors = b.tensors.clone();
        for w in ["W_Q", "W_K"] {
            let t = tensors.get_mut(&format!("blocks.0.attn.{w}")).unwrap();
            for head in 0..2 {
                for row in 0..8 {
                    for col in 0..4 {
                        t.data[head * 32 + row * 4 + col] =
                            if row == col + 4 * head { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        let b2 = ModelBundle::new(b.config.clone(), tensors, b.vocab.clone(), b.metadata.clone())
            .unwrap();
        let diag = b2.diagnostics().head(0, 1).unwrap();
        assert!((diag.kappa_q - 1.0).abs() < 1e-12);
        assert!((diag.kappa_k - 1.0).abs() < 1e-12);
    }
}
