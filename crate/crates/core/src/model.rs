//! Forward-only two-stream transformer for cross-view camera and depth
//! prediction.
//!
//! The GAS encoder (ground, aerial, satellite) alternates per-frame
//! self-attention with masked global attention in which ground and aerial
//! tokens never read satellite tokens. A parallel satellite encoder attends
//! among satellite views only and adds the GAS encoder's satellite features
//! after each block. Camera and depth heads are shared by both streams:
//! ground/aerial predictions come from the GAS encoder, satellite
//! predictions from the satellite encoder.
//!
//! All numerics are `f64`. Every reduction over keys runs in one canonical
//! order (keys sorted by content), so outputs do not depend on where a
//! frame sits in the batch and masked-out keys cannot perturb rounding.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraVector9, UnitQuaternion};
use crate::raster::{write_atomic, DepthMap, Image3};
use crate::scene::Modality;

pub const REGISTER_TOKENS: usize = 4;
/// Camera token plus registers, ahead of the patch tokens of every frame.
pub const SPECIAL_TOKENS: usize = 1 + REGISTER_TOKENS;
pub const DEFAULT_ALPHA: f64 = 0.4;
const LN_EPS: f64 = 1e-6;
const FOV_MARGIN: f64 = 1e-9;
const LOG_DEPTH_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid taps: {0}")]
    InvalidTaps(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid pairing: {0}")]
    InvalidPairing(String),
    #[error("malformed weights: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder depth L.
    pub layers: usize,
    /// Token width C.
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub camera_head_layers: usize,
    /// Input resolution the command-line pipeline renders frames at.
    pub image_width: u32,
    pub image_height: u32,
    pub seed: u64,
    /// Marks GAS attention blocks as non-trainable.
    pub frozen: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 32,
            heads: 4,
            patch: 16,
            mlp_ratio: 4,
            camera_head_layers: 4,
            image_width: 32,
            image_height: 32,
            seed: 0,
            frozen: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.layers == 0 {
            return bad("layers must be ≥ 1".into());
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.patch == 0 || self.mlp_ratio == 0 {
            return bad("patch and mlp_ratio must be ≥ 1".into());
        }
        if !(self.image_width as usize).is_multiple_of(self.patch) || !(self.image_height as usize).is_multiple_of(self.patch) {
            return bad(format!(
                "patch {} must divide the image size {}x{}",
                self.patch, self.image_width, self.image_height
            ));
        }
        Ok(())
    }

    fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

// ---------------------------------------------------------------------------
// Weight bank

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data file.
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSidecar {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Every parameter of the model as named `f32` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBank {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
}

fn push_linear(out: &mut Vec<(String, Vec<usize>, bool)>, name: &str, o: usize, i: usize, frozen: bool) {
    out.push((format!("{name}.weight"), vec![o, i], frozen));
    out.push((format!("{name}.bias"), vec![o], frozen));
}

fn push_attn(out: &mut Vec<(String, Vec<usize>, bool)>, name: &str, c: usize, frozen: bool) {
    for p in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{name}.{p}"), c, c, frozen);
    }
}

fn push_mlp(out: &mut Vec<(String, Vec<usize>, bool)>, name: &str, c: usize, ratio: usize, frozen: bool) {
    push_linear(out, &format!("{name}.fc1"), ratio * c, c, frozen);
    push_linear(out, &format!("{name}.fc2"), c, ratio * c, frozen);
}

/// Tensor names, shapes and frozen flags in file order.
pub fn weight_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let c = cfg.width;
    let mut out = Vec::new();
    push_linear(&mut out, "patch_embed", c, cfg.patch_dim(), false);
    out.push(("tokens.camera_first".into(), vec![1, c], false));
    out.push(("tokens.register_first".into(), vec![REGISTER_TOKENS, c], false));
    out.push(("tokens.camera_other".into(), vec![1, c], false));
    out.push(("tokens.register_other".into(), vec![REGISTER_TOKENS, c], false));
    for l in 0..cfg.layers {
        push_attn(&mut out, &format!("gas.{l}.frame_attn"), c, cfg.frozen);
        push_attn(&mut out, &format!("gas.{l}.global_attn"), c, cfg.frozen);
        push_mlp(&mut out, &format!("gas.{l}.mlp"), c, cfg.mlp_ratio, false);
    }
    for l in 0..cfg.layers {
        push_attn(&mut out, &format!("sat.{l}.attn"), c, false);
        push_mlp(&mut out, &format!("sat.{l}.mlp"), c, cfg.mlp_ratio, false);
    }
    for l in 0..cfg.camera_head_layers {
        push_attn(&mut out, &format!("camera_head.{l}.attn"), c, false);
        push_mlp(&mut out, &format!("camera_head.{l}.mlp"), c, cfg.mlp_ratio, false);
    }
    push_linear(&mut out, "camera_head.out", 9, c, false);
    push_linear(&mut out, "depth_head", cfg.patch * cfg.patch, c, false);
    out
}

impl WeightBank {
    /// Uniform in `[−1/√C, 1/√C]`, drawn in layout order from `config.seed`.
    pub fn generate(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let bound = 1.0 / (config.width as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = weight_layout(config)
            .into_iter()
            .map(|(name, shape, frozen)| {
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor { name, shape, frozen, data }
            })
            .collect();
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| t.frozen).map(|t| t.name.as_str()).collect()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.frozen).map(|t| t.name.as_str()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the flat little-endian `f32` file at `path` and its JSON
    /// sidecar at `path.json`.
    pub fn write(&self, path: &Path) -> Result<(), ModelError> {
        let mut bytes = Vec::with_capacity(4 * self.parameter_count());
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset: bytes.len(), frozen: t.frozen });
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sidecar = WeightSidecar { config: self.config.clone(), tensors: entries };
        write_atomic(path, &bytes)?;
        write_atomic(&Self::sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ModelError> {
        let sidecar: WeightSidecar = serde_json::from_slice(&fs::read(Self::sidecar_path(path))?)?;
        let bytes = fs::read(path)?;
        sidecar.config.validate()?;
        let layout = weight_layout(&sidecar.config);
        if layout.len() != sidecar.tensors.len() {
            return Err(ModelError::Malformed(format!(
                "expected {} tensors, sidecar lists {}",
                layout.len(),
                sidecar.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, shape, _), e) in layout.into_iter().zip(&sidecar.tensors) {
            if e.name != name || e.shape != shape {
                return Err(ModelError::Malformed(format!("tensor {} {:?} where {name} {shape:?} expected", e.name, e.shape)));
            }
            let len = 4 * shape.iter().product::<usize>();
            let chunk = bytes
                .get(e.offset..e.offset + len)
                .ok_or_else(|| ModelError::Malformed(format!("tensor {name} runs past the end of the file")))?;
            let data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor { name, shape, frozen: e.frozen, data });
        }
        Ok(Self { config: sidecar.config, tensors })
    }
}

// ---------------------------------------------------------------------------
// Typed parameters

#[derive(Debug, Clone)]
struct Linear {
    out: usize,
    inp: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Linear {
    /// `y = W·x + b`, summing over inputs in index order.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inp);
        for (o, yo) in y.iter_mut().enumerate().take(self.out) {
            let row = &self.w[o * self.inp..(o + 1) * self.inp];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *yo = acc + self.b[o];
        }
    }

    fn map_rows(&self, x: &Tokens) -> Tokens {
        let mut out = Tokens::zeros(x.len(), self.out);
        for i in 0..x.len() {
            self.apply(x.row(i), out.row_mut(i));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Block {
    attn: Attn,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct GasBlock {
    frame: Attn,
    global: Attn,
    mlp: Mlp,
}

/// `f64` view of a [`WeightBank`], ready for the forward pass.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    config: ModelConfig,
    patch: Linear,
    camera_first: Vec<f64>,
    register_first: Vec<f64>,
    camera_other: Vec<f64>,
    register_other: Vec<f64>,
    gas: Vec<GasBlock>,
    sat: Vec<Block>,
    camera_blocks: Vec<Block>,
    camera_out: Linear,
    depth: Linear,
}

impl ModelWeights {
    pub fn from_bank(bank: &WeightBank) -> Result<Self, ModelError> {
        let cfg = bank.config.clone();
        cfg.validate()?;
        let by_name: HashMap<&str, &Tensor> = bank.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let vec = |name: &str| -> Result<Vec<f64>, ModelError> {
            by_name
                .get(name)
                .map(|t| t.data.iter().map(|v| *v as f64).collect())
                .ok_or_else(|| ModelError::Malformed(format!("missing tensor {name}")))
        };
        let linear = |name: &str| -> Result<Linear, ModelError> {
            let t = by_name
                .get(format!("{name}.weight").as_str())
                .copied()
                .ok_or_else(|| ModelError::Malformed(format!("missing tensor {name}.weight")))?;
            Ok(Linear { out: t.shape[0], inp: t.shape[1], w: vec(&format!("{name}.weight"))?, b: vec(&format!("{name}.bias"))? })
        };
        let attn = |name: &str| -> Result<Attn, ModelError> {
            Ok(Attn {
                q: linear(&format!("{name}.q"))?,
                k: linear(&format!("{name}.k"))?,
                v: linear(&format!("{name}.v"))?,
                o: linear(&format!("{name}.o"))?,
            })
        };
        let mlp = |name: &str| -> Result<Mlp, ModelError> {
            Ok(Mlp { fc1: linear(&format!("{name}.fc1"))?, fc2: linear(&format!("{name}.fc2"))? })
        };
        let gas = (0..cfg.layers)
            .map(|l| {
                Ok(GasBlock {
                    frame: attn(&format!("gas.{l}.frame_attn"))?,
                    global: attn(&format!("gas.{l}.global_attn"))?,
                    mlp: mlp(&format!("gas.{l}.mlp"))?,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        let block = |prefix: &str, l: usize| -> Result<Block, ModelError> {
            Ok(Block { attn: attn(&format!("{prefix}.{l}.attn"))?, mlp: mlp(&format!("{prefix}.{l}.mlp"))? })
        };
        Ok(Self {
            patch: linear("patch_embed")?,
            camera_first: vec("tokens.camera_first")?,
            register_first: vec("tokens.register_first")?,
            camera_other: vec("tokens.camera_other")?,
            register_other: vec("tokens.register_other")?,
            gas,
            sat: (0..cfg.layers).map(|l| block("sat", l)).collect::<Result<_, _>>()?,
            camera_blocks: (0..cfg.camera_head_layers).map(|l| block("camera_head", l)).collect::<Result<_, _>>()?,
            camera_out: linear("camera_head.out")?,
            depth: linear("depth_head")?,
            config: cfg,
        })
    }

    pub fn generate(config: &ModelConfig) -> Result<Self, ModelError> {
        Self::from_bank(&WeightBank::generate(config)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

// ---------------------------------------------------------------------------
// Tokens

/// Row-major token matrix, one row of width `c` per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tokens {
    pub fn zeros(n: usize, c: usize) -> Self {
        Self { c, data: vec![0.0; n * c] }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.c).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn slice(&self, start: usize, end: usize) -> Tokens {
        Tokens { c: self.c, data: self.data[start * self.c..end * self.c].to_vec() }
    }

    fn add_assign(&mut self, other: &Tokens) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn concat(parts: &[&Tokens], c: usize) -> Tokens {
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tokens { c, data }
    }
}

/// Tokens of one frame: camera token, registers, then patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub modality: Modality,
    pub frame_index: usize,
    /// Patch grid (rows, cols).
    pub grid: (usize, usize),
    pub tokens: Tokens,
}

impl TokenSet {
    pub fn camera_token(&self) -> &[f64] {
        self.tokens.row(0)
    }

    pub fn register_tokens(&self) -> Tokens {
        self.tokens.slice(1, SPECIAL_TOKENS)
    }

    pub fn patch_tokens(&self) -> Tokens {
        self.tokens.slice(SPECIAL_TOKENS, self.tokens.len())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Fixed 2D sinusoidal encoding: the first half of the channels encodes the
/// patch row, the second half the column.
pub fn position_encoding(row: usize, col: usize, c: usize) -> Vec<f64> {
    let half = c / 2;
    let mut out = vec![0.0; c];
    for (part, pos, span) in [(0usize, row, half), (half, col, c - half)] {
        for d in 0..span {
            let pair = (d / 2) as f64;
            let freq = 10000f64.powf(-2.0 * pair / span.max(1) as f64);
            let angle = pos as f64 * freq;
            out[part + d] = if d % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Linear patch projection plus position encoding, behind the frame's
/// camera and register tokens. Frame index 0 gets the first-frame pair.
pub fn patch_embed(
    image: &Image3,
    modality: Modality,
    frame_index: usize,
    weights: &ModelWeights,
) -> Result<TokenSet, ModelError> {
    let cfg = &weights.config;
    let p = cfg.patch;
    let (w, h) = (image.width as usize, image.height as usize);
    if w == 0 || h == 0 || w % p != 0 || h % p != 0 {
        return Err(ModelError::InvalidShape(format!("image {w}x{h} is not divisible into {p}x{p} patches")));
    }
    let (rows, cols) = (h / p, w / p);
    let c = cfg.width;
    let mut tokens = Tokens::zeros(SPECIAL_TOKENS + rows * cols, c);
    let (cam, reg) = if frame_index == 0 {
        (&weights.camera_first, &weights.register_first)
    } else {
        (&weights.camera_other, &weights.register_other)
    };
    tokens.row_mut(0).copy_from_slice(cam);
    tokens.data[c..SPECIAL_TOKENS * c].copy_from_slice(reg);

    let mut flat = vec![0.0; cfg.patch_dim()];
    for r in 0..rows {
        for q in 0..cols {
            for ch in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        flat[(ch * p + y) * p + x] = image.get(ch, (q * p + x) as u32, (r * p + y) as u32);
                    }
                }
            }
            let row = tokens.row_mut(SPECIAL_TOKENS + r * cols + q);
            weights.patch.apply(&flat, row);
            for (v, e) in row.iter_mut().zip(position_encoding(r, q, c)) {
                *v += e;
            }
        }
    }
    Ok(TokenSet { modality, frame_index, grid: (rows, cols), tokens })
}

// ---------------------------------------------------------------------------
// Attention

/// Boolean attention mask over all tokens of all frames; `true` = permitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    data: Vec<bool>,
}

impl AttentionMask {
    pub fn all(n: usize) -> Self {
        Self { n, data: vec![true; n * n] }
    }

    pub fn get(&self, query: usize, key: usize) -> bool {
        self.data[query * self.n + key]
    }
}

/// Ground and aerial rows are blocked exactly on satellite columns;
/// satellite rows see everything.
pub fn build_msa_mask(modalities: &[Modality], tokens_per_frame: &[usize]) -> AttentionMask {
    let tags: Vec<Modality> = modalities
        .iter()
        .zip(tokens_per_frame)
        .flat_map(|(m, n)| std::iter::repeat_n(*m, *n))
        .collect();
    let n = tags.len();
    let mut data = Vec::with_capacity(n * n);
    for q in &tags {
        for k in &tags {
            data.push(*q == Modality::Satellite || *k != Modality::Satellite);
        }
    }
    AttentionMask { n, data }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Multi-head softmax attention over pre-normalized tokens `x`. Returns the
/// output projection and, when `record` is set, the per-head weights
/// `[head][query][key]` (zero where masked).
fn attend(
    x: &Tokens,
    w: &Attn,
    heads: usize,
    mask: Option<&AttentionMask>,
    record: bool,
) -> (Tokens, Option<Vec<Vec<Vec<f64>>>>) {
    let n = x.len();
    let c = x.c;
    let dh = c / heads;
    let (q, k, v) = (w.q.map_rows(x), w.k.map_rows(x), w.v.map_rows(x));

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lex_cmp(k.row(a), k.row(b)).then_with(|| lex_cmp(v.row(a), v.row(b))));

    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed = Tokens::zeros(n, c);
    let mut weights = record.then(|| vec![vec![vec![0.0; n]; n]; heads]);
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let permitted: Vec<usize> = order.iter().copied().filter(|&j| mask.is_none_or(|m| m.get(i, j))).collect();
        if permitted.is_empty() {
            continue;
        }
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let qi = &q.row(i)[span.clone()];
            let mut max = f64::NEG_INFINITY;
            for &j in &permitted {
                let kj = &k.row(j)[span.clone()];
                let mut s = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                scores[j] = s * scale;
                max = max.max(scores[j]);
            }
            let mut total = 0.0;
            for &j in &permitted {
                scores[j] = (scores[j] - max).exp();
                total += scores[j];
            }
            let out = &mut mixed.row_mut(i)[span.clone()];
            for &j in &permitted {
                let a = scores[j] / total;
                if let Some(wts) = weights.as_mut() {
                    wts[h][i][j] = a;
                }
                for (o, vv) in out.iter_mut().zip(&v.row(j)[span.clone()]) {
                    *o += a * vv;
                }
            }
        }
    }
    (w.o.map_rows(&mixed), weights)
}

/// Per-token layer normalization without affine parameters.
fn layer_norm(x: &Tokens) -> Tokens {
    let mut out = x.clone();
    let c = x.c as f64;
    for i in 0..x.len() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn mlp_forward(m: &Mlp, x: &Tokens) -> Tokens {
    let mut hidden = m.fc1.map_rows(x);
    for v in hidden.data.iter_mut() {
        *v = gelu(*v);
    }
    m.fc2.map_rows(&hidden)
}

/// Attention weights of a pre-norm attention sublayer, for inspection.
/// Indexed `[head][query][key]`.
pub fn attention_weights(
    tokens: &Tokens,
    weights: &ModelWeights,
    layer: usize,
    mask: Option<&AttentionMask>,
) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
    let block = weights
        .gas
        .get(layer)
        .ok_or_else(|| ModelError::InvalidConfig(format!("no GAS block {layer}")))?;
    if let Some(m) = mask {
        if m.n != tokens.len() {
            return Err(ModelError::InvalidShape(format!("mask over {} tokens, {} given", m.n, tokens.len())));
        }
    }
    let (_, w) = attend(&layer_norm(tokens), &block.global, weights.config.heads, mask, true);
    Ok(w.expect("recorded"))
}

// ---------------------------------------------------------------------------
// Encoders

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalMask {
    /// Ground/aerial queries skip satellite keys.
    Msa,
    /// Unrestricted global attention.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GasOutput {
    pub frames: Vec<TokenSet>,
    /// `sat_taps[l][s]`: tokens of the s-th satellite frame after block l.
    pub sat_taps: Vec<Vec<Tokens>>,
}

fn split_frames(x: &Tokens, template: &[TokenSet]) -> Vec<TokenSet> {
    let mut start = 0;
    template
        .iter()
        .map(|t| {
            let end = start + t.len();
            let out = TokenSet { tokens: x.slice(start, end), ..t.clone() };
            start = end;
            out
        })
        .collect()
}

pub fn gas_encoder_forward(
    frames: &[TokenSet],
    weights: &ModelWeights,
    mode: GlobalMask,
) -> Result<GasOutput, ModelError> {
    if frames.is_empty() {
        return Err(ModelError::InvalidBatch("GAS encoder needs at least one frame".into()));
    }
    let c = weights.config.width;
    let heads = weights.config.heads;
    let counts: Vec<usize> = frames.iter().map(TokenSet::len).collect();
    let tags: Vec<Modality> = frames.iter().map(|f| f.modality).collect();
    let mask = match mode {
        GlobalMask::Msa => Some(build_msa_mask(&tags, &counts)),
        GlobalMask::Global => None,
    };
    let mut x = Tokens::concat(&frames.iter().map(|f| &f.tokens).collect::<Vec<_>>(), c);
    let mut taps = Vec::with_capacity(weights.gas.len());
    for block in &weights.gas {
        let mut start = 0;
        for n in &counts {
            let frame = x.slice(start, start + n);
            let (a, _) = attend(&layer_norm(&frame), &block.frame, heads, None, false);
            for (dst, src) in x.data[start * c..(start + n) * c].iter_mut().zip(&a.data) {
                *dst += src;
            }
            start += n;
        }
        let (a, _) = attend(&layer_norm(&x), &block.global, heads, mask.as_ref(), false);
        x.add_assign(&a);
        let m = mlp_forward(&block.mlp, &layer_norm(&x));
        x.add_assign(&m);

        taps.push(
            split_frames(&x, frames)
                .into_iter()
                .filter(|f| f.modality == Modality::Satellite)
                .map(|f| f.tokens)
                .collect(),
        );
    }
    Ok(GasOutput { frames: split_frames(&x, frames), sat_taps: taps })
}

/// Satellite-only stack: global attention among satellite frames, then
/// `z = z + v_s` with the matching GAS tap, then the MLP.
pub fn sat_encoder_forward(
    sat_frames: &[TokenSet],
    sat_taps: &[Vec<Tokens>],
    weights: &ModelWeights,
) -> Result<Vec<TokenSet>, ModelError> {
    if sat_frames.is_empty() {
        return Err(ModelError::InvalidBatch("satellite encoder needs at least one satellite frame".into()));
    }
    if sat_taps.len() != weights.sat.len() {
        return Err(ModelError::InvalidTaps(format!("{} taps for {} blocks", sat_taps.len(), weights.sat.len())));
    }
    let c = weights.config.width;
    let mut x = Tokens::concat(&sat_frames.iter().map(|f| &f.tokens).collect::<Vec<_>>(), c);
    for (l, (block, tap)) in weights.sat.iter().zip(sat_taps).enumerate() {
        if tap.len() != sat_frames.len() || tap.iter().zip(sat_frames).any(|(t, f)| t.data.len() != f.tokens.data.len()) {
            return Err(ModelError::InvalidTaps(format!("tap {l} does not match the satellite frames")));
        }
        let (a, _) = attend(&layer_norm(&x), &block.attn, weights.config.heads, None, false);
        x.add_assign(&a);
        x.add_assign(&Tokens::concat(&tap.iter().collect::<Vec<_>>(), c));
        let m = mlp_forward(&block.mlp, &layer_norm(&x));
        x.add_assign(&m);
    }
    Ok(split_frames(&x, sat_frames))
}

// ---------------------------------------------------------------------------
// Heads

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps any real to a field of view strictly inside (0, π).
pub fn fov_from_logit(x: f64) -> f64 {
    let f = PI * sigmoid(x);
    if f.is_nan() {
        PI / 2.0
    } else {
        f.clamp(FOV_MARGIN, PI - FOV_MARGIN)
    }
}

/// Self-attention blocks over the set of camera tokens, then a linear map
/// to (quaternion, translation, fov logits).
pub fn camera_head(camera_tokens: &Tokens, weights: &ModelWeights) -> Result<Vec<CameraVector9>, ModelError> {
    if camera_tokens.is_empty() {
        return Err(ModelError::InvalidBatch("camera head needs at least one token".into()));
    }
    if camera_tokens.c != weights.config.width {
        return Err(ModelError::InvalidShape(format!("camera tokens of width {}", camera_tokens.c)));
    }
    let mut x = camera_tokens.clone();
    for block in &weights.camera_blocks {
        let (a, _) = attend(&layer_norm(&x), &block.attn, weights.config.heads, None, false);
        x.add_assign(&a);
        let m = mlp_forward(&block.mlp, &layer_norm(&x));
        x.add_assign(&m);
    }
    let raw = weights.camera_out.map_rows(&layer_norm(&x));
    Ok((0..raw.len())
        .map(|i| {
            let r = raw.row(i);
            let q = UnitQuaternion::normalize(r[0], r[1], r[2], r[3]).unwrap_or_else(UnitQuaternion::identity);
            CameraVector9 { q, t: [r[4], r[5], r[6]], fov: [fov_from_logit(r[7]), fov_from_logit(r[8])] }
        })
        .collect())
}

/// Per-patch-token linear decoder to `patch²` log-depths, exponentiated and
/// tiled back to the image grid.
pub fn depth_head(
    patch_tokens: &Tokens,
    weights: &ModelWeights,
    width: u32,
    height: u32,
) -> Result<DepthMap, ModelError> {
    let p = weights.config.patch;
    let (w, h) = (width as usize, height as usize);
    if w % p != 0 || h % p != 0 || patch_tokens.len() != (w / p) * (h / p) {
        return Err(ModelError::InvalidShape(format!(
            "{} patch tokens do not tile a {w}x{h} image with patch {p}",
            patch_tokens.len()
        )));
    }
    let cols = w / p;
    let raw = weights.depth.map_rows(&layer_norm(patch_tokens));
    let mut out = DepthMap::zeros(width, height);
    for t in 0..raw.len() {
        let (r, q) = (t / cols, t % cols);
        for (k, v) in raw.row(t).iter().enumerate() {
            let (y, x) = (k / p, k % p);
            let d = v.clamp(-LOG_DEPTH_CLAMP, LOG_DEPTH_CLAMP).exp();
            out.set((q * p + x) as u32, (r * p + y) as u32, d as f32);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Full forward and loss

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub modality: Modality,
    pub image: Image3,
}

/// Which encoder produced a frame's predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Gas,
    Sat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub id: String,
    pub modality: Modality,
    pub stream: Stream,
    pub camera: CameraVector9,
    pub depth: DepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub frames: Vec<FramePrediction>,
}

impl ForwardOutput {
    pub fn cameras(&self) -> Vec<CameraVector9> {
        self.frames.iter().map(|f| f.camera).collect()
    }
}

pub fn skynet_forward(frames: &[Frame], weights: &ModelWeights) -> Result<ForwardOutput, ModelError> {
    skynet_forward_with(frames, weights, GlobalMask::Msa)
}

pub fn skynet_forward_with(
    frames: &[Frame],
    weights: &ModelWeights,
    mode: GlobalMask,
) -> Result<ForwardOutput, ModelError> {
    if frames.is_empty() {
        return Err(ModelError::InvalidBatch("no frames".into()));
    }
    let sets = frames
        .iter()
        .enumerate()
        .map(|(i, f)| patch_embed(&f.image, f.modality, i, weights))
        .collect::<Result<Vec<_>, _>>()?;
    let gas = gas_encoder_forward(&sets, weights, mode)?;

    let sat_idx: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].modality == Modality::Satellite).collect();
    let ga_idx: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].modality != Modality::Satellite).collect();

    // Final tokens per frame, taken from the stream that owns the frame.
    let mut final_sets: Vec<Option<(TokenSet, Stream)>> = vec![None; frames.len()];
    for &i in &ga_idx {
        final_sets[i] = Some((gas.frames[i].clone(), Stream::Gas));
    }
    if !sat_idx.is_empty() {
        let sat_in: Vec<TokenSet> = sat_idx.iter().map(|&i| sets[i].clone()).collect();
        let sat_out = sat_encoder_forward(&sat_in, &gas.sat_taps, weights)?;
        for (&i, s) in sat_idx.iter().zip(sat_out) {
            final_sets[i] = Some((s, Stream::Sat));
        }
    }
    let final_sets: Vec<(TokenSet, Stream)> = final_sets.into_iter().map(|s| s.expect("every frame routed")).collect();

    let c = weights.config.width;
    let mut cameras = vec![None; frames.len()];
    for group in [&ga_idx, &sat_idx] {
        if group.is_empty() {
            continue;
        }
        let mut toks = Tokens::zeros(group.len(), c);
        for (r, &i) in group.iter().enumerate() {
            toks.row_mut(r).copy_from_slice(final_sets[i].0.camera_token());
        }
        for (&i, cam) in group.iter().zip(camera_head(&toks, weights)?) {
            cameras[i] = Some(cam);
        }
    }

    let out = frames
        .iter()
        .zip(final_sets)
        .zip(cameras)
        .map(|((f, (set, stream)), cam)| {
            Ok(FramePrediction {
                id: f.id.clone(),
                modality: f.modality,
                stream,
                camera: cam.expect("camera per frame"),
                depth: depth_head(&set.patch_tokens(), weights, f.image.width, f.image.height)?,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(ForwardOutput { frames: out })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub id: String,
    pub modality: Modality,
    pub camera: CameraVector9,
    /// `0.0` marks invalid pixels.
    pub depth: Option<DepthMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cam_sat: f64,
    pub cam_ground_aerial: f64,
    pub depth: f64,
    pub total: f64,
}

/// Mean absolute error over the nine camera components. Quaternions are
/// stored sign-canonical, so the components compare directly.
pub fn camera_mae(a: &CameraVector9, b: &CameraVector9) -> f64 {
    let (x, y) = (a.to_array(), b.to_array());
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / 9.0
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// `L_cam,sat + α·L_cam,ground/aerial + L_depth`.
pub fn compute_loss(pred: &ForwardOutput, gt: &[GroundTruthFrame], alpha: f64) -> Result<LossParts, ModelError> {
    if pred.frames.len() != gt.len() {
        return Err(ModelError::InvalidPairing(format!("{} predictions for {} ground-truth frames", pred.frames.len(), gt.len())));
    }
    let (mut sat, mut ga, mut depth) = (Vec::new(), Vec::new(), Vec::new());
    for (p, g) in pred.frames.iter().zip(gt) {
        if p.id != g.id || p.modality != g.modality {
            return Err(ModelError::InvalidPairing(format!("prediction {} ({}) paired with {} ({})", p.id, p.modality, g.id, g.modality)));
        }
        let e = camera_mae(&p.camera, &g.camera);
        if g.modality == Modality::Satellite {
            sat.push(e);
        } else {
            ga.push(e);
        }
        if let Some(gd) = &g.depth {
            if (gd.width, gd.height) != (p.depth.width, p.depth.height) {
                return Err(ModelError::InvalidPairing(format!(
                    "frame {}: depth {}x{} vs ground truth {}x{}",
                    g.id, p.depth.width, p.depth.height, gd.width, gd.height
                )));
            }
            let errs: Vec<f64> = gd
                .data
                .iter()
                .zip(&p.depth.data)
                .filter(|(t, _)| **t > 0.0 && t.is_finite())
                .map(|(t, q)| (*q as f64 - *t as f64).abs())
                .collect();
            if !errs.is_empty() {
                depth.push(mean(&errs));
            }
        }
    }
    let parts = LossParts { cam_sat: mean(&sat), cam_ground_aerial: mean(&ga), depth: mean(&depth), total: 0.0 };
    Ok(LossParts { total: parts.cam_sat + alpha * parts.cam_ground_aerial + parts.depth, ..parts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelWeights {
        ModelWeights::generate(&ModelConfig { layers: 1, width: 8, heads: 2, patch: 4, image_width: 8, image_height: 8, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { width: 30, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { layers: 0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { patch: 5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn token_count_and_zero_image() {
        let w = ModelWeights::generate(&ModelConfig::default()).unwrap();
        let img = Image3::zeros(32, 32);
        let set = patch_embed(&img, Modality::Ground, 0, &w).unwrap();
        assert_eq!(set.len(), 9);
        for t in 0..4 {
            let (r, q) = (t / 2, t % 2);
            let expected: Vec<f64> = w.patch.b.iter().zip(position_encoding(r, q, 32)).map(|(b, e)| b + e).collect();
            assert_eq!(set.tokens.row(SPECIAL_TOKENS + t), expected.as_slice());
        }
        assert_eq!(set.camera_token(), w.camera_first.as_slice());
        let other = patch_embed(&img, Modality::Ground, 1, &w).unwrap();
        assert_eq!(other.camera_token(), w.camera_other.as_slice());
        assert_ne!(other.camera_token(), set.camera_token());
        assert!(matches!(patch_embed(&Image3::zeros(30, 32), Modality::Ground, 0, &w), Err(ModelError::InvalidShape(_))));
    }

    #[test]
    fn mask_examples() {
        use Modality::*;
        let m = build_msa_mask(&[Ground, Aerial, Satellite], &[2, 2, 2]);
        for q in 0..6 {
            for k in 0..6 {
                assert_eq!(m.get(q, k), !(q < 4 && k >= 4), "({q}, {k})");
            }
        }
        assert_eq!(build_msa_mask(&[Ground, Aerial], &[3, 2]), AttentionMask::all(5));
        assert_eq!(build_msa_mask(&[Satellite, Satellite], &[3, 2]), AttentionMask::all(5));
    }

    #[test]
    fn fov_map_range() {
        for x in [-1e308, -800.0, -40.0, 0.0, 40.0, 800.0, f64::INFINITY, f64::NEG_INFINITY, f64::NAN] {
            let f = fov_from_logit(x);
            assert!(f > 0.0 && f < PI, "{x} -> {f}");
        }
        assert_eq!(fov_from_logit(0.0), PI / 2.0);
    }

    #[test]
    fn depth_head_shape_and_sign() {
        let w = tiny();
        let toks = Tokens { c: 8, data: (0..32).map(|i| (i as f64 * 0.37).sin() * 5.0).collect() };
        let d = depth_head(&toks, &w, 8, 8).unwrap();
        assert_eq!((d.width, d.height), (8, 8));
        assert!(d.data.iter().all(|v| *v > 0.0));
        assert!(depth_head(&toks, &w, 8, 12).is_err());
    }

    #[test]
    fn taps_must_match_blocks() {
        let w = tiny();
        let set = patch_embed(&Image3::zeros(8, 8), Modality::Satellite, 0, &w).unwrap();
        assert!(matches!(sat_encoder_forward(&[set], &[], &w), Err(ModelError::InvalidTaps(_))));
    }

    #[test]
    fn frozen_partition() {
        let bank = WeightBank::generate(&ModelConfig::default()).unwrap();
        let frozen = bank.frozen_names();
        assert_eq!(frozen.len(), 4 * 2 * 4 * 2);
        assert!(frozen.iter().all(|n| n.starts_with("gas.") && n.contains("attn")));
        assert!(bank.trainable_names().contains(&"depth_head.weight"));
        let open = WeightBank::generate(&ModelConfig { frozen: false, ..Default::default() }).unwrap();
        assert!(open.frozen_names().is_empty());
    }

    #[test]
    fn weights_in_range_and_deterministic() {
        let cfg = ModelConfig::default();
        let a = WeightBank::generate(&cfg).unwrap();
        assert_eq!(a, WeightBank::generate(&cfg).unwrap());
        let bound = 1.0 / (32f32).sqrt();
        assert!(a.tensors().iter().all(|t| t.data.iter().all(|v| v.abs() <= bound)));
        assert_ne!(a, WeightBank::generate(&ModelConfig { seed: 1, ..cfg }).unwrap());
    }
}
