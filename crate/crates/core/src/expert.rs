//! Forward-only action expert.
//!
//! A stack of DiT-style blocks over the 30-step action chunk: AdaRMS-modulated
//! self-attention (QK-norm, rotary), cross-attention to per-layer VLM keys and
//! values through adapter projections, and a SwiGLU MLP, each behind a
//! time-dependent gate. All arithmetic is `f64`; weights are persisted as
//! little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowError, VelocityField};
use crate::normalize::{GRID_LEN, HORIZON_MAX, WIDTH_MAX};
use crate::rng::DetRng;

pub const RMS_EPS: f64 = 1e-6;
pub const DEPTH_GATE_INIT_BIAS: f64 = -4.0;
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;
/// Flow time is stretched before the sinusoidal features so that `t` in
/// `[0, 1]` spans many periods of the fastest frequency.
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("gate error: {0}")]
    Gate(String),
    #[error("weights format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub time_dim: usize,
    pub kv_width: usize,
    pub rotary_base: f64,
    pub depth_gate: bool,
}

impl ExpertConfig {
    pub fn desk() -> Self {
        Self {
            layers: 2,
            width: 32,
            heads: 4,
            mlp_width: 64,
            time_dim: 32,
            kv_width: 24,
            rotary_base: 10_000.0,
            depth_gate: true,
        }
    }

    /// Full-size shape. The VLM key/value width is 8 KV heads of
    /// `2560 / 32 = 80` channels.
    pub fn full() -> Self {
        Self {
            layers: 36,
            width: 768,
            heads: 8,
            mlp_width: 3072,
            time_dim: 256,
            kv_width: 640,
            rotary_base: 10_000.0,
            depth_gate: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<(), ExpertError> {
        let fail = |m: &str| Err(ExpertError::Config(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.mlp_width == 0 || self.kv_width == 0 {
            return fail("layers, heads, mlp_width and kv_width must be positive");
        }
        if self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return fail("width must be a positive multiple of heads");
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail("head dimension must be even for rotary embeddings");
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return fail("time_dim must be even and at least 2");
        }
        if !(self.rotary_base.is_finite() && self.rotary_base > 1.0) {
            return fail("rotary_base must be finite and greater than 1");
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ExpertError> {
        if data.len() != rows * cols {
            return Err(ExpertError::Contract(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// `y = W x + b` with `W` stored `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn apply_rows(&self, m: &Mat) -> Mat {
        let data = (0..m.rows).flat_map(|i| self.apply(m.row(i))).collect();
        Mat {
            rows: m.rows,
            cols: self.out_dim,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttnWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub q_norm: Vec<f64>,
    pub k_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnWeights {
    pub q: Linear,
    pub o: Linear,
    pub q_norm: Vec<f64>,
    pub k_norm: Vec<f64>,
}

/// `P_K`, `P_V`: VLM key/value width to expert width.
#[derive(Debug, Clone, PartialEq)]
pub struct KvAdapters {
    pub p_k: Linear,
    pub p_v: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthGateParams {
    pub w: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Produces shift, scale and gate for the sa, ca and ff branches.
    pub modulation: Linear,
    pub sa: SelfAttnWeights,
    pub ca: CrossAttnWeights,
    pub adapters: KvAdapters,
    pub depth_gate: DepthGateParams,
    pub mlp: MlpWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub config: ExpertConfig,
    pub input: Linear,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub layers: Vec<LayerWeights>,
    pub final_modulation: Linear,
    pub output: Linear,
}

macro_rules! tensor_table {
    ($fn_name:ident, $slice:ident, $iter:ident $(, $m:ident)?) => {
        /// Every parameter tensor with its name and shape, in file order.
        pub fn $fn_name(& $($m)? self) -> Vec<(String, Vec<usize>, & $($m)? [f64])> {
            let mut out = Vec::new();
            macro_rules! lin {
                ($name:expr, $l:expr) => {{
                    let (o, i) = ($l.out_dim, $l.in_dim);
                    out.push((format!("{}.weight", $name), vec![o, i], & $($m)? $l.weight[..]));
                    out.push((format!("{}.bias", $name), vec![o], & $($m)? $l.bias[..]));
                }};
            }
            macro_rules! vector {
                ($name:expr, $v:expr) => {{
                    let n = $v.len();
                    out.push(($name, vec![n], & $($m)? $v[..]));
                }};
            }
            lin!("input", self.input);
            lin!("time.fc1", self.time_fc1);
            lin!("time.fc2", self.time_fc2);
            for (l, layer) in self.layers.$iter().enumerate() {
                let p = format!("layers.{l}");
                lin!(format!("{p}.modulation"), layer.modulation);
                lin!(format!("{p}.sa.q"), layer.sa.q);
                lin!(format!("{p}.sa.k"), layer.sa.k);
                lin!(format!("{p}.sa.v"), layer.sa.v);
                lin!(format!("{p}.sa.o"), layer.sa.o);
                vector!(format!("{p}.sa.q_norm"), layer.sa.q_norm);
                vector!(format!("{p}.sa.k_norm"), layer.sa.k_norm);
                lin!(format!("{p}.ca.q"), layer.ca.q);
                lin!(format!("{p}.ca.o"), layer.ca.o);
                vector!(format!("{p}.ca.q_norm"), layer.ca.q_norm);
                vector!(format!("{p}.ca.k_norm"), layer.ca.k_norm);
                lin!(format!("{p}.adapters.p_k"), layer.adapters.p_k);
                lin!(format!("{p}.adapters.p_v"), layer.adapters.p_v);
                vector!(format!("{p}.depth_gate.w"), layer.depth_gate.w);
                out.push((
                    format!("{p}.depth_gate.bias"),
                    vec![1],
                    std::slice::$slice(& $($m)? layer.depth_gate.bias),
                ));
                lin!(format!("{p}.mlp.gate"), layer.mlp.gate);
                lin!(format!("{p}.mlp.up"), layer.mlp.up);
                lin!(format!("{p}.mlp.down"), layer.mlp.down);
            }
            lin!("final.modulation", self.final_modulation);
            lin!("output", self.output);
            out
        }
    };
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ExpertConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f32` elements into `weights.bin`.
    offset: usize,
}

impl ExpertWeights {
    tensor_table!(tensors, from_ref, iter);
    tensor_table!(tensors_mut, from_mut, iter_mut, mut);

    fn zeros(config: ExpertConfig) -> Result<Self, ExpertError> {
        config.validate()?;
        let (w, dh) = (config.width, config.head_dim());
        let layer = LayerWeights {
            modulation: Linear::zeros(w, 9 * w),
            sa: SelfAttnWeights {
                q: Linear::zeros(w, w),
                k: Linear::zeros(w, w),
                v: Linear::zeros(w, w),
                o: Linear::zeros(w, w),
                q_norm: vec![0.0; dh],
                k_norm: vec![0.0; dh],
            },
            ca: CrossAttnWeights {
                q: Linear::zeros(w, w),
                o: Linear::zeros(w, w),
                q_norm: vec![0.0; dh],
                k_norm: vec![0.0; dh],
            },
            adapters: KvAdapters {
                p_k: Linear::zeros(config.kv_width, w),
                p_v: Linear::zeros(config.kv_width, w),
            },
            depth_gate: DepthGateParams {
                w: vec![0.0; config.kv_width],
                bias: 0.0,
            },
            mlp: MlpWeights {
                gate: Linear::zeros(w, config.mlp_width),
                up: Linear::zeros(w, config.mlp_width),
                down: Linear::zeros(config.mlp_width, w),
            },
        };
        Ok(Self {
            config,
            input: Linear::zeros(WIDTH_MAX, w),
            time_fc1: Linear::zeros(config.time_dim, w),
            time_fc2: Linear::zeros(w, w),
            layers: vec![layer; config.layers],
            final_modulation: Linear::zeros(w, 2 * w),
            output: Linear::zeros(w, WIDTH_MAX),
        })
    }

    /// Post-training initialization: modulation layers and the output
    /// projection are zero, so every gate is zero and the field is exactly
    /// zero; depth gates start at bias -4.
    pub fn init(config: ExpertConfig, seed: u64) -> Result<Self, ExpertError> {
        let mut w = Self::zeros(config)?;
        let mut rng = DetRng::new(seed);
        for (name, shape, data) in w.tensors_mut() {
            if name.ends_with("_norm") {
                data.fill(1.0);
            } else if name.ends_with("depth_gate.bias") {
                data.fill(DEPTH_GATE_INIT_BIAS);
            } else if name.ends_with(".weight")
                && !name.contains("modulation")
                && !name.starts_with("output")
            {
                let std = 1.0 / (shape[1] as f64).sqrt();
                data.iter_mut().for_each(|x| *x = std * rng.normal());
            }
        }
        Ok(w)
    }

    /// Every tensor drawn at random, including gates and the output head.
    pub fn random(config: ExpertConfig, seed: u64) -> Result<Self, ExpertError> {
        let mut w = Self::zeros(config)?;
        let mut rng = DetRng::new(seed);
        for (name, shape, data) in w.tensors_mut() {
            if name.ends_with("_norm") {
                data.iter_mut().for_each(|x| *x = 1.0 + 0.1 * rng.normal());
            } else if name.ends_with(".weight") || name.ends_with("depth_gate.w") {
                let fan_in = *shape.last().expect("non-empty shape");
                let std = 0.5 / (fan_in as f64).sqrt();
                data.iter_mut().for_each(|x| *x = std * rng.normal());
            } else {
                data.iter_mut().for_each(|x| *x = 0.1 * rng.normal());
            }
        }
        Ok(w)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, d)| d)
    }

    pub fn save(&self, dir: &Path) -> Result<(), ExpertError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| ExpertError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut entries = Vec::new();
        let mut bin = Vec::new();
        let mut offset = 0;
        for (name, shape, data) in self.tensors() {
            entries.push(TensorEntry {
                name,
                shape,
                offset,
            });
            offset += data.len();
            for &x in data {
                bin.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: WEIGHTS_FORMAT_VERSION,
            config: self.config,
            tensors: entries,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let mpath = dir.join("manifest.json");
        std::fs::write(&mpath, text).map_err(io(&mpath))?;
        let bpath = dir.join("weights.bin");
        std::fs::write(&bpath, bin).map_err(io(&bpath))
    }

    pub fn load(dir: &Path) -> Result<Self, ExpertError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read(&path).map_err(|source| ExpertError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?)
            .map_err(|e| ExpertError::Format(format!("manifest: {e}")))?;
        if manifest.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(ExpertError::Format(format!(
                "unsupported format_version {}",
                manifest.format_version
            )));
        }
        let bin = read("weights.bin")?;
        if bin.len() % 4 != 0 {
            return Err(ExpertError::Format("weights.bin length is not a multiple of 4".into()));
        }
        let floats: Vec<f32> = bin
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut w = Self::zeros(manifest.config)?;
        let slots = w.tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(ExpertError::Format(format!(
                "manifest lists {} tensors, config implies {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        for ((name, shape, data), entry) in slots.into_iter().zip(&manifest.tensors) {
            if entry.name != name || entry.shape != shape {
                return Err(ExpertError::Format(format!(
                    "expected tensor {name} {shape:?}, found {} {:?}",
                    entry.name, entry.shape
                )));
            }
            let src = floats
                .get(entry.offset..entry.offset + data.len())
                .ok_or_else(|| ExpertError::Format(format!("tensor {name} runs past weights.bin")))?;
            for (d, &s) in data.iter_mut().zip(src) {
                *d = s as f64;
            }
        }
        Ok(w)
    }
}

/// Per-layer VLM keys and values with token flags: `valid` (A_t), `depth`
/// (M_t) and `target` for action-target positions, which must be invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextKV {
    keys: Vec<Mat>,
    values: Vec<Mat>,
    valid: Vec<bool>,
    depth: Vec<bool>,
    target: Vec<bool>,
}

impl ContextKV {
    pub fn new(
        keys: Vec<Mat>,
        values: Vec<Mat>,
        valid: Vec<bool>,
        depth: Vec<bool>,
        target: Vec<bool>,
    ) -> Result<Self, ExpertError> {
        if keys.is_empty() || keys.len() != values.len() {
            return Err(ExpertError::Contract(
                "keys and values need the same positive number of layers".into(),
            ));
        }
        let (n, width) = (keys[0].rows, keys[0].cols);
        if keys.iter().chain(&values).any(|m| m.rows != n || m.cols != width) {
            return Err(ExpertError::Contract(
                "every key and value tensor must share one token count and width".into(),
            ));
        }
        if valid.len() != n || depth.len() != n || target.len() != n {
            return Err(ExpertError::Contract(format!(
                "flag lengths {}/{}/{} differ from token count {n}",
                valid.len(),
                depth.len(),
                target.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| valid[i] && target[i]) {
            return Err(ExpertError::Contract(format!(
                "action-target position {i} is marked visible to the expert"
            )));
        }
        Ok(Self {
            keys,
            values,
            valid,
            depth,
            target,
        })
    }

    /// Random keys and values; tokens in `depth_span` are depth positions,
    /// the last `targets` tokens are hidden action targets.
    pub fn synthetic(
        layers: usize,
        tokens: usize,
        kv_width: usize,
        depth_span: std::ops::Range<usize>,
        targets: usize,
        seed: u64,
    ) -> Result<Self, ExpertError> {
        let mut rng = DetRng::new(seed);
        let mut mat = || {
            let data = (0..tokens * kv_width).map(|_| rng.normal()).collect();
            Mat::new(tokens, kv_width, data)
        };
        let keys = (0..layers).map(|_| mat()).collect::<Result<Vec<_>, _>>()?;
        let values = (0..layers).map(|_| mat()).collect::<Result<Vec<_>, _>>()?;
        let target: Vec<bool> = (0..tokens).map(|i| i + targets >= tokens).collect();
        let valid = target.iter().map(|t| !t).collect();
        let depth = (0..tokens).map(|i| depth_span.contains(&i)).collect();
        Self::new(keys, values, valid, depth, target)
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn tokens(&self) -> usize {
        self.valid.len()
    }

    pub fn kv_width(&self) -> usize {
        self.keys[0].cols
    }

    pub fn keys(&self, layer: usize) -> &Mat {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Mat {
        &self.values[layer]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn depth(&self) -> &[bool] {
        &self.depth
    }

    pub fn target(&self) -> &[bool] {
        &self.target
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `[sin(1000 t f_k)..., cos(1000 t f_k)...]` with geometric frequencies
/// from 1 down to 1/10000.
pub fn sinusoidal_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; 2 * half];
    for k in 0..half {
        let freq = (-MAX_PERIOD.ln() * k as f64 / half as f64).exp();
        let angle = TIME_SCALE * t * freq;
        out[k] = angle.sin();
        out[half + k] = angle.cos();
    }
    out
}

pub fn time_embed(t: f64, w: &ExpertWeights) -> Vec<f64> {
    let feats = sinusoidal_features(t, w.config.time_dim);
    let hidden: Vec<f64> = w.time_fc1.apply(&feats).into_iter().map(silu).collect();
    w.time_fc2.apply(&hidden)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub gate: Vec<f64>,
}

/// Shift, scale and gate for the self-attention, cross-attention and MLP
/// branches of one block.
pub fn block_modulation(temb: &[f64], layer: &LayerWeights) -> [Modulation; 3] {
    let act: Vec<f64> = temb.iter().map(|&x| silu(x)).collect();
    let m = layer.modulation.apply(&act);
    let w = m.len() / 9;
    let part = |i: usize| m[i * w..(i + 1) * w].to_vec();
    [0, 1, 2].map(|b| Modulation {
        shift: part(3 * b),
        scale: part(3 * b + 1),
        gate: part(3 * b + 2),
    })
}

pub fn rms_norm(x: &[f64], gain: Option<&[f64]>) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    match gain {
        Some(g) => x.iter().zip(g).map(|(v, g)| v * inv * g).collect(),
        None => x.iter().map(|v| v * inv).collect(),
    }
}

/// `RMSNorm(x) * (1 + scale) + shift`, row by row.
pub fn ada_rms(x: &Mat, shift: &[f64], scale: &[f64]) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let n = rms_norm(x.row(i), None);
        for (c, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = n[c] * (1.0 + scale[c]) + shift[c];
        }
    }
    out
}

/// Rotates channel pairs `(i, i + d/2)` by `pos * base^(-2i/d)`.
pub fn apply_rotary(v: &mut [f64], pos: usize, base: f64) {
    let half = v.len() / 2;
    for i in 0..half {
        let theta = pos as f64 * base.powf(-2.0 * i as f64 / v.len() as f64);
        let (s, c) = theta.sin_cos();
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * c - b * s;
        v[i + half] = a * s + b * c;
    }
}

fn head_norm(m: &mut Mat, heads: usize, gain: &[f64]) {
    let dh = m.cols / heads;
    for i in 0..m.rows {
        for h in 0..heads {
            let seg = &mut m.row_mut(i)[h * dh..(h + 1) * dh];
            let n = rms_norm(seg, Some(gain));
            seg.copy_from_slice(&n);
        }
    }
}

/// Masked softmax; excluded entries get probability 0. Returns all zeros
/// when nothing is allowed.
pub fn softmax(logits: &[f64], allowed: Option<&[bool]>) -> Vec<f64> {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let max = (0..logits.len())
        .filter(|&j| ok(j))
        .map(|j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let exps: Vec<f64> = (0..logits.len())
        .map(|j| if ok(j) { (logits[j] - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Branch output after the output projection.
    pub out: Mat,
    /// Attention probabilities per head, queries x keys.
    pub probs: Vec<Mat>,
}

fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, allowed: Option<&[bool]>) -> (Mat, Vec<Mat>) {
    let dh = q.cols / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Mat::zeros(q.rows, q.cols);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        let mut p = Mat::zeros(q.rows, k.rows);
        for i in 0..q.rows {
            let qi = &q.row(i)[hs.clone()];
            let logits: Vec<f64> = (0..k.rows)
                .map(|j| {
                    let kj = &k.row(j)[hs.clone()];
                    scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let row = softmax(&logits, allowed);
            let out = &mut ctx.row_mut(i)[hs.clone()];
            for (j, &pj) in row.iter().enumerate() {
                if pj != 0.0 {
                    for (o, vv) in out.iter_mut().zip(&v.row(j)[hs.clone()]) {
                        *o += pj * vv;
                    }
                }
            }
            p.row_mut(i).copy_from_slice(&row);
        }
        probs.push(p);
    }
    (ctx, probs)
}

/// Bidirectional self-attention over the action steps; queries and keys are
/// RMS-normalized per head, then rotated by step index.
pub fn self_attention(h: &Mat, w: &SelfAttnWeights, config: &ExpertConfig) -> AttentionOutput {
    let heads = config.heads;
    let dh = config.head_dim();
    let mut q = w.q.apply_rows(h);
    let mut k = w.k.apply_rows(h);
    let v = w.v.apply_rows(h);
    head_norm(&mut q, heads, &w.q_norm);
    head_norm(&mut k, heads, &w.k_norm);
    for m in [&mut q, &mut k] {
        for pos in 0..m.rows {
            for hd in 0..heads {
                apply_rotary(&mut m.row_mut(pos)[hd * dh..(hd + 1) * dh], pos, config.rotary_base);
            }
        }
    }
    let (ctx, probs) = attend(&q, &k, &v, heads, None);
    AttentionOutput {
        out: w.o.apply_rows(&ctx),
        probs,
    }
}

/// `(P_K K, P_V V)`; columns are grouped by expert head.
pub fn project_kv(keys: &Mat, values: &Mat, adapters: &KvAdapters) -> Result<(Mat, Mat), ExpertError> {
    if keys.cols != adapters.p_k.in_dim || values.cols != adapters.p_v.in_dim {
        return Err(ExpertError::Contract(format!(
            "context width {} does not match adapter input {}",
            keys.cols, adapters.p_k.in_dim
        )));
    }
    Ok((adapters.p_k.apply_rows(keys), adapters.p_v.apply_rows(values)))
}

pub fn project_context(
    ctx: &ContextKV,
    adapters: &KvAdapters,
    layer: usize,
) -> Result<(Mat, Mat), ExpertError> {
    if layer >= ctx.layers() {
        return Err(ExpertError::Contract(format!(
            "layer {layer} out of range for a {}-layer context",
            ctx.layers()
        )));
    }
    project_kv(ctx.keys(layer), ctx.values(layer), adapters)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedContext {
    pub keys: Mat,
    pub values: Mat,
    pub gate: f64,
}

/// Scales depth-position keys and values by a gate read from the mean of
/// the valid non-depth values.
pub fn depth_gate(
    ctx: &ContextKV,
    params: &DepthGateParams,
    layer: usize,
) -> Result<GatedContext, ExpertError> {
    if layer >= ctx.layers() {
        return Err(ExpertError::Contract(format!("layer {layer} out of range")));
    }
    if params.w.len() != ctx.kv_width() {
        return Err(ExpertError::Contract(format!(
            "gate weight width {} differs from context width {}",
            params.w.len(),
            ctx.kv_width()
        )));
    }
    let values = ctx.values(layer);
    let pool: Vec<usize> = (0..ctx.tokens())
        .filter(|&t| ctx.valid[t] && !ctx.depth[t])
        .collect();
    if pool.is_empty() {
        return Err(ExpertError::Gate(
            "no valid non-depth context positions to pool".into(),
        ));
    }
    let mut mean = vec![0.0; values.cols];
    for &t in &pool {
        for (m, v) in mean.iter_mut().zip(values.row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= pool.len() as f64);
    let logit = params.bias + params.w.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
    let gate = sigmoid(logit);
    let mut keys = ctx.keys(layer).clone();
    let mut vals = values.clone();
    for t in (0..ctx.tokens()).filter(|&t| ctx.depth[t]) {
        keys.row_mut(t).iter_mut().for_each(|x| *x *= gate);
        vals.row_mut(t).iter_mut().for_each(|x| *x *= gate);
    }
    Ok(GatedContext {
        keys,
        values: vals,
        gate,
    })
}

/// Action queries attend to projected context; invalid positions are
/// excluded from the softmax.
pub fn cross_attention(
    h: &Mat,
    k_tilde: &Mat,
    v_tilde: &Mat,
    valid: &[bool],
    w: &CrossAttnWeights,
    config: &ExpertConfig,
) -> Result<AttentionOutput, ExpertError> {
    if k_tilde.rows != v_tilde.rows || k_tilde.rows != valid.len() {
        return Err(ExpertError::Contract(format!(
            "context token counts differ: keys {}, values {}, flags {}",
            k_tilde.rows,
            v_tilde.rows,
            valid.len()
        )));
    }
    if k_tilde.cols != config.width || v_tilde.cols != config.width {
        return Err(ExpertError::Contract("projected context must have expert width".into()));
    }
    let mut q = w.q.apply_rows(h);
    let mut k = k_tilde.clone();
    head_norm(&mut q, config.heads, &w.q_norm);
    head_norm(&mut k, config.heads, &w.k_norm);
    let (ctx, probs) = attend(&q, &k, v_tilde, config.heads, Some(valid));
    Ok(AttentionOutput {
        out: w.o.apply_rows(&ctx),
        probs,
    })
}

/// SwiGLU: `down(silu(gate x) * up x)`.
pub fn mlp(x: &Mat, w: &MlpWeights) -> Mat {
    let g = w.gate.apply_rows(x);
    let u = w.up.apply_rows(x);
    let data = g.data.iter().zip(&u.data).map(|(a, b)| silu(*a) * b).collect();
    w.down.apply_rows(&Mat {
        rows: g.rows,
        cols: g.cols,
        data,
    })
}

fn add_gated(h: &mut Mat, gate: &[f64], branch: &Mat) {
    for i in 0..h.rows {
        for ((x, g), b) in h.row_mut(i).iter_mut().zip(gate).zip(branch.row(i)) {
            *x += g * b;
        }
    }
}

fn check_inputs(x: &[f64], ctx: &ContextKV, w: &ExpertWeights) -> Result<(), ExpertError> {
    if x.len() != GRID_LEN {
        return Err(ExpertError::Contract(format!(
            "input has {} entries, expected {HORIZON_MAX}x{WIDTH_MAX}",
            x.len()
        )));
    }
    if ctx.layers() != w.config.layers {
        return Err(ExpertError::Contract(format!(
            "context has {} layers, expert has {}",
            ctx.layers(),
            w.config.layers
        )));
    }
    Ok(())
}

/// Hidden states after the last block, before the final norm and head.
pub fn expert_trunk(x: &[f64], t: f64, ctx: &ContextKV, w: &ExpertWeights) -> Result<Mat, ExpertError> {
    check_inputs(x, ctx, w)?;
    let cfg = &w.config;
    let rows = Mat::new(HORIZON_MAX, WIDTH_MAX, x.to_vec())?;
    let mut h = w.input.apply_rows(&rows);
    let temb = time_embed(t, w);
    for (l, layer) in w.layers.iter().enumerate() {
        let [sa, ca, ff] = block_modulation(&temb, layer);

        let a = ada_rms(&h, &sa.shift, &sa.scale);
        add_gated(&mut h, &sa.gate, &self_attention(&a, &layer.sa, cfg).out);

        let (k_tilde, v_tilde) = if cfg.depth_gate {
            let g = depth_gate(ctx, &layer.depth_gate, l)?;
            project_kv(&g.keys, &g.values, &layer.adapters)?
        } else {
            project_context(ctx, &layer.adapters, l)?
        };
        let a = ada_rms(&h, &ca.shift, &ca.scale);
        let out = cross_attention(&a, &k_tilde, &v_tilde, ctx.valid(), &layer.ca, cfg)?;
        add_gated(&mut h, &ca.gate, &out.out);

        let a = ada_rms(&h, &ff.shift, &ff.scale);
        add_gated(&mut h, &ff.gate, &mlp(&a, &layer.mlp));
    }
    Ok(h)
}

/// Velocity over the padded 30x32 grid.
pub fn expert_forward(
    x: &[f64],
    t: f64,
    ctx: &ContextKV,
    w: &ExpertWeights,
) -> Result<Vec<f64>, ExpertError> {
    let h = expert_trunk(x, t, ctx, w)?;
    let act: Vec<f64> = time_embed(t, w).into_iter().map(silu).collect();
    let m = w.final_modulation.apply(&act);
    let (shift, scale) = m.split_at(w.config.width);
    Ok(w.output.apply_rows(&ada_rms(&h, shift, scale)).data)
}

impl VelocityField<ContextKV> for ExpertWeights {
    fn velocity(&self, x: &[f64], t: f64, ctx: &ContextKV) -> Result<Vec<f64>, FlowError> {
        expert_forward(x, t, ctx, self).map_err(|e| FlowError::Contract(e.to_string()))
    }
}
