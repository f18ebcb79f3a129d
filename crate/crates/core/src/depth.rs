//! Adaptive depth tokens.
//!
//! Each frame is split into a 10x10 grid of 32x32 patches. A cell is
//! regenerated only when its patch changed (cosine similarity below a
//! threshold); unchanged cells replay the carried-forward buffer. The
//! scheduler turns the update mask into alternating generate/replay spans,
//! and [`simulate_savings`] prices a frame stream under an affine latency
//! model.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::rng::DetRng;

pub const RASTER_SIDE: usize = 320;
pub const PATCH_SIDE: usize = 32;
pub const GRID_SIDE: usize = RASTER_SIDE / PATCH_SIDE;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;
pub const MAX_DEPTH_CODE: u8 = 127;
pub const DEPTH_CODES: u64 = MAX_DEPTH_CODE as u64 + 1;
pub const DEFAULT_THRESHOLD: f64 = 0.996;
pub const DEFAULT_NOISE_RATE: f64 = 0.10;
const RASTER_BYTES: usize = RASTER_SIDE * RASTER_SIDE * 3;

#[derive(Debug, Error, PartialEq)]
pub enum DepthError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
}

/// A 320x320 interleaved RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    bytes: Vec<u8>,
}

impl Raster {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, DepthError> {
        if bytes.len() != RASTER_BYTES {
            return Err(DepthError::Shape(format!(
                "raster has {} bytes, expected {RASTER_BYTES} (320x320 RGB)",
                bytes.len()
            )));
        }
        Ok(Self { bytes })
    }

    pub fn filled(rgb: [u8; 3]) -> Self {
        Self {
            bytes: rgb.iter().copied().cycle().take(RASTER_BYTES).collect(),
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * RASTER_SIDE + x) * 3;
        [self.bytes[i], self.bytes[i + 1], self.bytes[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * RASTER_SIDE + x) * 3;
        self.bytes[i..i + 3].copy_from_slice(&rgb);
    }

    /// Paints one grid cell; `f` receives coordinates local to the patch.
    pub fn paint_cell(&mut self, cell: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) {
        let (x0, y0) = cell_origin(cell);
        for dy in 0..PATCH_SIDE {
            for dx in 0..PATCH_SIDE {
                self.set_pixel(x0 + dx, y0 + dy, f(dx, dy));
            }
        }
    }

    /// Channel values of one patch, row by row, RGB interleaved.
    pub fn patch(&self, cell: usize) -> impl Iterator<Item = u8> + '_ {
        let (x0, y0) = cell_origin(cell);
        (0..PATCH_SIDE).flat_map(move |dy| {
            let start = ((y0 + dy) * RASTER_SIDE + x0) * 3;
            self.bytes[start..start + PATCH_SIDE * 3].iter().copied()
        })
    }
}

fn cell_origin(cell: usize) -> (usize, usize) {
    assert!(cell < GRID_CELLS, "cell {cell} out of range");
    ((cell % GRID_SIDE) * PATCH_SIDE, (cell / GRID_SIDE) * PATCH_SIDE)
}

/// 100 depth codes in raster order, each at most 127.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DepthGrid(#[serde(with = "codes_serde")] [u8; GRID_CELLS]);

mod codes_serde {
    use serde::Serializer;

    pub fn serialize<S: Serializer>(codes: &[u8; super::GRID_CELLS], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(codes.iter())
    }
}

pub type DepthBuffer = DepthGrid;

impl DepthGrid {
    pub fn new(codes: &[u8]) -> Result<Self, DepthError> {
        if codes.len() != GRID_CELLS {
            return Err(DepthError::Shape(format!(
                "expected {GRID_CELLS} depth codes, got {}",
                codes.len()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c > MAX_DEPTH_CODE) {
            return Err(DepthError::Contract(format!(
                "depth code {bad} exceeds {MAX_DEPTH_CODE}"
            )));
        }
        let mut arr = [0u8; GRID_CELLS];
        arr.copy_from_slice(codes);
        Ok(Self(arr))
    }

    pub fn filled(code: u8) -> Result<Self, DepthError> {
        Self::new(&[code; GRID_CELLS])
    }

    pub fn codes(&self) -> &[u8; GRID_CELLS] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateMask([bool; GRID_CELLS]);

impl UpdateMask {
    pub fn ones() -> Self {
        Self([true; GRID_CELLS])
    }

    pub fn zeros() -> Self {
        Self([false; GRID_CELLS])
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self, DepthError> {
        let arr: [bool; GRID_CELLS] = bits.try_into().map_err(|_| {
            DepthError::Shape(format!("mask has {} bits, expected {GRID_CELLS}", bits.len()))
        })?;
        Ok(Self(arr))
    }

    pub fn bits(&self) -> &[bool; GRID_CELLS] {
        &self.0
    }

    pub fn get(&self, cell: usize) -> bool {
        self.0[cell]
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Cosine similarity of one cell between two frames. Zero-norm patches
/// compare as 1 when both are zero and 0 when only one is.
pub fn patch_cosine(cur: &Raster, prev: &Raster, cell: usize) -> f64 {
    let (mut dot, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (a, b) in cur.patch(cell).zip(prev.patch(cell)) {
        let (a, b) = (a as u64, b as u64);
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => dot as f64 / ((na as f64).sqrt() * (nb as f64).sqrt()),
    }
}

pub fn patch_cosine_mask(cur: &Raster, prev: &Raster, threshold: f64) -> UpdateMask {
    let mut bits = [false; GRID_CELLS];
    for (cell, bit) in bits.iter_mut().enumerate() {
        *bit = patch_cosine(cur, prev, cell) < threshold;
    }
    UpdateMask(bits)
}

pub fn first_frame_init(d1: &DepthGrid) -> (DepthBuffer, UpdateMask) {
    (*d1, UpdateMask::ones())
}

pub fn buffer_update(prev: &DepthBuffer, d: &DepthGrid, mask: &UpdateMask) -> DepthBuffer {
    let mut out = prev.0;
    for (i, slot) in out.iter_mut().enumerate() {
        if mask.0[i] {
            *slot = d.0[i];
        }
    }
    DepthGrid(out)
}

/// Replaces each position with probability `rate` by a uniform code.
pub fn inject_depth_noise(codes: &[u8], rate: f64, seed: u64) -> Result<Vec<u8>, DepthError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DepthError::Config(format!("noise rate {rate} outside [0, 1]")));
    }
    let mut rng = DetRng::new(seed);
    Ok(codes
        .iter()
        .map(|&c| {
            if rng.bernoulli(rate) {
                rng.below(DEPTH_CODES) as u8
            } else {
                c
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Replay,
    Generate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheState {
    Cold,
    Warm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplaySchedule {
    pub spans: Vec<Span>,
}

impl ReplaySchedule {
    pub fn expand(&self) -> UpdateMask {
        let mut bits = [false; GRID_CELLS];
        for s in &self.spans {
            bits[s.start..s.start + s.len].fill(s.kind == SpanKind::Generate);
        }
        UpdateMask(bits)
    }

    pub fn generated_cells(&self) -> usize {
        self.count(SpanKind::Generate, |s| s.len)
    }

    pub fn replay_spans(&self) -> usize {
        self.count(SpanKind::Replay, |_| 1)
    }

    fn count(&self, kind: SpanKind, f: impl Fn(&Span) -> usize) -> usize {
        self.spans.iter().filter(|s| s.kind == kind).map(f).sum()
    }
}

pub fn plan_schedule(mask: &UpdateMask, cache: CacheState) -> ReplaySchedule {
    if cache == CacheState::Cold {
        return ReplaySchedule {
            spans: vec![Span {
                kind: SpanKind::Generate,
                start: 0,
                len: GRID_CELLS,
            }],
        };
    }
    let mut spans: Vec<Span> = Vec::new();
    for (cell, &bit) in mask.0.iter().enumerate() {
        let kind = if bit { SpanKind::Generate } else { SpanKind::Replay };
        match spans.last_mut() {
            Some(last) if last.kind == kind => last.len += 1,
            _ => spans.push(Span {
                kind,
                start: cell,
                len: 1,
            }),
        }
    }
    ReplaySchedule { spans }
}

/// Fills updated cells from `generator` in ascending cell order and copies
/// the rest from `prev`.
pub fn adaptive_fill<G>(
    mask: &UpdateMask,
    prev: &DepthBuffer,
    mut generator: G,
) -> Result<DepthBuffer, DepthError>
where
    G: FnMut(usize) -> u32,
{
    let mut out = prev.0;
    for (cell, slot) in out.iter_mut().enumerate() {
        if mask.0[cell] {
            let code = generator(cell);
            *slot = u8::try_from(code)
                .ok()
                .filter(|&c| c <= MAX_DEPTH_CODE)
                .ok_or_else(|| {
                    DepthError::Contract(format!(
                        "generator returned code {code} for cell {cell}, outside [0, {MAX_DEPTH_CODE}]"
                    ))
                })?;
        }
    }
    Ok(DepthGrid(out))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthCache {
    pub prev_image: Raster,
    pub prev_buffer: DepthBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub mask: UpdateMask,
    pub schedule: ReplaySchedule,
    pub buffer: DepthBuffer,
}

/// Step-serial inference state: cold until the first completed step.
#[derive(Debug, Clone)]
pub struct DepthSession {
    threshold: f64,
    cache: Option<DepthCache>,
}

impl DepthSession {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            cache: None,
        }
    }

    pub fn cache(&self) -> Option<&DepthCache> {
        self.cache.as_ref()
    }

    pub fn reset(&mut self) {
        self.cache = None;
    }

    pub fn step<G>(&mut self, image: &Raster, generator: G) -> Result<StepOutcome, DepthError>
    where
        G: FnMut(usize) -> u32,
    {
        let (mask, state, prev) = match &self.cache {
            None => (UpdateMask::ones(), CacheState::Cold, DepthGrid([0; GRID_CELLS])),
            Some(c) => (
                patch_cosine_mask(image, &c.prev_image, self.threshold),
                CacheState::Warm,
                c.prev_buffer,
            ),
        };
        let schedule = plan_schedule(&mask, state);
        let buffer = adaptive_fill(&mask, &prev, generator)?;
        self.cache = Some(DepthCache {
            prev_image: image.clone(),
            prev_buffer: buffer,
        });
        Ok(StepOutcome {
            mask,
            schedule,
            buffer,
        })
    }
}

/// Affine cost of the depth stage plus a fixed per-step base latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyModel {
    pub threshold: f64,
    pub generate_cost: f64,
    pub replay_span_cost: f64,
    pub base_cost: f64,
    pub horizon: usize,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            generate_cost: 1.0,
            replay_span_cost: 0.0,
            base_cost: 0.0,
            horizon: 30,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), DepthError> {
        let costs = [self.generate_cost, self.replay_span_cost, self.base_cost];
        if !self.threshold.is_finite() || costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(DepthError::Config(
                "threshold must be finite and costs finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    pub generated: usize,
    pub spans: usize,
    pub replay_spans: usize,
    pub modeled_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SavingsTotals {
    pub frames: usize,
    pub generated: usize,
    pub always_full: usize,
    pub saved: usize,
    pub modeled_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SavingsReport {
    pub per_frame: Vec<FrameReport>,
    pub totals: SavingsTotals,
    pub savings_fraction: f64,
    /// Actions per unit of mean modeled latency; absent when latency is zero.
    pub amortized_rate: Option<f64>,
}

/// Prices a frame stream: the first frame is cold, the rest are warm.
pub fn simulate_savings(frames: &[Raster], model: &LatencyModel) -> Result<SavingsReport, DepthError> {
    model.validate()?;
    if frames.is_empty() {
        return Err(DepthError::Config("at least one frame is required".into()));
    }
    let warm: Vec<UpdateMask> = frames
        .par_windows(2)
        .map(|w| patch_cosine_mask(&w[1], &w[0], model.threshold))
        .collect();
    let schedules = std::iter::once(plan_schedule(&UpdateMask::ones(), CacheState::Cold))
        .chain(warm.iter().map(|m| plan_schedule(m, CacheState::Warm)));
    let per_frame: Vec<FrameReport> = schedules
        .map(|s| {
            let generated = s.generated_cells();
            let replay_spans = s.replay_spans();
            FrameReport {
                generated,
                spans: s.spans.len(),
                replay_spans,
                modeled_cost: model.base_cost
                    + model.generate_cost * generated as f64
                    + model.replay_span_cost * replay_spans as f64,
            }
        })
        .collect();
    let generated: usize = per_frame.iter().map(|f| f.generated).sum();
    let always_full = GRID_CELLS * frames.len();
    let modeled_cost: f64 = per_frame.iter().map(|f| f.modeled_cost).sum();
    let mean_latency = modeled_cost / frames.len() as f64;
    let amortized_rate = (mean_latency > 0.0).then(|| model.horizon as f64 / mean_latency);
    Ok(SavingsReport {
        savings_fraction: (always_full - generated) as f64 / always_full as f64,
        totals: SavingsTotals {
            frames: frames.len(),
            generated,
            always_full,
            saved: always_full - generated,
            modeled_cost,
        },
        per_frame,
        amortized_rate,
    })
}
