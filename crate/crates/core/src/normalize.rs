//! Action normalization, chunking and padding.
//!
//! Continuous dimensions are mapped to `[-1, 1]` with 1st/99th percentile
//! statistics (type-7 quantiles) and clipped. Gripper dimensions use their
//! observed min/max instead. Chunks are then right-padded into the shared
//! 30-step by 32-dimension layout with prefix masks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Episode;

pub const HORIZON_MAX: usize = 30;
pub const WIDTH_MAX: usize = 32;
pub const GRID_LEN: usize = HORIZON_MAX * WIDTH_MAX;

#[derive(Debug, Error, PartialEq)]
pub enum NormError {
    #[error("stats error: {0}")]
    Stats(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("capacity error: {0}")]
    Capacity(String),
}

/// Per-dimension normalization statistics for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub dims: usize,
    pub q01: Vec<f64>,
    pub q99: Vec<f64>,
    /// Sorted, ascending.
    pub gripper_dims: Vec<usize>,
    /// Parallel to `gripper_dims`.
    pub gripper_lo: Vec<f64>,
    pub gripper_hi: Vec<f64>,
}

impl NormStats {
    pub fn validate(&self) -> Result<(), NormError> {
        if self.q01.len() != self.dims || self.q99.len() != self.dims {
            return Err(NormError::Stats("q01/q99 length differs from dims".into()));
        }
        if self.gripper_lo.len() != self.gripper_dims.len()
            || self.gripper_hi.len() != self.gripper_dims.len()
        {
            return Err(NormError::Stats("gripper bounds length mismatch".into()));
        }
        if !self.gripper_dims.windows(2).all(|w| w[0] < w[1]) {
            return Err(NormError::Stats("gripper dims must be strictly ascending".into()));
        }
        if self.gripper_dims.iter().any(|&g| g >= self.dims) {
            return Err(NormError::Stats("gripper dim out of range".into()));
        }
        for d in 0..self.dims {
            let (lo, hi) = (self.q01[d], self.q99[d]);
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(NormError::Stats(format!("q01 > q99 in dim {d}")));
            }
        }
        Ok(())
    }

    fn bounds(&self, dim: usize) -> (f64, f64, bool) {
        match self.gripper_dims.binary_search(&dim) {
            Ok(k) => (self.gripper_lo[k], self.gripper_hi[k], true),
            Err(_) => (self.q01[dim], self.q99[dim], false),
        }
    }

    /// Normalizes a single value of dimension `dim`.
    pub fn normalize_value(&self, dim: usize, x: f64) -> f64 {
        let (lo, hi, _) = self.bounds(dim);
        if hi == lo {
            return 0.0;
        }
        (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize_value(&self, dim: usize, y: f64) -> f64 {
        let (lo, hi, _) = self.bounds(dim);
        if hi == lo {
            return lo;
        }
        (y + 1.0) * 0.5 * (hi - lo) + lo
    }

    pub fn is_gripper(&self, dim: usize) -> bool {
        self.gripper_dims.binary_search(&dim).is_ok()
    }

    pub fn normalize_vector(&self, xs: &[f64]) -> Result<Vec<f64>, NormError> {
        self.check_dims(xs.len())?;
        Ok(xs
            .iter()
            .enumerate()
            .map(|(d, &x)| self.normalize_value(d, x))
            .collect())
    }

    pub fn denormalize_vector(&self, ys: &[f64]) -> Result<Vec<f64>, NormError> {
        self.check_dims(ys.len())?;
        Ok(ys
            .iter()
            .enumerate()
            .map(|(d, &y)| self.denormalize_value(d, y))
            .collect())
    }

    fn check_dims(&self, d: usize) -> Result<(), NormError> {
        if d != self.dims {
            return Err(NormError::Shape(format!(
                "vector has {d} dims, stats have {}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Type-7 quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n || frac == 0.0 {
        return sorted[lo.min(n - 1)];
    }
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// One second of actions, row-major `horizon x dims`. The horizon equals the
/// control rate of the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    dims: usize,
    values: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dims: usize, values: Vec<f64>) -> Result<Self, NormError> {
        if horizon == 0 || dims == 0 {
            return Err(NormError::Shape("chunk must be non-empty".into()));
        }
        if values.len() != horizon * dims {
            return Err(NormError::Shape(format!(
                "{} values for a {horizon}x{dims} chunk",
                values.len()
            )));
        }
        Ok(Self {
            horizon,
            dims,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NormError> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(NormError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), dims, rows.concat())
    }

    pub fn zeros(horizon: usize, dims: usize) -> Self {
        Self::new(horizon, dims, vec![0.0; horizon * dims]).expect("non-empty shape")
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Control rate in Hz; a chunk spans one second.
    pub fn fps(&self) -> usize {
        self.horizon
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, step: usize, dim: usize) -> f64 {
        self.values[step * self.dims + dim]
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.values[step * self.dims..(step + 1) * self.dims]
    }

    pub fn column(&self, dim: usize) -> Vec<f64> {
        (0..self.horizon).map(|s| self.get(s, dim)).collect()
    }

    pub fn max_abs_diff(&self, other: &ActionChunk) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Percentile statistics over a corpus of chunks sharing one width.
pub fn compute_stats<'a, I>(corpus: I, gripper_dims: &[usize]) -> Result<NormStats, NormError>
where
    I: IntoIterator<Item = &'a ActionChunk>,
{
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut dims = None;
    for chunk in corpus {
        match dims {
            None => {
                dims = Some(chunk.dims());
                columns = vec![Vec::new(); chunk.dims()];
            }
            Some(d) if d != chunk.dims() => {
                return Err(NormError::Shape(format!(
                    "chunk has {} dims, corpus has {d}",
                    chunk.dims()
                )))
            }
            _ => {}
        }
        for step in 0..chunk.horizon() {
            for (d, col) in columns.iter_mut().enumerate() {
                col.push(chunk.get(step, d));
            }
        }
    }
    let dims = dims.ok_or_else(|| NormError::Stats("empty corpus".into()))?;
    stats_from_columns(dims, columns, gripper_dims)
}

/// Statistics from raw per-dimension samples (each column non-empty).
pub fn stats_from_columns(
    dims: usize,
    mut columns: Vec<Vec<f64>>,
    gripper_dims: &[usize],
) -> Result<NormStats, NormError> {
    let mut grippers = gripper_dims.to_vec();
    grippers.sort_unstable();
    grippers.dedup();
    if let Some(&g) = grippers.iter().find(|&&g| g >= dims) {
        return Err(NormError::Stats(format!(
            "gripper dim {g} outside [0, {dims})"
        )));
    }
    if columns.len() != dims || columns.iter().any(Vec::is_empty) {
        return Err(NormError::Stats("empty corpus".into()));
    }
    let mut stats = NormStats {
        dims,
        q01: vec![0.0; dims],
        q99: vec![0.0; dims],
        gripper_lo: Vec::with_capacity(grippers.len()),
        gripper_hi: Vec::with_capacity(grippers.len()),
        gripper_dims: grippers.clone(),
    };
    for (d, col) in columns.iter_mut().enumerate() {
        if col.iter().any(|v| !v.is_finite()) {
            return Err(NormError::Stats(format!("non-finite sample in dim {d}")));
        }
        if grippers.binary_search(&d).is_ok() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            stats.gripper_lo.push(lo);
            stats.gripper_hi.push(hi);
            // percentile slots mirror the gripper range; they are not consulted
            stats.q01[d] = lo;
            stats.q99[d] = hi;
        } else {
            col.sort_unstable_by(f64::total_cmp);
            stats.q01[d] = quantile_sorted(col, 0.01);
            stats.q99[d] = quantile_sorted(col, 0.99);
        }
    }
    Ok(stats)
}

pub fn normalize(chunk: &ActionChunk, stats: &NormStats) -> Result<ActionChunk, NormError> {
    map_chunk(chunk, stats, NormStats::normalize_value)
}

pub fn denormalize(chunk: &ActionChunk, stats: &NormStats) -> Result<ActionChunk, NormError> {
    map_chunk(chunk, stats, NormStats::denormalize_value)
}

fn map_chunk(
    chunk: &ActionChunk,
    stats: &NormStats,
    f: fn(&NormStats, usize, f64) -> f64,
) -> Result<ActionChunk, NormError> {
    stats.check_dims(chunk.dims())?;
    let dims = chunk.dims();
    let values = chunk
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(stats, i % dims, x))
        .collect();
    ActionChunk::new(chunk.horizon(), dims, values)
}

/// A chunk in the shared 30x32 layout. Entries outside the valid prefix are
/// exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedChunk {
    pub values: Vec<f64>,
    pub horizon_mask: [bool; HORIZON_MAX],
    pub dim_mask: [bool; WIDTH_MAX],
}

impl PaddedChunk {
    pub fn valid_horizon(&self) -> usize {
        self.horizon_mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_dims(&self) -> usize {
        self.dim_mask.iter().filter(|&&m| m).count()
    }

    pub fn is_valid(&self, step: usize, dim: usize) -> bool {
        self.horizon_mask[step] && self.dim_mask[dim]
    }

    /// Row-major validity of all 960 entries.
    pub fn entry_mask(&self) -> Vec<bool> {
        (0..GRID_LEN)
            .map(|i| self.is_valid(i / WIDTH_MAX, i % WIDTH_MAX))
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_horizon() * self.valid_dims()
    }
}

pub fn pad_chunk(chunk: &ActionChunk) -> Result<PaddedChunk, NormError> {
    let (h, d) = (chunk.horizon(), chunk.dims());
    if h > HORIZON_MAX || d > WIDTH_MAX {
        return Err(NormError::Capacity(format!(
            "{h}x{d} chunk exceeds {HORIZON_MAX}x{WIDTH_MAX}"
        )));
    }
    let mut values = vec![0.0; GRID_LEN];
    for s in 0..h {
        values[s * WIDTH_MAX..s * WIDTH_MAX + d].copy_from_slice(chunk.row(s));
    }
    let mut horizon_mask = [false; HORIZON_MAX];
    horizon_mask[..h].fill(true);
    let mut dim_mask = [false; WIDTH_MAX];
    dim_mask[..d].fill(true);
    Ok(PaddedChunk {
        values,
        horizon_mask,
        dim_mask,
    })
}

/// Slices the valid prefix of a padded grid.
pub fn unpad_grid(grid: &[f64], horizon: usize, dims: usize) -> Result<ActionChunk, NormError> {
    if grid.len() != GRID_LEN {
        return Err(NormError::Shape(format!(
            "grid has {} entries, expected {GRID_LEN}",
            grid.len()
        )));
    }
    if horizon > HORIZON_MAX || dims > WIDTH_MAX {
        return Err(NormError::Capacity(format!(
            "{horizon}x{dims} exceeds {HORIZON_MAX}x{WIDTH_MAX}"
        )));
    }
    let values = (0..horizon)
        .flat_map(|s| grid[s * WIDTH_MAX..s * WIDTH_MAX + dims].iter().copied())
        .collect();
    ActionChunk::new(horizon, dims, values)
}

pub fn unpad_chunk(padded: &PaddedChunk) -> Result<ActionChunk, NormError> {
    unpad_grid(&padded.values, padded.valid_horizon(), padded.valid_dims())
}

/// Sliding one-second windows of the episode's actions.
pub fn extract_chunks(episode: &Episode, stride: usize) -> Vec<ActionChunk> {
    let window = episode.fps as usize;
    let n = episode.steps.len();
    if window == 0 || stride == 0 || n < window {
        return Vec::new();
    }
    let dims = episode.action_dims();
    (0..=n - window)
        .step_by(stride)
        .map(|start| {
            let values = episode.steps[start..start + window]
                .iter()
                .flat_map(|s| s.action.iter().copied())
                .collect();
            ActionChunk::new(window, dims, values).expect("episode dims validated")
        })
        .collect()
}
