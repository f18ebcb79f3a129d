//! Sequence packing as a two-budget 0/1 knapsack.
//!
//! Each example contributes `T + w * I` (quantized text tokens plus weighted
//! image crops). [`solve_pack`] is an exact dynamic program over
//! (token quanta x crops); [`pack_stream`] runs it over a refilling pool.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::DetRng;

pub const DEFAULT_WEIGHT: u64 = 30;
pub const DEFAULT_QUANTUM: u64 = 32;
pub const DEFAULT_POOL: usize = 48;
pub const MAX_POOL: usize = 64;
/// Rows smaller than this are filled sequentially.
const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PackError {
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackExample {
    pub tokens: u64,
    pub crops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PackConstraints {
    pub t_max: u64,
    pub i_max: u64,
    pub weight: u64,
    pub quantum: u64,
}

impl PackConstraints {
    pub fn new(t_max: u64, i_max: u64) -> Self {
        Self {
            t_max,
            i_max,
            weight: DEFAULT_WEIGHT,
            quantum: DEFAULT_QUANTUM,
        }
    }

    pub fn validate(&self) -> Result<(), PackError> {
        if self.quantum == 0 {
            return Err(PackError::Config("quantum must be positive".into()));
        }
        Ok(())
    }

    /// Nearest multiple of the quantum, ties rounding up.
    pub fn quantize(&self, tokens: u64) -> u64 {
        (tokens + self.quantum / 2) / self.quantum * self.quantum
    }

    /// Budget in whole quanta; the quantized total never exceeds `t_max`.
    pub fn token_units(&self) -> u64 {
        self.t_max / self.quantum
    }

    pub fn value(&self, e: &PackExample) -> u64 {
        self.quantize(e.tokens) + self.weight * e.crops
    }

    pub fn fits_alone(&self, e: &PackExample) -> bool {
        self.quantize(e.tokens) / self.quantum <= self.token_units() && e.crops <= self.i_max
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PackSolution {
    /// Ascending indices into the pool.
    pub selected: Vec<usize>,
    pub tokens: u64,
    pub raw_tokens: u64,
    pub crops: u64,
    pub objective: u64,
}

impl PackSolution {
    pub fn from_selection(
        pool: &[PackExample],
        selected: Vec<usize>,
        c: &PackConstraints,
    ) -> Self {
        let pick = || selected.iter().map(|&i| &pool[i]);
        let tokens = pick().map(|e| c.quantize(e.tokens)).sum();
        let raw_tokens = pick().map(|e| e.tokens).sum();
        let crops = pick().map(|e| e.crops).sum();
        let objective = pick().map(|e| c.value(e)).sum();
        Self {
            selected,
            tokens,
            raw_tokens,
            crops,
            objective,
        }
    }
}

/// Exact optimum; among optimal subsets the lexicographically smallest
/// ascending index list is returned.
pub fn solve_pack(pool: &[PackExample], c: &PackConstraints) -> Result<PackSolution, PackError> {
    c.validate()?;
    if pool.len() > MAX_POOL {
        return Err(PackError::Config(format!(
            "pool of {} exceeds the supported {MAX_POOL}",
            pool.len()
        )));
    }
    let n = pool.len();
    let qcap = c.token_units() as usize;
    let icap = c.i_max as usize;
    let cols = icap + 1;
    let plane = (qcap + 1) * cols;
    let items: Vec<(usize, usize, u64)> = pool
        .iter()
        .map(|e| {
            let q = (c.quantize(e.tokens) / c.quantum) as usize;
            (q, e.crops as usize, c.value(e))
        })
        .collect();

    // best[j] holds the optimum over items j.. for every (quanta, crops) budget.
    let mut best = vec![0u64; (n + 1) * plane];
    for j in (0..n).rev() {
        let (head, tail) = best.split_at_mut((j + 1) * plane);
        let next = &tail[..plane];
        let row = &mut head[j * plane..];
        let (wq, wi, v) = items[j];
        let fill = |(q, out): (usize, &mut [u64])| {
            for (i, slot) in out.iter_mut().enumerate() {
                let skip = next[q * cols + i];
                *slot = if q >= wq && i >= wi {
                    skip.max(v + next[(q - wq) * cols + (i - wi)])
                } else {
                    skip
                };
            }
        };
        if plane >= PAR_THRESHOLD {
            row.par_chunks_mut(cols).enumerate().for_each(fill);
        } else {
            row.chunks_mut(cols).enumerate().for_each(fill);
        }
    }

    let mut selected = Vec::new();
    let (mut q, mut i) = (qcap, icap);
    let mut remaining = best[q * cols + i];
    for (j, &(wq, wi, v)) in items.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if q >= wq && i >= wi {
            let rest = best[(j + 1) * plane + (q - wq) * cols + (i - wi)];
            if v + rest == remaining {
                selected.push(j);
                q -= wq;
                i -= wi;
                remaining = rest;
            }
        }
    }
    Ok(PackSolution::from_selection(pool, selected, c))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PackedSequence {
    /// Stream positions of the packed examples.
    pub example_ids: Vec<usize>,
    pub tokens: u64,
    pub raw_tokens: u64,
    pub crops: u64,
    pub objective: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PackReport {
    pub sequences: Vec<PackedSequence>,
    /// Examples that fit no budget on their own or carry no value.
    pub dead_letter: Vec<usize>,
    pub token_utilization: f64,
    pub crop_utilization: f64,
}

/// Fills a pool of `pool_size`, packs whenever it is full, then drains the
/// remainder with repeated solves.
pub fn pack_stream<I>(examples: I, c: &PackConstraints, pool_size: usize) -> Result<PackReport, PackError>
where
    I: IntoIterator<Item = PackExample>,
{
    c.validate()?;
    if pool_size == 0 || pool_size > MAX_POOL {
        return Err(PackError::Config(format!(
            "pool size must be in 1..={MAX_POOL}, got {pool_size}"
        )));
    }
    let mut pool: Vec<(usize, PackExample)> = Vec::with_capacity(pool_size);
    let mut sequences = Vec::new();
    let mut dead_letter = Vec::new();

    let emit = |pool: &mut Vec<(usize, PackExample)>, out: &mut Vec<PackedSequence>| {
        let sizes: Vec<PackExample> = pool.iter().map(|p| p.1).collect();
        let sol = solve_pack(&sizes, c)?;
        out.push(PackedSequence {
            example_ids: sol.selected.iter().map(|&k| pool[k].0).collect(),
            tokens: sol.tokens,
            raw_tokens: sol.raw_tokens,
            crops: sol.crops,
            objective: sol.objective,
        });
        for &k in sol.selected.iter().rev() {
            pool.remove(k);
        }
        Ok::<_, PackError>(())
    };

    for (id, e) in examples.into_iter().enumerate() {
        if !c.fits_alone(&e) || c.value(&e) == 0 {
            dead_letter.push(id);
            continue;
        }
        pool.push((id, e));
        if pool.len() == pool_size {
            emit(&mut pool, &mut sequences)?;
        }
    }
    while !pool.is_empty() {
        emit(&mut pool, &mut sequences)?;
    }

    let mean = |f: &dyn Fn(&PackedSequence) -> f64| {
        if sequences.is_empty() {
            0.0
        } else {
            sequences.iter().map(f).sum::<f64>() / sequences.len() as f64
        }
    };
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let token_utilization = mean(&|s| ratio(s.tokens, c.t_max));
    let crop_utilization = mean(&|s| ratio(s.crops, c.i_max));
    Ok(PackReport {
        sequences,
        dead_letter,
        token_utilization,
        crop_utilization,
    })
}

/// A mixed stream: mostly text or single-image examples, some multi-image
/// ones, and a few oversized outliers.
pub fn synthetic_examples(seed: u64, n: usize) -> Vec<PackExample> {
    let mut rng = DetRng::new(seed);
    (0..n)
        .map(|_| {
            let kind = rng.uniform();
            if kind < 0.4 {
                PackExample {
                    tokens: 50 + rng.below(700),
                    crops: 0,
                }
            } else if kind < 0.8 {
                PackExample {
                    tokens: 200 + rng.below(1200),
                    crops: 1 + rng.below(3),
                }
            } else if kind < 0.98 {
                PackExample {
                    tokens: 800 + rng.below(2400),
                    crops: 2 + rng.below(10),
                }
            } else {
                PackExample {
                    tokens: 3000 + rng.below(4000),
                    crops: rng.below(16),
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(tokens: u64, crops: u64) -> PackExample {
        PackExample { tokens, crops }
    }

    #[test]
    fn quantization_rounds_half_up() {
        let c = PackConstraints::new(4200, 128);
        assert_eq!(c.quantize(100), 96);
        assert_eq!(c.quantize(112), 128);
        assert_eq!(c.quantize(111), 96);
        assert_eq!(c.quantize(15), 0);
        assert_eq!(c.quantize(16), 32);
        assert_eq!(c.token_units(), 131);
    }

    #[test]
    fn single_example() {
        let c = PackConstraints::new(4200, 128);
        let s = solve_pack(&[ex(100, 1)], &c).unwrap();
        assert_eq!(s.selected, vec![0]);
        assert_eq!(s.objective, 126);
        assert_eq!((s.tokens, s.raw_tokens, s.crops), (96, 100, 1));
    }

    #[test]
    fn oversized_examples_are_skipped() {
        let c = PackConstraints::new(4200, 128);
        let s = solve_pack(&[ex(5000, 0), ex(4300, 1)], &c).unwrap();
        assert!(s.selected.is_empty());
        assert_eq!(s.objective, 0);
        assert!(solve_pack(&[], &c).unwrap().selected.is_empty());
    }

    #[test]
    fn identical_pool_takes_first_indices() {
        let c = PackConstraints::new(320, 128);
        let pool = vec![ex(32, 0); 48];
        let s = solve_pack(&pool, &c).unwrap();
        assert_eq!(s.selected, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn crop_budget_binds() {
        let c = PackConstraints::new(10_000, 3);
        let pool = [ex(32, 2), ex(32, 2), ex(64, 1)];
        let s = solve_pack(&pool, &c).unwrap();
        assert!(s.crops <= 3);
        assert_eq!(s.selected, vec![0, 2]);
    }

    #[test]
    fn config_errors() {
        let mut c = PackConstraints::new(100, 1);
        c.quantum = 0;
        assert!(solve_pack(&[], &c).is_err());
        let c = PackConstraints::new(100, 1);
        assert!(solve_pack(&vec![ex(1, 0); 65], &c).is_err());
        assert!(pack_stream(vec![], &c, 0).is_err());
    }

    #[test]
    fn short_stream_drains_everything_feasible() {
        let c = PackConstraints::new(4200, 128);
        let stream = vec![ex(100, 1), ex(9000, 0), ex(500, 2), ex(5, 0), ex(4000, 1)];
        let r = pack_stream(stream, &c, 48).unwrap();
        let mut packed: Vec<usize> = r.sequences.iter().flat_map(|s| s.example_ids.clone()).collect();
        packed.sort();
        assert_eq!(packed, vec![0, 2, 4]);
        assert_eq!(r.dead_letter, vec![1, 3]);
        for s in &r.sequences {
            assert!(s.tokens <= c.t_max && s.crops <= c.i_max);
        }
    }

    #[test]
    fn every_example_lands_exactly_once() {
        let c = PackConstraints::new(4200, 24);
        let stream = synthetic_examples(3, 700);
        let r = pack_stream(stream.clone(), &c, 16).unwrap();
        let mut seen: Vec<usize> = r
            .sequences
            .iter()
            .flat_map(|s| s.example_ids.clone())
            .chain(r.dead_letter.clone())
            .collect();
        seen.sort();
        assert_eq!(seen, (0..stream.len()).collect::<Vec<_>>());
    }

    #[test]
    fn removing_a_selected_item_never_helps() {
        let c = PackConstraints::new(2000, 10);
        let pool = synthetic_examples(8, 20);
        let s = solve_pack(&pool, &c).unwrap();
        for &k in &s.selected {
            let rest: Vec<usize> = s.selected.iter().copied().filter(|&j| j != k).collect();
            assert!(PackSolution::from_selection(&pool, rest, &c).objective <= s.objective);
        }
    }
}
