//! Flow-matching numerics over the padded 30x32 action grid.
//!
//! Training pairs interpolate linearly from noise `eps` at `t = 0` to the
//! action `a` at `t = 1`; the regression target is the constant velocity
//! `a - eps`. Sampling integrates a velocity field with fixed-step,
//! left-endpoint Euler.

use thiserror::Error;

use crate::normalize::{
    denormalize, unpad_grid, ActionChunk, NormError, NormStats, PaddedChunk, GRID_LEN,
};
use crate::rng::DetRng;

pub const DEFAULT_SAMPLES: usize = 4;
pub const FINETUNE_SAMPLES: usize = 8;
pub const DEFAULT_STEPS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Norm(#[from] NormError),
}

/// A velocity field `f(x_t, t, context)` over the padded grid.
pub trait VelocityField<C: ?Sized = ()> {
    fn velocity(&self, x: &[f64], t: f64, ctx: &C) -> Result<Vec<f64>, FlowError>;
}

impl<C: ?Sized, F> VelocityField<C> for F
where
    F: Fn(&[f64], f64, &C) -> Vec<f64>,
{
    fn velocity(&self, x: &[f64], t: f64, ctx: &C) -> Result<Vec<f64>, FlowError> {
        Ok(self(x, t, ctx))
    }
}

fn eval_checked<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    ctx: &C,
) -> Result<Vec<f64>, FlowError> {
    let v = field.velocity(x, t, ctx)?;
    if v.len() != x.len() {
        return Err(FlowError::Contract(format!(
            "field returned {} values for a {}-entry input",
            v.len(),
            x.len()
        )));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub epsilon: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub u_star: Vec<f64>,
}

impl FlowSample {
    /// Builds the interpolant and target for a given noise draw and time.
    /// Masked entries of `epsilon` are forced to zero.
    pub fn new(a: &PaddedChunk, mut epsilon: Vec<f64>, t: f64) -> Result<Self, FlowError> {
        if epsilon.len() != GRID_LEN {
            return Err(FlowError::Contract(format!(
                "noise has {} entries, expected {GRID_LEN}",
                epsilon.len()
            )));
        }
        let mask = a.entry_mask();
        for (e, &m) in epsilon.iter_mut().zip(&mask) {
            if !m {
                *e = 0.0;
            }
        }
        let x_t = epsilon
            .iter()
            .zip(&a.values)
            .map(|(&e, &x)| (1.0 - t) * e + t * x)
            .collect();
        let u_star = epsilon.iter().zip(&a.values).map(|(&e, &x)| x - e).collect();
        Ok(Self {
            epsilon,
            t,
            x_t,
            u_star,
        })
    }
}

/// Draws `k` independent `(eps, t)` pairs. Per sample, `t` is drawn first,
/// then one normal per valid entry in row-major order.
pub fn make_samples(a: &PaddedChunk, k: usize, seed: u64) -> Result<Vec<FlowSample>, FlowError> {
    if k == 0 {
        return Err(FlowError::Config("K must be at least 1".into()));
    }
    let mask = a.entry_mask();
    let mut rng = DetRng::new(seed);
    (0..k)
        .map(|_| {
            let t = rng.uniform();
            let eps = mask
                .iter()
                .map(|&m| if m { rng.normal() } else { 0.0 })
                .collect();
            FlowSample::new(a, eps, t)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowLossReport {
    pub loss: f64,
    pub k: usize,
    /// Mean squared masked residual of each sample.
    pub per_sample: Vec<f64>,
}

/// Multi-sample masked flow loss, averaged over valid entries and samples.
/// Masked entries of the field output are never read.
pub fn masked_flow_loss<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    a: &PaddedChunk,
    samples: &[FlowSample],
    ctx: &C,
) -> Result<FlowLossReport, FlowError> {
    if samples.is_empty() {
        return Err(FlowError::Config("no flow samples".into()));
    }
    let mask = a.entry_mask();
    let valid = a.valid_count();
    if valid == 0 {
        return Err(FlowError::Contract("chunk has no valid entries".into()));
    }
    let per_sample = samples
        .iter()
        .map(|s| {
            if s.x_t.len() != GRID_LEN || s.u_star.len() != GRID_LEN {
                return Err(FlowError::Contract("sample is not a padded grid".into()));
            }
            let pred = eval_checked(field, &s.x_t, s.t, ctx)?;
            let sq: f64 = mask
                .iter()
                .zip(pred.iter().zip(&s.u_star))
                .filter(|(&m, _)| m)
                .map(|(_, (p, u))| (p - u) * (p - u))
                .sum();
            Ok(sq / valid as f64)
        })
        .collect::<Result<Vec<_>, FlowError>>()?;
    let loss = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(FlowLossReport {
        loss,
        k: samples.len(),
        per_sample,
    })
}

/// `z_{i+1} = z_i + dt * f(z_i, i / N)` with `dt = 1 / N`; returns `z_N`.
pub fn euler_integrate<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    z0: &[f64],
    steps: usize,
    ctx: &C,
) -> Result<Vec<f64>, FlowError> {
    integrate(field, z0, None, steps, ctx)
}

/// Euler integration that ignores the field on masked entries, which stay at
/// their initial value.
pub fn euler_integrate_masked<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    z0: &[f64],
    mask: &[bool],
    steps: usize,
    ctx: &C,
) -> Result<Vec<f64>, FlowError> {
    if mask.len() != z0.len() {
        return Err(FlowError::Contract("mask length differs from state".into()));
    }
    integrate(field, z0, Some(mask), steps, ctx)
}

fn integrate<C: ?Sized, F: VelocityField<C> + ?Sized>(
    field: &F,
    z0: &[f64],
    mask: Option<&[bool]>,
    steps: usize,
    ctx: &C,
) -> Result<Vec<f64>, FlowError> {
    if steps == 0 {
        return Err(FlowError::Config("at least one Euler step is required".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0.to_vec();
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let v = eval_checked(field, &z, t, ctx)?;
        for (j, (zj, vj)) in z.iter_mut().zip(v).enumerate() {
            if mask.is_none_or(|m| m[j]) {
                *zj += dt * vj;
            }
        }
    }
    Ok(z)
}

/// Slices the valid `horizon x dims` prefix and maps it back to dataset units.
pub fn finalize_action(
    z: &[f64],
    stats: &NormStats,
    horizon: usize,
    dims: usize,
) -> Result<ActionChunk, FlowError> {
    let sliced = unpad_grid(z, horizon, dims)?;
    Ok(denormalize(&sliced, stats)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::{pad_chunk, ActionChunk};

    fn chunk(h: usize, d: usize, seed: u64) -> PaddedChunk {
        let mut rng = DetRng::new(seed);
        let values = (0..h * d).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        pad_chunk(&ActionChunk::new(h, d, values).unwrap()).unwrap()
    }

    #[test]
    fn interpolation_endpoints() {
        let a = chunk(10, 7, 1);
        let s = &make_samples(&a, 1, 3).unwrap()[0];
        let one = FlowSample::new(&a, s.epsilon.clone(), 1.0).unwrap();
        assert_eq!(one.x_t, a.values);
        let zero = FlowSample::new(&a, s.epsilon.clone(), 0.0).unwrap();
        assert_eq!(zero.x_t, s.epsilon);
    }

    #[test]
    fn samples_respect_mask_and_count() {
        let a = chunk(10, 7, 2);
        for k in [DEFAULT_SAMPLES, FINETUNE_SAMPLES] {
            let samples = make_samples(&a, k, 11).unwrap();
            assert_eq!(samples.len(), k);
            for s in &samples {
                assert!((0.0..1.0).contains(&s.t));
                for (i, m) in a.entry_mask().into_iter().enumerate() {
                    if !m {
                        assert_eq!((s.epsilon[i], s.x_t[i], s.u_star[i]), (0.0, 0.0, 0.0));
                    }
                }
            }
        }
        assert_eq!(make_samples(&a, 4, 5).unwrap(), make_samples(&a, 4, 5).unwrap());
    }

    #[test]
    fn zero_samples_is_config_error() {
        assert!(matches!(
            make_samples(&chunk(3, 3, 0), 0, 0),
            Err(FlowError::Config(_))
        ));
    }

    #[test]
    fn wrong_field_shape_is_contract_error() {
        let a = chunk(3, 3, 0);
        let samples = make_samples(&a, 2, 0).unwrap();
        let bad = |_: &[f64], _: f64, _: &()| vec![0.0; 5];
        assert!(matches!(
            masked_flow_loss(&bad, &a, &samples, &()),
            Err(FlowError::Contract(_))
        ));
        assert!(matches!(
            euler_integrate(&bad, &[0.0; GRID_LEN], 3, &()),
            Err(FlowError::Contract(_))
        ));
    }

    #[test]
    fn zero_field_keeps_state() {
        let zero = |x: &[f64], _: f64, _: &()| vec![0.0; x.len()];
        let z0: Vec<f64> = (0..GRID_LEN).map(|i| i as f64 * 0.01).collect();
        assert_eq!(euler_integrate(&zero, &z0, 10, &()).unwrap(), z0);
    }

    #[test]
    fn zero_steps_rejected() {
        let zero = |x: &[f64], _: f64, _: &()| vec![0.0; x.len()];
        assert!(euler_integrate(&zero, &[0.0; 4], 0, &()).is_err());
    }

    #[test]
    fn masked_integration_ignores_padding() {
        let a = chunk(5, 4, 9);
        let mask = a.entry_mask();
        let noisy = |x: &[f64], _: f64, _: &()| {
            x.iter().enumerate().map(|(i, _)| if i % 2 == 0 { 1.0 } else { 1e6 }).collect()
        };
        let z0 = vec![0.0; GRID_LEN];
        let out = euler_integrate_masked(&noisy, &z0, &mask, 10, &()).unwrap();
        for (i, m) in mask.iter().enumerate() {
            if !m {
                assert_eq!(out[i], 0.0);
            }
        }
    }

    #[test]
    fn finalize_slices_and_denormalizes() {
        let stats = NormStats {
            dims: 2,
            q01: vec![0.0, -4.0],
            q99: vec![2.0, 4.0],
            gripper_dims: vec![],
            gripper_lo: vec![],
            gripper_hi: vec![],
        };
        let out = finalize_action(&vec![0.0; GRID_LEN], &stats, 10, 2).unwrap();
        assert_eq!(out.horizon(), 10);
        assert!(out.values().chunks(2).all(|r| r == [1.0, 0.0]));
        assert!(matches!(
            finalize_action(&vec![0.0; GRID_LEN], &stats, 31, 2),
            Err(FlowError::Norm(NormError::Capacity(_)))
        ));
    }
}
