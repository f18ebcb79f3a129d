//! Uniform 256-bin state tokens.

use thiserror::Error;

use crate::normalize::{NormError, NormStats};

pub const STATE_BINS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error("codec error: state token {0} outside [0, 255]")]
    Token(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateCodec {
    pub stats: NormStats,
}

/// Bin of an already normalized value. Bins are right-open except the top
/// one, which also holds +1.
pub fn bin_of(x: f64) -> u8 {
    let x = x.clamp(-1.0, 1.0);
    let idx = ((x + 1.0) / 2.0 * STATE_BINS as f64).floor() as usize;
    idx.min(STATE_BINS - 1) as u8
}

pub fn bin_center(token: u8) -> f64 {
    -1.0 + (2 * token as usize + 1) as f64 / STATE_BINS as f64
}

impl StateCodec {
    pub fn new(stats: NormStats) -> Self {
        Self { stats }
    }

    pub fn encode_state(&self, state: &[f64]) -> Result<Vec<u8>, StateError> {
        Ok(self
            .stats
            .normalize_vector(state)?
            .into_iter()
            .map(bin_of)
            .collect())
    }

    pub fn decode_state(&self, tokens: &[u32]) -> Result<Vec<f64>, StateError> {
        let centers = tokens
            .iter()
            .map(|&t| {
                u8::try_from(t)
                    .map(bin_center)
                    .map_err(|_| StateError::Token(t))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.stats.denormalize_vector(&centers)?)
    }
}
