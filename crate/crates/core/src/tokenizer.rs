//! The action codec: normalize, pad, DCT per dimension, quantize,
//! serialize, then BPE. The persisted [`TokenizerArtifact`] bundles
//! everything needed to run the pipeline in either direction.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bpe::{bpe_train, BpeTrainConfig, BpeVocab};
use crate::codec::{
    deserialize_coeffs, dequantize, quantize, serialize_grid, CodecError, QuantConfig,
};
use crate::dct::{dct_forward, dct_inverse, DctPlan};
use crate::normalize::{
    compute_stats, denormalize, normalize, pad_chunk, ActionChunk, NormError, NormStats,
    HORIZON_MAX, WIDTH_MAX,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Hex SHA-256 of the mixture (or corpus) file the tokenizer was fit on.
    pub mixture_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerArtifact {
    pub format_version: u32,
    pub stats: NormStats,
    pub quant: QuantConfig,
    pub merges: BpeVocab,
    pub h_max: usize,
    pub d_max: usize,
    pub provenance: Provenance,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl TokenizerArtifact {
    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_str(text)
            .map_err(|e| TokenizerError::Artifact(format!("unreadable artifact: {e}")))?;
        if v.format_version != FORMAT_VERSION {
            return Err(TokenizerError::Artifact(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                v.format_version
            )));
        }
        let artifact: Self = serde_json::from_str(text)
            .map_err(|e| TokenizerError::Artifact(format!("invalid artifact: {e}")))?;
        artifact.stats.validate()?;
        artifact.quant.validate()?;
        if artifact.h_max != HORIZON_MAX || artifact.d_max != WIDTH_MAX {
            return Err(TokenizerError::Artifact(format!(
                "artifact caps {}x{} differ from {HORIZON_MAX}x{WIDTH_MAX}",
                artifact.h_max, artifact.d_max
            )));
        }
        Ok(artifact)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.merges.vocab_size()
    }

    fn check_shape(&self, horizon: usize, dims: usize) -> Result<(), TokenizerError> {
        if horizon > self.h_max || dims > self.d_max {
            return Err(NormError::Capacity(format!(
                "{horizon}x{dims} exceeds {}x{}",
                self.h_max, self.d_max
            ))
            .into());
        }
        if dims != self.stats.dims {
            return Err(NormError::Shape(format!(
                "chunk has {dims} dims, artifact stats have {}",
                self.stats.dims
            ))
            .into());
        }
        Ok(())
    }
}

/// Quantized DCT coefficients of a normalized chunk, laid out in the padded
/// 30x32 grid (`grid[freq * 32 + dim]`).
fn quantized_grid(
    normalized: &ActionChunk,
    quant: &QuantConfig,
) -> Result<(Vec<i64>, crate::normalize::PaddedChunk), TokenizerError> {
    let padded = pad_chunk(normalized)?;
    let (h, d) = (normalized.horizon(), normalized.dims());
    let plan = DctPlan::new(h);
    let mut grid = vec![0i64; HORIZON_MAX * WIDTH_MAX];
    for dim in 0..d {
        let coeffs = dct_forward(&normalized.column(dim), &plan)?;
        for (f, q) in quantize(&coeffs, quant).into_iter().enumerate() {
            grid[f * WIDTH_MAX + dim] = q;
        }
    }
    Ok((grid, padded))
}

/// Bytes handed to BPE for one already normalized chunk.
pub fn chunk_bytes(normalized: &ActionChunk, quant: &QuantConfig) -> Result<Vec<u8>, TokenizerError> {
    let (grid, padded) = quantized_grid(normalized, quant)?;
    Ok(serialize_grid(&grid, &padded.horizon_mask, &padded.dim_mask)?)
}

pub fn tokenize_chunk(
    chunk: &ActionChunk,
    artifact: &TokenizerArtifact,
) -> Result<Vec<u32>, TokenizerError> {
    artifact.check_shape(chunk.horizon(), chunk.dims())?;
    let normalized = normalize(chunk, &artifact.stats)?;
    let bytes = chunk_bytes(&normalized, &artifact.quant)?;
    Ok(artifact.merges.encode(&bytes))
}

/// Inverse of the discrete stages, stopping before denormalization.
pub fn detokenize_normalized(
    ids: &[u32],
    artifact: &TokenizerArtifact,
    horizon: usize,
    dims: usize,
) -> Result<ActionChunk, TokenizerError> {
    artifact.check_shape(horizon, dims)?;
    if horizon == 0 {
        return Err(NormError::Shape("horizon must be positive".into()).into());
    }
    let bytes = artifact.merges.decode(ids)?;
    let coeffs = dequantize(&deserialize_coeffs(&bytes, horizon, dims)?, &artifact.quant);
    let plan = DctPlan::new(horizon);
    let mut values = vec![0.0; horizon * dims];
    for dim in 0..dims {
        let column: Vec<f64> = (0..horizon).map(|f| coeffs[f * dims + dim]).collect();
        for (step, v) in dct_inverse(&column, &plan)?.into_iter().enumerate() {
            values[step * dims + dim] = v;
        }
    }
    Ok(ActionChunk::new(horizon, dims, values)?)
}

pub fn detokenize_chunk(
    ids: &[u32],
    artifact: &TokenizerArtifact,
    horizon: usize,
    dims: usize,
) -> Result<ActionChunk, TokenizerError> {
    let normalized = detokenize_normalized(ids, artifact, horizon, dims)?;
    Ok(denormalize(&normalized, &artifact.stats)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerTrainConfig {
    pub gripper_dims: Vec<usize>,
    pub quant: QuantConfig,
    pub vocab_size: usize,
    pub threads: usize,
    pub provenance: Provenance,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            gripper_dims: Vec::new(),
            quant: QuantConfig::default(),
            vocab_size: crate::bpe::DEFAULT_VOCAB,
            threads: 1,
            provenance: Provenance {
                mixture_hash: String::new(),
                seed: 0,
            },
        }
    }
}

/// Fits normalization statistics and the merge table on a set of chunks.
pub fn train_tokenizer(
    chunks: &[ActionChunk],
    config: &TokenizerTrainConfig,
) -> Result<TokenizerArtifact, TokenizerError> {
    config.quant.validate()?;
    let stats = compute_stats(chunks, &config.gripper_dims)?;
    let corpus = chunks
        .iter()
        .map(|c| {
            if c.horizon() > HORIZON_MAX || c.dims() > WIDTH_MAX {
                return Err(NormError::Capacity(format!(
                    "{}x{} chunk exceeds {HORIZON_MAX}x{WIDTH_MAX}",
                    c.horizon(),
                    c.dims()
                ))
                .into());
            }
            chunk_bytes(&normalize(c, &stats)?, &config.quant)
        })
        .collect::<Result<Vec<_>, TokenizerError>>()?;
    let merges = bpe_train(
        &corpus,
        BpeTrainConfig {
            vocab_size: config.vocab_size,
            threads: config.threads,
        },
    )?;
    Ok(TokenizerArtifact {
        format_version: FORMAT_VERSION,
        stats,
        quant: config.quant,
        merges,
        h_max: HORIZON_MAX,
        d_max: WIDTH_MAX,
        provenance: config.provenance.clone(),
    })
}
