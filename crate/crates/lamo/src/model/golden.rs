//! Golden-logit fixture files: model config, input tokens, and expected
//! logits, all little-endian (f32 values), for regression-pinning the
//! forward pass.

use crate::error::{Error, Result};
use crate::model::params::ModelConfig;
use std::path::Path;

const MAGIC: &[u8; 4] = b"LOGF";

pub struct GoldenLogits {
    pub config: ModelConfig,
    pub tokens: Vec<u32>,
    /// Row-major `tokens.len() x vocab` logits.
    pub logits: Vec<f32>,
}

pub fn write_golden(path: impl AsRef<Path>, golden: &GoldenLogits) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [
        golden.config.d_model as u64,
        golden.config.n_layers as u64,
        golden.config.n_heads as u64,
        golden.config.d_ffn as u64,
        golden.config.context_length as u64,
        golden.config.seed,
        golden.tokens.len() as u64,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &t in &golden.tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf.extend_from_slice(&(golden.logits.len() as u64).to_le_bytes());
    for &v in &golden.logits {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_golden(path: impl AsRef<Path>) -> Result<GoldenLogits> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |reason: &str| Error::Checkpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if data.len() < 4 + 7 * 8 || &data[..4] != MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let mut pos = 4;
    let mut take_u64 = |data: &[u8]| -> u64 {
        let v = u64::from_le_bytes(data[pos..pos + 8].try_into().unwrap());
        pos += 8;
        v
    };
    let d_model = take_u64(&data) as usize;
    let n_layers = take_u64(&data) as usize;
    let n_heads = take_u64(&data) as usize;
    let d_ffn = take_u64(&data) as usize;
    let context_length = take_u64(&data) as usize;
    let seed = take_u64(&data);
    let n_tokens = take_u64(&data) as usize;
    if data.len() < pos + n_tokens * 4 + 8 {
        return Err(bad("truncated tokens"));
    }
    let tokens: Vec<u32> = (0..n_tokens)
        .map(|i| u32::from_le_bytes(data[pos + i * 4..pos + i * 4 + 4].try_into().unwrap()))
        .collect();
    let mut pos = pos + n_tokens * 4;
    let n_logits = u64::from_le_bytes(data[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    if data.len() != pos + n_logits * 4 {
        return Err(bad("truncated logits"));
    }
    let logits: Vec<f32> = (0..n_logits)
        .map(|i| f32::from_le_bytes(data[pos + i * 4..pos + i * 4 + 4].try_into().unwrap()))
        .collect();
    Ok(GoldenLogits {
        config: ModelConfig {
            d_model,
            n_layers,
            n_heads,
            d_ffn,
            context_length,
            seed,
        },
        tokens,
        logits,
    })
}
