//! Model configuration and parameter storage.

use crate::error::{Error, Result};
use crate::math::{Mat, Real};
use crate::model::tokenizer::VOCAB_SIZE;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Architecture of the micro causal transformer: pre-norm blocks, learned
/// positional embeddings, GELU feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Sized so end-to-end training fits in laptop CPU minutes.
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 512,
            context_length: 1024,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(Error::Model("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Model(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-layer weights. Projections are stored input-major (`d_in x d_out`) so
/// the sequence-level products are unit stride.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub q_proj: Mat<T>,
    pub k_proj: Mat<T>,
    pub v_proj: Mat<T>,
    pub o_proj: Mat<T>,
    pub ffn_norm: Vec<T>,
    pub ffn_in: Mat<T>,
    pub ffn_out: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embed: Mat<T>,
    pub pos_embed: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Mat<T>,
}

fn gaussian_mat<T: Real>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.gauss() * std))
        .collect();
    Mat::from_rows(rows, cols, data)
}

impl<T: Real> ModelParams<T> {
    /// Random initialization. Residual write-out projections start at zero so
    /// the untrained residual stream is the embedding sum.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed ^ 0x6d6f64656c);
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: vec![T::ONE; d],
                q_proj: gaussian_mat(&mut rng, d, d, 0.02),
                k_proj: gaussian_mat(&mut rng, d, d, 0.02),
                v_proj: gaussian_mat(&mut rng, d, d, 0.02),
                o_proj: Mat::zeros(d, d),
                ffn_norm: vec![T::ONE; d],
                ffn_in: gaussian_mat(&mut rng, d, config.d_ffn, 0.02),
                ffn_out: Mat::zeros(config.d_ffn, d),
            })
            .collect();
        Ok(ModelParams {
            config,
            embed: gaussian_mat(&mut rng, VOCAB_SIZE, d, 0.02),
            pos_embed: gaussian_mat(&mut rng, config.context_length, d, 0.02),
            layers,
            final_norm: vec![T::ONE; d],
            lm_head: gaussian_mat(&mut rng, d, VOCAB_SIZE, 0.02),
        })
    }

    /// Named tensors in a fixed order: (name, dims, values). Names carry the
    /// layer index and role so injection targets are addressable.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = vec![(
            "embed".into(),
            vec![self.embed.rows, self.embed.cols],
            &self.embed.data[..],
        )];
        out.push((
            "pos_embed".into(),
            vec![self.pos_embed.rows, self.pos_embed.cols],
            &self.pos_embed.data[..],
        ));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), vec![l.attn_norm.len()], &l.attn_norm[..]));
            for (role, m) in [
                ("q_proj", &l.q_proj),
                ("k_proj", &l.k_proj),
                ("v_proj", &l.v_proj),
                ("o_proj", &l.o_proj),
                ("ffn_in", &l.ffn_in),
                ("ffn_out", &l.ffn_out),
            ] {
                out.push((format!("layers.{i}.{role}"), vec![m.rows, m.cols], &m.data[..]));
            }
            out.push((format!("layers.{i}.ffn_norm"), vec![l.ffn_norm.len()], &l.ffn_norm[..]));
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm[..]));
        out.push((
            "lm_head".into(),
            vec![self.lm_head.rows, self.lm_head.cols],
            &self.lm_head.data[..],
        ));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, vals)| vals.iter().all(|v| v.is_finite()))
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        ModelParams {
            config: self.config,
            embed: widen(&self.embed),
            pos_embed: widen(&self.pos_embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.iter().map(|v| v.to_f64()).collect(),
                    q_proj: widen(&l.q_proj),
                    k_proj: widen(&l.k_proj),
                    v_proj: widen(&l.v_proj),
                    o_proj: widen(&l.o_proj),
                    ffn_norm: l.ffn_norm.iter().map(|v| v.to_f64()).collect(),
                    ffn_in: widen(&l.ffn_in),
                    ffn_out: widen(&l.ffn_out),
                })
                .collect(),
            final_norm: self.final_norm.iter().map(|v| v.to_f64()).collect(),
            lm_head: widen(&self.lm_head),
        }
    }
}

fn widen<T: Real>(m: &Mat<T>) -> Mat<f64> {
    Mat {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|v| v.to_f64()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.head_dim(), 32);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let c = ModelConfig {
            d_model: 10,
            n_heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let c = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 32,
            context_length: 64,
            seed: 5,
        };
        let a: ModelParams<f32> = ModelParams::init(c).unwrap();
        let b: ModelParams<f32> = ModelParams::init(c).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
    }

    #[test]
    fn tensor_names_are_unique() {
        let c = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 32,
            context_length: 64,
            seed: 5,
        };
        let m: ModelParams<f32> = ModelParams::init(c).unwrap();
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.iter().any(|n| n == "layers.1.q_proj"));
    }
}
