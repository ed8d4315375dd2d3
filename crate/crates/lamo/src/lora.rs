//! Low-rank adapters, the per-group adapter registry, and merging.
//!
//! An adapter contributes `(alpha/r) * B (A x)` on top of a frozen projection
//! `W x`. `B` starts at zero so a fresh adapter is exactly the identity; `A`
//! is Gaussian so gradients reach `B` from the first step.

use crate::error::{Error, Result};
use crate::math::{Mat, Real};
use crate::model::ModelConfig;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            dropout_p: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Model("LoRA rank must be positive".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Model("LoRA alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Model("LoRA dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One low-rank adapter on a named projection.
/// `a` is `r x d_in`, `b` is `d_out x r`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub target: String,
    pub a: Mat<T>,
    pub b: Mat<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub steps: u64,
    pub best_f1: f64,
}

/// The adapters of one medication group: a q_proj and a v_proj adapter for
/// every layer, all sharing one (rank, alpha, dropout).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet<T> {
    pub group_id: usize,
    pub config: LoraConfig,
    pub adapters: Vec<LoraAdapter<T>>,
    pub meta: TrainingMeta,
}

impl<T: Real> LoraAdapterSet<T> {
    /// Adapter index for layer `i`: q at `2i`, v at `2i + 1`.
    pub fn q_adapter(&self, layer: usize) -> &LoraAdapter<T> {
        &self.adapters[2 * layer]
    }

    pub fn v_adapter(&self, layer: usize) -> &LoraAdapter<T> {
        &self.adapters[2 * layer + 1]
    }

    pub fn all_finite(&self) -> bool {
        self.adapters
            .iter()
            .all(|ad| ad.a.data.iter().chain(ad.b.data.iter()).all(|v| v.is_finite()))
    }

    pub fn to_f64(&self) -> LoraAdapterSet<f64> {
        LoraAdapterSet {
            group_id: self.group_id,
            config: self.config,
            adapters: self
                .adapters
                .iter()
                .map(|ad| LoraAdapter {
                    target: ad.target.clone(),
                    a: Mat {
                        rows: ad.a.rows,
                        cols: ad.a.cols,
                        data: ad.a.data.iter().map(|v| v.to_f64()).collect(),
                    },
                    b: Mat {
                        rows: ad.b.rows,
                        cols: ad.b.cols,
                        data: ad.b.data.iter().map(|v| v.to_f64()).collect(),
                    },
                })
                .collect(),
            meta: self.meta,
        }
    }
}

/// Fresh adapters for one group: `A ~ N(0, 0.02^2)` seeded, `B = 0`, so the
/// initial delta is exactly zero.
pub fn init_adapter_set<T: Real>(
    model: &ModelConfig,
    lora: LoraConfig,
    group_id: usize,
    seed: u64,
) -> Result<LoraAdapterSet<T>> {
    lora.validate()?;
    let d = model.d_model;
    if lora.rank > d {
        return Err(Error::RankTooLarge {
            rank: lora.rank,
            limit: d,
        });
    }
    let mut rng = Rng::new(seed);
    let mut adapters = Vec::with_capacity(model.n_layers * 2);
    for layer in 0..model.n_layers {
        for role in ["q_proj", "v_proj"] {
            let a_data = (0..lora.rank * d)
                .map(|_| T::from_f64(rng.gauss() * 0.02))
                .collect();
            adapters.push(LoraAdapter {
                target: format!("layers.{layer}.{role}"),
                a: Mat::from_rows(lora.rank, d, a_data),
                b: Mat::zeros(d, lora.rank),
            });
        }
    }
    Ok(LoraAdapterSet {
        group_id,
        config: lora,
        adapters,
        meta: TrainingMeta {
            seed,
            steps: 0,
            best_f1: 0.0,
        },
    })
}

/// Single-vector adapted projection: `W x + (alpha/r) * B (A drop(x))`.
/// Dropout (inverted, scale 1/(1-p)) applies only in training mode; the
/// inference path is deterministic.
pub fn adapted_projection<T: Real>(
    w: &Mat<T>,
    adapter: &LoraAdapter<T>,
    config: &LoraConfig,
    x: &[T],
    training: bool,
    rng: &mut Rng,
) -> Vec<T> {
    assert_eq!(w.rows, x.len());
    let d_out = w.cols;
    let mut y = vec![T::ZERO; d_out];
    for (i, &xi) in x.iter().enumerate() {
        let wr = w.row(i);
        for o in 0..d_out {
            y[o] += xi * wr[o];
        }
    }
    let keep = T::from_f64(1.0 / (1.0 - config.dropout_p));
    let dropped: Vec<T> = if training && config.dropout_p > 0.0 {
        x.iter()
            .map(|&v| {
                if rng.chance(config.dropout_p) {
                    T::ZERO
                } else {
                    v * keep
                }
            })
            .collect()
    } else {
        x.to_vec()
    };
    let scale = T::from_f64(config.scaling());
    let mut u = vec![T::ZERO; adapter.a.rows];
    for (j, uj) in u.iter_mut().enumerate() {
        *uj = crate::math::dot(adapter.a.row(j), &dropped);
    }
    for o in 0..d_out {
        y[o] += scale * crate::math::dot(adapter.b.row(o), &u);
    }
    y
}

/// Folds an adapter into its base weight: `W' = W + (alpha/r) * B A`.
/// `w` is stored input-major, so the delta lands transposed accordingly.
pub fn merge_adapter<T: Real>(w: &Mat<T>, adapter: &LoraAdapter<T>, config: &LoraConfig) -> Mat<T> {
    let mut merged = w.clone();
    let scale = T::from_f64(config.scaling());
    for o in 0..adapter.b.rows {
        for j in 0..adapter.b.cols {
            let bv = adapter.b.at(o, j) * scale;
            for i in 0..adapter.a.cols {
                *merged.at_mut(i, o) += bv * adapter.a.at(j, i);
            }
        }
    }
    merged
}

/// The mixture of experts: one trained adapter set per medication group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterRegistry<T> {
    /// Digest of the group map the sets were trained against.
    pub group_map_digest: u64,
    pub sets: BTreeMap<usize, LoraAdapterSet<T>>,
}

impl<T: Real> AdapterRegistry<T> {
    pub fn new(group_map_digest: u64) -> Self {
        AdapterRegistry {
            group_map_digest,
            sets: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, set: LoraAdapterSet<T>) {
        self.sets.insert(set.group_id, set);
    }

    pub fn get(&self, group_id: usize) -> Result<&LoraAdapterSet<T>> {
        self.sets.get(&group_id).ok_or(Error::MissingAdapter(group_id))
    }

    /// A registry is complete when it holds one set per group id in [0, k).
    pub fn is_complete(&self, k: usize) -> bool {
        (0..k).all(|g| self.sets.contains_key(&g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 16,
            context_length: 32,
            seed: 1,
        }
    }

    #[test]
    fn fresh_set_has_zero_b_and_seeded_a() {
        let lora = LoraConfig::default();
        let s1: LoraAdapterSet<f32> = init_adapter_set(&tiny_config(), lora, 0, 42).unwrap();
        let s2: LoraAdapterSet<f32> = init_adapter_set(&tiny_config(), lora, 0, 42).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.adapters.len(), 4);
        for ad in &s1.adapters {
            assert!(ad.b.data.iter().all(|&v| v == 0.0));
            assert!(ad.a.data.iter().any(|&v| v != 0.0));
            assert_eq!(ad.a.rows, 8);
            assert_eq!(ad.a.cols, 8);
        }
    }

    #[test]
    fn spec_shapes_at_production_size() {
        let cfg = ModelConfig::default();
        let set: LoraAdapterSet<f32> = init_adapter_set(&cfg, LoraConfig::default(), 0, 7).unwrap();
        let ad = set.q_adapter(0);
        assert_eq!((ad.a.rows, ad.a.cols), (8, 128));
        assert_eq!((ad.b.rows, ad.b.cols), (128, 8));
    }

    #[test]
    fn rank_larger_than_width_rejected() {
        let lora = LoraConfig {
            rank: 16,
            ..Default::default()
        };
        let res: Result<LoraAdapterSet<f32>> = init_adapter_set(&tiny_config(), lora, 0, 1);
        assert!(matches!(res, Err(Error::RankTooLarge { .. })));
    }

    #[test]
    fn zero_b_projection_equals_base() {
        let lora = LoraConfig::default();
        let set: LoraAdapterSet<f64> = init_adapter_set(&tiny_config(), lora, 0, 3).unwrap();
        let mut rng = Rng::new(4);
        let w = Mat::from_rows(8, 8, (0..64).map(|i| i as f64 * 0.1 - 3.0).collect());
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.25).collect();
        let y = adapted_projection(&w, set.q_adapter(0), &lora, &x, false, &mut rng);
        let mut base = vec![0.0; 8];
        for (i, &xi) in x.iter().enumerate() {
            for o in 0..8 {
                base[o] += xi * w.at(i, o);
            }
        }
        assert_eq!(y, base);
    }

    #[test]
    fn hand_sized_adapted_projection() {
        // W = [[1,0],[0,1]] (input-major), A = [[1,1]], B = [[2],[0]],
        // alpha = r = 1 so scale 1; x = [3, 4].
        // Wx = [3,4]; u = A x = 7; delta = B u = [14, 0]; y = [17, 4].
        let w = Mat::from_rows(2, 2, vec![1.0f64, 0.0, 0.0, 1.0]);
        let adapter = LoraAdapter {
            target: "layers.0.q_proj".into(),
            a: Mat::from_rows(1, 2, vec![1.0, 1.0]),
            b: Mat::from_rows(2, 1, vec![2.0, 0.0]),
        };
        let cfg = LoraConfig {
            rank: 1,
            alpha: 1.0,
            dropout_p: 0.0,
        };
        let mut rng = Rng::new(0);
        let y = adapted_projection(&w, &adapter, &cfg, &[3.0, 4.0], false, &mut rng);
        assert_eq!(y, vec![17.0, 4.0]);
    }

    #[test]
    fn alpha_equal_rank_means_unit_scale() {
        let cfg = LoraConfig {
            rank: 4,
            alpha: 4.0,
            dropout_p: 0.0,
        };
        assert_eq!(cfg.scaling(), 1.0);
    }

    #[test]
    fn merge_then_subtract_recovers_base() {
        let lora = LoraConfig::default();
        let mut set: LoraAdapterSet<f64> = init_adapter_set(&tiny_config(), lora, 0, 9).unwrap();
        let mut rng = Rng::new(10);
        for v in set.adapters[0].b.data.iter_mut() {
            *v = rng.gauss() * 0.1;
        }
        let w = Mat::from_rows(8, 8, (0..64).map(|_| rng.gauss()).collect());
        let merged = merge_adapter(&w, &set.adapters[0], &lora);
        // Subtract the delta again.
        let neg = LoraAdapter {
            target: set.adapters[0].target.clone(),
            a: set.adapters[0].a.clone(),
            b: Mat {
                rows: set.adapters[0].b.rows,
                cols: set.adapters[0].b.cols,
                data: set.adapters[0].b.data.iter().map(|v| -v).collect(),
            },
        };
        let recovered = merge_adapter(&merged, &neg, &lora);
        for (a, b) in recovered.data.iter().zip(w.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let lora = LoraConfig::default();
        let set: LoraAdapterSet<f64> = init_adapter_set(&tiny_config(), lora, 0, 9).unwrap();
        let w = Mat::from_rows(8, 8, (0..64).map(|i| i as f64).collect());
        assert_eq!(merge_adapter(&w, &set.adapters[0], &lora), w);
    }

    #[test]
    fn registry_completeness() {
        let lora = LoraConfig::default();
        let mut reg: AdapterRegistry<f32> = AdapterRegistry::new(0xfeed);
        for g in 0..3 {
            reg.insert(init_adapter_set(&tiny_config(), lora, g, g as u64).unwrap());
        }
        assert!(reg.is_complete(3));
        assert!(!reg.is_complete(4));
        assert!(matches!(reg.get(7), Err(Error::MissingAdapter(7))));
    }
}
