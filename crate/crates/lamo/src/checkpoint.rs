//! Checkpoint container: magic "LAMO", format version, UTF-8 metadata block,
//! then named tensors as (name, dims, row-major f32 little-endian values).
//! Round trips are bitwise exact; adapter checkpoints record the group-map
//! digest they were trained against and refuse to load for inference when it
//! does not match.

use crate::error::{Error, Result};
use crate::lora::{AdapterRegistry, LoraAdapter, LoraAdapterSet, LoraConfig, TrainingMeta};
use crate::math::Mat;
use crate::model::{LayerParams, ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"LAMO";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroupMeta {
    pub group_id: usize,
    pub training: TrainingMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct CheckpointMeta {
    pub kind: String,
    pub model_config: Option<ModelConfig>,
    pub lora_config: Option<LoraConfig>,
    pub group_map_digest: Option<u64>,
    pub config_digest: Option<u64>,
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub groups: Vec<GroupMeta>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(meta: &CheckpointMeta) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta_json = serde_json::to_vec(meta).expect("meta serializes");
        buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta_json);
        Writer { buf }
    }

    fn tensor(&mut self, name: &str, dims: &[usize], values: &[f32]) {
        assert_eq!(dims.iter().product::<usize>(), values.len());
        self.buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(dims.len() as u8);
        for &d in dims {
            self.buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(self, count: u64, path: &Path) -> Result<()> {
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        // Tensor count sits right after the metadata block; splice it in.
        let meta_end = 4 + 4 + 8 + {
            let len_bytes: [u8; 8] = self.buf[8..16].try_into().unwrap();
            u64::from_le_bytes(len_bytes) as usize
        };
        file.write_all(&self.buf[..meta_end])
            .and_then(|_| file.write_all(&count.to_le_bytes()))
            .and_then(|_| file.write_all(&self.buf[meta_end..]))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
    path: String,
}

impl Reader {
    fn open(path: &Path) -> Result<(Self, CheckpointMeta, u64)> {
        let data =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Reader {
            data,
            pos: 0,
            path: path.display().to_string(),
        };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(r.corrupt(&format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let meta_bytes = r.take(meta_len)?.to_vec();
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Checkpoint {
                path: r.path.clone(),
                reason: format!("bad metadata: {e}"),
            })?;
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        Ok((r, meta, count))
    }

    fn corrupt(&self, reason: &str) -> Error {
        Error::Checkpoint {
            path: self.path.clone(),
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint {
                path: self.path.clone(),
                reason: format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.data.len()
                ),
            });
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| self.corrupt("tensor name not utf-8"))?;
        let ndims = self.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize);
        }
        let count: usize = dims.iter().product();
        let bytes = self.take(count * 4)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, dims, values))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

pub fn save_base_model(model: &ModelParams<f32>, mut meta: CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    meta.kind = "base_model".into();
    meta.model_config = Some(model.config);
    let mut w = Writer::new(&meta);
    let tensors = model.named_tensors();
    let count = tensors.len() as u64;
    for (name, dims, values) in tensors {
        w.tensor(&name, &dims, values);
    }
    w.finish(count, path.as_ref())
}

pub fn load_base_model(path: impl AsRef<Path>) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let path = path.as_ref();
    let (mut r, meta, count) = Reader::open(path)?;
    let config = meta
        .model_config
        .ok_or_else(|| r.corrupt("base model checkpoint without model config"))?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let (name, dims, values) = r.tensor()?;
        tensors.insert(name, (dims, values));
    }
    if !r.done() {
        return Err(r.corrupt("trailing bytes"));
    }
    let mut take_mat = |name: &str| -> Result<Mat<f32>> {
        let (dims, values) = tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint {
                path: path.display().to_string(),
                reason: format!("missing tensor {name}"),
            })?;
        Ok(Mat::from_rows(dims[0], dims[1], values))
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerParams {
            attn_norm: Vec::new(),
            q_proj: take_mat(&format!("layers.{i}.q_proj"))?,
            k_proj: take_mat(&format!("layers.{i}.k_proj"))?,
            v_proj: take_mat(&format!("layers.{i}.v_proj"))?,
            o_proj: take_mat(&format!("layers.{i}.o_proj"))?,
            ffn_norm: Vec::new(),
            ffn_in: take_mat(&format!("layers.{i}.ffn_in"))?,
            ffn_out: take_mat(&format!("layers.{i}.ffn_out"))?,
        });
    }
    let mut model = ModelParams {
        config,
        embed: take_mat("embed")?,
        pos_embed: take_mat("pos_embed")?,
        layers,
        final_norm: Vec::new(),
        lm_head: take_mat("lm_head")?,
    };
    let mut take_vec = |name: &str| -> Result<Vec<f32>> {
        tensors
            .remove(name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Checkpoint {
                path: path.display().to_string(),
                reason: format!("missing tensor {name}"),
            })
    };
    for i in 0..config.n_layers {
        model.layers[i].attn_norm = take_vec(&format!("layers.{i}.attn_norm"))?;
        model.layers[i].ffn_norm = take_vec(&format!("layers.{i}.ffn_norm"))?;
    }
    model.final_norm = take_vec("final_norm")?;
    Ok((model, meta))
}

pub fn save_registry(
    registry: &AdapterRegistry<f32>,
    lora_config: LoraConfig,
    mut meta: CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    meta.kind = "adapter_registry".into();
    meta.lora_config = Some(lora_config);
    meta.group_map_digest = Some(registry.group_map_digest);
    meta.groups = registry
        .sets
        .values()
        .map(|s| GroupMeta {
            group_id: s.group_id,
            training: s.meta,
        })
        .collect();
    let mut w = Writer::new(&meta);
    let mut count = 0u64;
    for set in registry.sets.values() {
        for adapter in &set.adapters {
            let prefix = format!("group.{}.{}", set.group_id, adapter.target);
            w.tensor(&format!("{prefix}.a"), &[adapter.a.rows, adapter.a.cols], &adapter.a.data);
            w.tensor(&format!("{prefix}.b"), &[adapter.b.rows, adapter.b.cols], &adapter.b.data);
            count += 2;
        }
    }
    w.finish(count, path.as_ref())
}

/// Loads an adapter registry. When `expected_group_map_digest` is given, a
/// mismatch is refused outright.
pub fn load_registry(
    path: impl AsRef<Path>,
    expected_group_map_digest: Option<u64>,
) -> Result<(AdapterRegistry<f32>, CheckpointMeta)> {
    let path = path.as_ref();
    let (mut r, meta, count) = Reader::open(path)?;
    let digest = meta
        .group_map_digest
        .ok_or_else(|| r.corrupt("registry checkpoint without group map digest"))?;
    if let Some(expected) = expected_group_map_digest {
        if expected != digest {
            return Err(Error::GroupMapDigestMismatch {
                expected,
                found: digest,
            });
        }
    }
    let lora = meta
        .lora_config
        .ok_or_else(|| r.corrupt("registry checkpoint without lora config"))?;
    let mut registry = AdapterRegistry::new(digest);
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let (name, dims, values) = r.tensor()?;
        tensors.insert(name, (dims, values));
    }
    if !r.done() {
        return Err(r.corrupt("trailing bytes"));
    }
    for gm in &meta.groups {
        let gid = gm.group_id;
        let mut adapters = Vec::new();
        let prefix = format!("group.{gid}.");
        let targets: Vec<String> = tensors
            .keys()
            .filter(|k| k.starts_with(&prefix) && k.ends_with(".a"))
            .map(|k| k[prefix.len()..k.len() - 2].to_string())
            .collect();
        // Restore layer order: layers.{i}.{q,v}_proj sorted by layer then role.
        let mut ordered = targets.clone();
        ordered.sort_by_key(|t| {
            let layer: usize = t
                .trim_start_matches("layers.")
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(usize::MAX);
            let role = if t.ends_with("q_proj") { 0 } else { 1 };
            (layer, role)
        });
        for target in ordered {
            let a = tensors
                .remove(&format!("{prefix}{target}.a"))
                .ok_or_else(|| Error::Checkpoint {
                    path: path.display().to_string(),
                    reason: format!("missing tensor {prefix}{target}.a"),
                })?;
            let b = tensors
                .remove(&format!("{prefix}{target}.b"))
                .ok_or_else(|| Error::Checkpoint {
                    path: path.display().to_string(),
                    reason: format!("missing tensor {prefix}{target}.b"),
                })?;
            adapters.push(LoraAdapter {
                target,
                a: Mat::from_rows(a.0[0], a.0[1], a.1),
                b: Mat::from_rows(b.0[0], b.0[1], b.1),
            });
        }
        registry.insert(LoraAdapterSet {
            group_id: gid,
            config: lora,
            adapters,
            meta: gm.training,
        });
    }
    Ok((registry, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::init_adapter_set;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 32,
            context_length: 64,
            seed: 3,
        }
    }

    #[test]
    fn base_model_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let model: ModelParams<f32> = ModelParams::init(tiny_config()).unwrap();
        save_base_model(&model, CheckpointMeta::default(), &path).unwrap();
        let (loaded, meta) = load_base_model(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(meta.kind, "base_model");
        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("base2.ckpt");
        save_base_model(&loaded, CheckpointMeta::default(), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn registry_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.ckpt");
        let lora = LoraConfig::default();
        let mut registry = AdapterRegistry::new(0xabcd);
        for g in 0..3usize {
            let mut set = init_adapter_set::<f32>(&tiny_config(), lora, g, g as u64).unwrap();
            set.meta.best_f1 = 0.5 + g as f64 * 0.1;
            set.adapters[0].b.data[5] = 0.25;
            registry.insert(set);
        }
        save_registry(&registry, lora, CheckpointMeta::default(), &path).unwrap();
        let (loaded, _) = load_registry(&path, Some(0xabcd)).unwrap();
        assert_eq!(loaded, registry);
    }

    #[test]
    fn truncated_file_is_rejected_without_partial_object() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let model: ModelParams<f32> = ModelParams::init(tiny_config()).unwrap();
        save_base_model(&model, CheckpointMeta::default(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_base_model(&path),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn digest_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.ckpt");
        let lora = LoraConfig::default();
        let mut registry = AdapterRegistry::new(111);
        registry.insert(init_adapter_set::<f32>(&tiny_config(), lora, 0, 1).unwrap());
        save_registry(&registry, lora, CheckpointMeta::default(), &path).unwrap();
        assert!(matches!(
            load_registry(&path, Some(222)),
            Err(Error::GroupMapDigestMismatch { expected: 222, found: 111 })
        ));
        assert!(load_registry(&path, Some(111)).is_ok());
        assert!(load_registry(&path, None).is_ok());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE whatever").unwrap();
        assert!(matches!(load_base_model(&path), Err(Error::Checkpoint { .. })));
    }
}
