//! Checkpoint directories: `manifest.toml` plus one tensor blob per entry.
//!
//! ```text
//! ckpt/
//!   manifest.toml
//!   tensors/backbone.patch.weight.kvt
//!   tensors/prompts.visual.0.kvt
//!   ...
//! ```
//!
//! Tensor names use `/` separators (`prompts/visual/{layer}`,
//! `prompts/kv/{layer}`, `prompts/mask/{layer}`, `prompts/segmask/{layer}`);
//! file names replace them with dots.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompts::{
    kv_name, mask_name, segment_mask_name, visual_name, KvPrompt, LayerPrompts, PromptSet, PruneStage,
};
use crate::tensor::{decode_blob, encode_blob, Precision, Scalar, Tensor};
use crate::vit::{Backbone, EncoderLayer, Head, LayerNorm, Linear};

pub const FORMAT: &str = "kvprompt-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Tensor values detached from any graph. Values are held as `f64`, which
/// represents `f32` data exactly, so the store is `Send` and lossless.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    pub tensors: BTreeMap<String, StoredTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorStore {
    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(
            name.into(),
            StoredTensor {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Rebuilds a leaf tensor, checking its shape.
    pub fn tensor<T: Scalar>(&self, name: &str, shape: &[usize], trainable: bool) -> Result<Tensor<T>> {
        let s = self.get(name)?;
        if s.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                s.shape
            )));
        }
        let t = Tensor::new(s.data.iter().map(|&v| T::of(v)).collect(), shape)?;
        t.set_requires_grad(trainable);
        Ok(t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn extend(&mut self, other: TensorStore) {
        self.tensors.extend(other.tensors);
    }
}

fn linear_from<T: Scalar>(store: &TensorStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear<T>> {
    Ok(Linear {
        weight: store.tensor(&format!("{name}/weight"), &[fan_in, fan_out], false)?,
        bias: store.tensor(&format!("{name}/bias"), &[fan_out], false)?,
    })
}

fn norm_from<T: Scalar>(store: &TensorStore, name: &str, d: usize) -> Result<LayerNorm<T>> {
    Ok(LayerNorm {
        gamma: store.tensor(&format!("{name}/gamma"), &[d], false)?,
        beta: store.tensor(&format!("{name}/beta"), &[d], false)?,
    })
}

impl<T: Scalar> Backbone<T> {
    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::default();
        for (name, t) in self.named_params() {
            s.insert(name, &t);
        }
        s
    }

    /// Frozen backbone rebuilt from stored values.
    pub fn from_store(config: &ModelConfig, store: &TensorStore) -> Result<Self> {
        config.validate()?;
        let (d, m) = (config.embed_dim, config.num_patches());
        let hidden = config.ffn_hidden();
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = format!("backbone/layers/{i}");
                Ok(EncoderLayer {
                    norm1: norm_from(store, &format!("{p}/norm1"), d)?,
                    query: linear_from(store, &format!("{p}/query"), d, d)?,
                    key: linear_from(store, &format!("{p}/key"), d, d)?,
                    value: linear_from(store, &format!("{p}/value"), d, d)?,
                    proj: linear_from(store, &format!("{p}/proj"), d, d)?,
                    norm2: norm_from(store, &format!("{p}/norm2"), d)?,
                    fc1: linear_from(store, &format!("{p}/fc1"), d, hidden)?,
                    fc2: linear_from(store, &format!("{p}/fc2"), hidden, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            config: config.clone(),
            patch: linear_from(store, "backbone/patch", config.patch_len(), d)?,
            cls: store.tensor("backbone/cls", &[d], false)?,
            pos: store.tensor("backbone/pos", &[1 + m, d], false)?,
            layers,
            norm: norm_from(store, "backbone/norm", d)?,
        })
    }
}

impl<T: Scalar> Head<T> {
    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::default();
        for (name, t) in self.named_params() {
            s.insert(name, &t);
        }
        s
    }

    pub fn from_store(store: &TensorStore, embed_dim: usize) -> Result<Self> {
        let classes = store.get("head/bias")?.shape.first().copied().unwrap_or(0);
        let head = Head {
            linear: linear_from(store, "head", embed_dim, classes)?,
        };
        head.set_trainable(true);
        Ok(head)
    }
}

fn bits<T: Scalar>(keep: &[bool]) -> Vec<T> {
    keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect()
}

fn unbits(name: &str, values: &[f64]) -> Result<Vec<bool>> {
    values
        .iter()
        .map(|&v| match v {
            v if v == 1.0 => Ok(true),
            v if v == 0.0 => Ok(false),
            v => Err(Error::Checkpoint(format!("mask {name} holds {v}, expected 0 or 1"))),
        })
        .collect()
}

impl<T: Scalar> PromptSet<T> {
    pub fn to_store(&self) -> Result<TensorStore> {
        let mut s = TensorStore::default();
        let (m, r) = (self.visual_len(), self.segments());
        for (l, lp) in self.layers.iter().enumerate() {
            if let Some(v) = &lp.visual {
                s.insert(visual_name(l), v);
                s.insert(mask_name(l), &Tensor::<T>::new(bits(&lp.token_keep), &[m])?);
                s.insert(segment_mask_name(l), &Tensor::<T>::new(bits(&lp.segment_keep), &[m, r])?);
            }
            if let Some(kv) = &lp.kv {
                if kv.is_shared() {
                    s.insert(kv_name(l), &kv.key);
                } else {
                    s.insert(format!("{}/k", kv_name(l)), &kv.key);
                    s.insert(format!("{}/v", kv_name(l)), &kv.value);
                }
            }
        }
        Ok(s)
    }

    /// Prompts for `config` rebuilt from stored values. Sharing follows
    /// the stored names, not `config.prompt.kv_shared`.
    pub fn from_store(config: &ModelConfig, store: &TensorStore, stage: PruneStage) -> Result<Self> {
        let pc = &config.prompt;
        pc.validate(config.embed_dim)?;
        let (d, m, mkv, r) = (config.embed_dim, pc.visual_len, pc.kv_len, pc.segments);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let (visual, token_keep, segment_keep) = if m > 0 {
                (
                    Some(store.tensor(&visual_name(l), &[m, d], true)?),
                    unbits(&mask_name(l), &store.tensor::<f64>(&mask_name(l), &[m], false)?.to_vec())?,
                    unbits(
                        &segment_mask_name(l),
                        &store.tensor::<f64>(&segment_mask_name(l), &[m, r], false)?.to_vec(),
                    )?,
                )
            } else {
                (None, Vec::new(), Vec::new())
            };
            let kv = if mkv == 0 {
                None
            } else if store.contains(&kv_name(l)) {
                let key: Tensor<T> = store.tensor(&kv_name(l), &[mkv, d], true)?;
                Some(KvPrompt {
                    value: key.clone(),
                    key,
                })
            } else {
                Some(KvPrompt {
                    key: store.tensor(&format!("{}/k", kv_name(l)), &[mkv, d], true)?,
                    value: store.tensor(&format!("{}/v", kv_name(l)), &[mkv, d], true)?,
                })
            };
            layers.push(LayerPrompts {
                visual,
                kv,
                token_keep,
                segment_keep,
            });
        }
        let mut config_out = pc.clone();
        config_out.kv_shared = layers
            .first()
            .and_then(|lp: &LayerPrompts<T>| lp.kv.as_ref())
            .map_or(pc.kv_shared, |kv| kv.is_shared());
        Ok(PromptSet {
            config: config_out,
            embed_dim: d,
            layers,
            stage,
        })
    }
}

/// Pipeline step that produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Prune,
    Rewind,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Prune => "prune",
            Stage::Rewind => "rewind",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    stage: Stage,
    precision: Precision,
    prune_stage: PruneStage,
    model: ModelConfig,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Serialized model plus the facts needed to resume the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub precision: Precision,
    pub prune_stage: PruneStage,
    pub model: ModelConfig,
    pub metadata: BTreeMap<String, String>,
    pub tensors: TensorStore,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, stage: Stage) -> Result<Self> {
        let mut tensors = model.backbone.to_store();
        tensors.extend(model.prompts.to_store()?);
        tensors.extend(model.head.to_store());
        Ok(Checkpoint {
            stage,
            precision: T::PRECISION,
            prune_stage: model.prompts.stage,
            model: model.config().clone(),
            metadata: BTreeMap::new(),
            tensors,
        })
    }

    pub fn backbone<T: Scalar>(&self) -> Result<Backbone<T>> {
        Backbone::from_store(&self.model, &self.tensors)
    }

    /// Full model with backbone frozen and prompts and head trainable.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let backbone = self.backbone()?;
        let prompts = PromptSet::from_store(&self.model, &self.tensors, self.prune_stage)?;
        let head = Head::from_store(&self.tensors, self.model.embed_dim)?;
        let model = Model {
            backbone,
            prompts,
            head,
        };
        model.freeze_backbone();
        Ok(model)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let tdir = dir.join("tensors");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        let mut entries = Vec::with_capacity(self.tensors.tensors.len());
        for (name, t) in &self.tensors.tensors {
            let file = format!("tensors/{}.kvt", name.replace('/', "."));
            let blob = match self.precision {
                Precision::F32 => encode_blob(&t.shape, &t.data.iter().map(|&v| v as f32).collect::<Vec<_>>()),
                Precision::F64 => encode_blob(&t.shape, &t.data),
            };
            let path = dir.join(&file);
            fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;
            entries.push(TensorEntry {
                name: name.clone(),
                file,
                shape: t.shape.clone(),
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            stage: self.stage,
            precision: self.precision,
            prune_stage: self.prune_stage,
            model: self.model.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let path = dir.join("manifest.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut tensors = TensorStore::default();
        for e in &manifest.tensors {
            let p = dir.join(&e.file);
            let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
            let (shape, data) = decode_blob::<f64>(&bytes)?;
            if shape != e.shape {
                return Err(Error::Checkpoint(format!(
                    "{} stores shape {shape:?}, manifest says {:?}",
                    e.file, e.shape
                )));
            }
            tensors.tensors.insert(e.name.clone(), StoredTensor { shape, data });
        }
        Ok(Checkpoint {
            stage: manifest.stage,
            precision: manifest.precision,
            prune_stage: manifest.prune_stage,
            model: manifest.model,
            metadata: manifest.metadata,
            tensors,
        })
    }
}
