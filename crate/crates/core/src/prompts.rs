//! Trainable prompt parameters and their pruning masks.
//!
//! Every layer owns `M` visual prompt tokens (`[M, d]`) and `M_kv` key-value
//! prompt columns stored at full width (`[M_kv, d]`) and split across heads
//! when attention runs. With `kv_shared` the key and value prompt are one
//! tensor. Masks are binary and live host-side; the forward pass turns them
//! into tensors, or into differentiable probes during importance scoring.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PromptConfig};
use crate::error::{Error, Result};
use crate::tensor::{derive_rng, Scalar, Tensor};

/// How far a prompt set has progressed through cascade pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneStage {
    #[default]
    Dense,
    TokenPruned,
    SegmentPruned,
}

#[derive(Debug, Clone)]
pub struct KvPrompt<T: Scalar> {
    pub key: Tensor<T>,
    pub value: Tensor<T>,
}

impl<T: Scalar> KvPrompt<T> {
    pub fn is_shared(&self) -> bool {
        self.key.same_storage(&self.value)
    }

    pub fn len(&self) -> usize {
        self.key.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct LayerPrompts<T: Scalar> {
    /// `[M, d]`, absent when `M = 0`.
    pub visual: Option<Tensor<T>>,
    /// `[M_kv, d]` each, absent when `M_kv = 0`.
    pub kv: Option<KvPrompt<T>>,
    /// ρ per visual token.
    pub token_keep: Vec<bool>,
    /// Segment masks, row-major `[M, R]`.
    pub segment_keep: Vec<bool>,
}

impl<T: Scalar> LayerPrompts<T> {
    pub fn visual_len(&self) -> usize {
        self.token_keep.len()
    }

    /// Whether segment `j` of token `k` still contributes.
    pub fn segment_alive(&self, k: usize, j: usize, segments: usize) -> bool {
        self.token_keep[k] && self.segment_keep[k * segments + j]
    }

    /// True when no mask is zero, so the forward pass can skip masking.
    pub fn all_kept(&self) -> bool {
        self.token_keep.iter().all(|&k| k) && self.segment_keep.iter().all(|&k| k)
    }
}

#[derive(Debug, Clone)]
pub struct PromptSet<T: Scalar> {
    pub config: PromptConfig,
    pub embed_dim: usize,
    pub layers: Vec<LayerPrompts<T>>,
    pub stage: PruneStage,
}

/// A trainable tensor with an optional elementwise update mask.
#[derive(Debug, Clone)]
pub struct TrainableParam<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// 0 where the optimizer must leave the value untouched.
    pub update_mask: Option<Vec<T>>,
}

pub fn visual_name(layer: usize) -> String {
    format!("prompts/visual/{layer}")
}

pub fn kv_name(layer: usize) -> String {
    format!("prompts/kv/{layer}")
}

pub fn mask_name(layer: usize) -> String {
    format!("prompts/mask/{layer}")
}

pub fn segment_mask_name(layer: usize) -> String {
    format!("prompts/segmask/{layer}")
}

/// Deterministic prompt initialisation with every mask set to 1.
pub fn init_prompts<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<PromptSet<T>> {
    let pc = &config.prompt;
    pc.validate(config.embed_dim)?;
    let d = config.embed_dim;
    let mut rng = derive_rng(seed, "prompts");
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let visual = if pc.visual_len > 0 {
            let data = pc.init.sample::<T>(&mut rng, pc.visual_len * d, d);
            Some(Tensor::param(data, &[pc.visual_len, d])?)
        } else {
            None
        };
        let kv = if pc.kv_len > 0 {
            let key = Tensor::param(pc.init.sample::<T>(&mut rng, pc.kv_len * d, d), &[pc.kv_len, d])?;
            let value = if pc.kv_shared {
                key.clone()
            } else {
                Tensor::param(pc.init.sample::<T>(&mut rng, pc.kv_len * d, d), &[pc.kv_len, d])?
            };
            Some(KvPrompt { key, value })
        } else {
            None
        };
        layers.push(LayerPrompts {
            visual,
            kv,
            token_keep: vec![true; pc.visual_len],
            segment_keep: vec![true; pc.visual_len * pc.segments],
        });
    }
    Ok(PromptSet {
        config: pc.clone(),
        embed_dim: d,
        layers,
        stage: PruneStage::Dense,
    })
}

impl<T: Scalar> PromptSet<T> {
    /// A set with no prompts at all.
    pub fn empty(num_layers: usize, embed_dim: usize) -> Self {
        let config = PromptConfig {
            segments: 1,
            ..PromptConfig::default()
        };
        PromptSet {
            config,
            embed_dim,
            layers: (0..num_layers)
                .map(|_| LayerPrompts {
                    visual: None,
                    kv: None,
                    token_keep: Vec::new(),
                    segment_keep: Vec::new(),
                })
                .collect(),
            stage: PruneStage::Dense,
        }
    }

    pub fn visual_len(&self) -> usize {
        self.config.visual_len
    }

    pub fn segments(&self) -> usize {
        self.config.segments
    }

    pub fn segment_width(&self) -> usize {
        self.embed_dim / self.config.segments
    }

    /// Multiplier applied to visual prompt element `(k, c)` of a layer.
    pub fn element_mask(&self, layer: usize) -> Vec<T> {
        let lp = &self.layers[layer];
        let (r, w) = (self.segments(), self.segment_width());
        let mut out = Vec::with_capacity(lp.visual_len() * self.embed_dim);
        for k in 0..lp.visual_len() {
            for c in 0..self.embed_dim {
                out.push(if lp.segment_alive(k, c / w, r) { T::one() } else { T::zero() });
            }
        }
        out
    }

    /// Prompt tensors the optimizer may touch, in a fixed order. Shared KV
    /// prompts appear once.
    pub fn trainable(&self) -> Vec<TrainableParam<T>> {
        let mut out = Vec::new();
        for (l, lp) in self.layers.iter().enumerate() {
            if let Some(v) = &lp.visual {
                let update_mask = (!lp.all_kept()).then(|| self.element_mask(l));
                out.push(TrainableParam {
                    name: visual_name(l),
                    tensor: v.clone(),
                    update_mask,
                });
            }
            if let Some(kv) = &lp.kv {
                if kv.is_shared() {
                    out.push(TrainableParam {
                        name: kv_name(l),
                        tensor: kv.key.clone(),
                        update_mask: None,
                    });
                } else {
                    for (suffix, t) in [("k", &kv.key), ("v", &kv.value)] {
                        out.push(TrainableParam {
                            name: format!("{}/{suffix}", kv_name(l)),
                            tensor: t.clone(),
                            update_mask: None,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn set_trainable(&self, on: bool) {
        for p in self.trainable() {
            p.tensor.set_requires_grad(on);
        }
    }

    /// Visual prompt scalars still alive after pruning.
    pub fn live_visual_params(&self) -> usize {
        let (r, w) = (self.segments(), self.segment_width());
        self.layers
            .iter()
            .map(|lp| {
                (0..lp.visual_len())
                    .map(|k| (0..r).filter(|&j| lp.segment_alive(k, j, r)).count() * w)
                    .sum::<usize>()
            })
            .sum()
    }

    /// Distinct KV prompt scalars.
    pub fn kv_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|lp| lp.kv.as_ref())
            .map(|kv| {
                let n = kv.key.numel();
                if kv.is_shared() {
                    n
                } else {
                    n + kv.value.numel()
                }
            })
            .sum()
    }

    /// Deep copy with fresh storage and the same sharing structure.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let c = Tensor::new(t.to_vec(), t.shape())?;
            c.set_requires_grad(t.requires_grad());
            Ok(c)
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for lp in &self.layers {
            let visual = lp.visual.as_ref().map(copy).transpose()?;
            let kv = match &lp.kv {
                Some(kv) => {
                    let key = copy(&kv.key)?;
                    let value = if kv.is_shared() { key.clone() } else { copy(&kv.value)? };
                    Some(KvPrompt { key, value })
                }
                None => None,
            };
            layers.push(LayerPrompts {
                visual,
                kv,
                token_keep: lp.token_keep.clone(),
                segment_keep: lp.segment_keep.clone(),
            });
        }
        Ok(PromptSet {
            config: self.config.clone(),
            embed_dim: self.embed_dim,
            layers,
            stage: self.stage,
        })
    }

    /// Checks the set against a model configuration.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let d = config.embed_dim;
        if self.layers.len() != config.num_layers || self.embed_dim != d {
            return Err(Error::Config(format!(
                "prompt set has {} layers of width {}, model has {} of width {d}",
                self.layers.len(),
                self.embed_dim,
                config.num_layers
            )));
        }
        let m = self.visual_len();
        for (l, lp) in self.layers.iter().enumerate() {
            let bad = |what: &str| Error::Config(format!("layer {l}: {what}"));
            if lp.token_keep.len() != m || lp.segment_keep.len() != m * self.segments() {
                return Err(bad("mask length disagrees with visual_len"));
            }
            match &lp.visual {
                Some(v) if v.shape() != [m, d] => {
                    return Err(bad(&format!("visual prompt shape {:?}, expected [{m}, {d}]", v.shape())))
                }
                None if m > 0 => return Err(bad("visual prompt missing")),
                _ => {}
            }
            if let Some(kv) = &lp.kv {
                let want = [self.config.kv_len, d];
                if kv.key.shape() != want || kv.value.shape() != want {
                    return Err(bad(&format!(
                        "kv prompt shapes {:?}/{:?}, expected {want:?}",
                        kv.key.shape(),
                        kv.value.shape()
                    )));
                }
            } else if self.config.kv_len > 0 {
                return Err(bad("kv prompt missing"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: usize, mkv: usize, shared: bool) -> ModelConfig {
        let mut c = ModelConfig::tiny(3);
        c.prompt.visual_len = m;
        c.prompt.kv_len = mkv;
        c.prompt.kv_shared = shared;
        c
    }

    #[test]
    fn empty_config_gives_no_parameters() {
        let p = init_prompts::<f64>(&cfg(0, 0, true), 1).unwrap();
        assert!(p.trainable().is_empty());
        assert_eq!(p.live_visual_params() + p.kv_params(), 0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = init_prompts::<f32>(&cfg(4, 2, false), 9).unwrap();
        let b = init_prompts::<f32>(&cfg(4, 2, false), 9).unwrap();
        for (x, y) in a.trainable().iter().zip(b.trainable()) {
            let bits = |t: &Tensor<f32>| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.tensor), bits(&y.tensor));
        }
    }

    #[test]
    fn sharing_aliases_storage_and_halves_count() {
        let shared = init_prompts::<f64>(&cfg(4, 3, true), 0).unwrap();
        let unshared = init_prompts::<f64>(&cfg(4, 3, false), 0).unwrap();
        assert!(shared.layers[0].kv.as_ref().unwrap().is_shared());
        assert!(!unshared.layers[0].kv.as_ref().unwrap().is_shared());
        assert_eq!(unshared.kv_params(), 2 * shared.kv_params());
        assert_eq!(shared.kv_params(), 2 * 3 * 16);
    }

    #[test]
    fn indivisible_segments_fail() {
        let mut c = cfg(2, 0, true);
        c.prompt.segments = 5;
        assert!(matches!(init_prompts::<f64>(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn element_mask_follows_segments() {
        let mut p = init_prompts::<f64>(&cfg(2, 0, true), 0).unwrap();
        // 16 dims, 4 segments of 4
        p.layers[0].segment_keep[1] = false;
        p.layers[0].token_keep[1] = false;
        let m = p.element_mask(0);
        assert_eq!(&m[0..4], &[1.0; 4]);
        assert_eq!(&m[4..8], &[0.0; 4]);
        assert!(m[16..].iter().all(|&v| v == 0.0));
        assert_eq!(p.live_visual_params(), 3 * 4 + 2 * 16);
    }

    #[test]
    fn deep_clone_keeps_sharing_but_not_storage() {
        let p = init_prompts::<f64>(&cfg(1, 2, true), 0).unwrap();
        let q = p.deep_clone().unwrap();
        let (a, b) = (p.layers[0].kv.as_ref().unwrap(), q.layers[0].kv.as_ref().unwrap());
        assert!(b.is_shared());
        assert!(!a.key.same_storage(&b.key));
        assert_eq!(a.key.to_vec(), b.key.to_vec());
    }
}
