//! Pre-LN Vision Transformer encoder with hooks for prompts.

use sha2::{Digest, Sha256};

use crate::config::{KvPlacement, ModelConfig};
use crate::error::{Error, Result};
use crate::prompts::KvPrompt;
use crate::tensor::{concat, derive_rng, truncated_normal, Scalar, SeededRng, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Affine map over the last axis, `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// LeCun-normal weights, zero bias.
    pub fn init(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            weight: Tensor::param(truncated_normal(rng, fan_in * fan_out, std), &[fan_in, fan_out])?,
            bias: Tensor::param(vec![T::zero(); fan_out], &[fan_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, &self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn init(d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Tensor::param(vec![T::one(); d], &[d])?,
            beta: Tensor::param(vec![T::zero(); d], &[d])?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Per-call attention settings.
#[derive(Debug, Clone, Copy)]
pub struct AttentionShape {
    pub heads: usize,
    pub divisor: f64,
}

impl AttentionShape {
    pub fn of(config: &ModelConfig) -> Self {
        AttentionShape {
            heads: config.num_heads,
            divisor: config.attention_divisor(),
        }
    }
}

/// Prompt material entering one attention block.
#[derive(Debug, Clone, Default)]
pub struct AttentionPrompt<'a, T: Scalar> {
    pub kv: Option<&'a KvPrompt<T>>,
    pub placement: KvPlacement,
    /// Multiplicative weight per key column over the layer's own tokens,
    /// `[groups, s]`; the batch is split into `groups` equal blocks.
    pub token_gate: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<T: Scalar> {
    /// `[B, s, d]`
    pub out: Tensor<T>,
    /// `[B·H, s, s + M_kv]`, key columns in concatenation order.
    pub weights: Tensor<T>,
}

fn split_heads<T: Scalar>(x: &Tensor<T>, b: usize, s: usize, h: usize) -> Result<Tensor<T>> {
    let dh = x.shape()[2] / h;
    x.reshape(&[b, s, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, s, dh])
}

fn merge_heads<T: Scalar>(x: &Tensor<T>, b: usize, s: usize, h: usize) -> Result<Tensor<T>> {
    let dh = x.shape()[2];
    x.reshape(&[b, h, s, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b, s, h * dh])
}

/// `[M_kv, d]` prompt to `[B·H, M_kv, dh]`.
fn split_prompt<T: Scalar>(p: &Tensor<T>, b: usize, h: usize) -> Result<Tensor<T>> {
    let (m, d) = (p.shape()[0], p.shape()[1]);
    let dh = d / h;
    p.reshape(&[1, m, h, dh])?
        .permute(&[0, 2, 1, 3])?
        .broadcast_to(&[b, h, m, dh])?
        .reshape(&[b * h, m, dh])
}

fn place<T: Scalar>(own: &Tensor<T>, prompt: &Tensor<T>, placement: KvPlacement) -> Result<Tensor<T>> {
    match placement {
        KvPlacement::Before => concat(&[prompt, own], 1),
        KvPlacement::After => concat(&[own, prompt], 1),
    }
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn init(rng: &mut SeededRng, d: usize, hidden: usize) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::init(d)?,
            query: Linear::init(rng, d, d)?,
            key: Linear::init(rng, d, d)?,
            value: Linear::init(rng, d, d)?,
            proj: Linear::init(rng, d, d)?,
            norm2: LayerNorm::init(d)?,
            fc1: Linear::init(rng, d, hidden)?,
            fc2: Linear::init(rng, hidden, d)?,
        })
    }

    /// Multi-head self-attention on `z: [B, s, d]`. Queries come from `z`
    /// only; keys and values are extended by the KV prompt, so the output
    /// keeps shape `[B, s, d]` for any prompt length.
    pub fn msa_forward(
        &self,
        z: &Tensor<T>,
        shape: AttentionShape,
        prompt: &AttentionPrompt<'_, T>,
    ) -> Result<AttentionOutput<T>> {
        if z.rank() != 3 {
            return Err(Error::shape("msa_forward", format!("expected [B, s, d], got {:?}", z.shape())));
        }
        let (b, s, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let h = shape.heads;
        let q = split_heads(&self.query.forward(z)?, b, s, h)?;
        let mut k = split_heads(&self.key.forward(z)?, b, s, h)?;
        let mut v = split_heads(&self.value.forward(z)?, b, s, h)?;
        let mut gate = prompt.token_gate.clone();
        if let Some(kv) = prompt.kv.filter(|kv| !kv.is_empty()) {
            for t in [&kv.key, &kv.value] {
                if t.rank() != 2 || t.shape()[1] != d {
                    return Err(Error::shape(
                        "msa_forward",
                        format!("kv prompt {:?} does not match width {d}", t.shape()),
                    ));
                }
            }
            let mkv = kv.len();
            if kv.value.shape()[0] != mkv {
                return Err(Error::shape("msa_forward", "key and value prompts differ in length"));
            }
            let pk = split_prompt(&kv.key, b, h)?;
            let pv = if kv.is_shared() { pk.clone() } else { split_prompt(&kv.value, b, h)? };
            k = place(&k, &pk, prompt.placement)?;
            v = place(&v, &pv, prompt.placement)?;
            if let Some(g) = gate {
                let ones = Tensor::ones(&[g.shape()[0], mkv]);
                gate = Some(place(&g, &ones, prompt.placement)?);
            }
        }
        let scores = q.bmm_nt(&k)?.scale(1.0 / shape.divisor)?;
        let weights = match &gate {
            Some(g) => scores.softmax_rows_gated(g)?,
            None => scores.softmax_rows()?,
        };
        let ctx = merge_heads(&weights.bmm(&v)?, b, s, h)?;
        Ok(AttentionOutput {
            out: self.proj.forward(&ctx)?,
            weights,
        })
    }

    /// `z + MSA(LN(z))` followed by `+ FFN(LN(·))`.
    pub fn forward(
        &self,
        z: &Tensor<T>,
        shape: AttentionShape,
        prompt: &AttentionPrompt<'_, T>,
    ) -> Result<AttentionOutput<T>> {
        let attn = self.msa_forward(&self.norm1.forward(z)?, shape, prompt)?;
        let z = z.add(&attn.out)?;
        let hidden = self.fc1.forward(&self.norm2.forward(&z)?)?.gelu()?;
        Ok(AttentionOutput {
            out: z.add(&self.fc2.forward(&hidden)?)?,
            weights: attn.weights,
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("norm1/gamma", &self.norm1.gamma),
            ("norm1/beta", &self.norm1.beta),
            ("query/weight", &self.query.weight),
            ("query/bias", &self.query.bias),
            ("key/weight", &self.key.weight),
            ("key/bias", &self.key.bias),
            ("value/weight", &self.value.weight),
            ("value/bias", &self.value.bias),
            ("proj/weight", &self.proj.weight),
            ("proj/bias", &self.proj.bias),
            ("norm2/gamma", &self.norm2.gamma),
            ("norm2/beta", &self.norm2.beta),
            ("fc1/weight", &self.fc1.weight),
            ("fc1/bias", &self.fc1.bias),
            ("fc2/weight", &self.fc2.weight),
            ("fc2/bias", &self.fc2.bias),
        ]
    }
}

/// Frozen part of the model: everything except the classification head.
#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar> {
    pub config: ModelConfig,
    pub patch: Linear<T>,
    /// `[d]`
    pub cls: Tensor<T>,
    /// `[1 + m, d]`, CLS first. Prompt slots get none.
    pub pos: Tensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub norm: LayerNorm<T>,
}

/// Linear classifier on the final CLS embedding.
#[derive(Debug, Clone)]
pub struct Head<T: Scalar> {
    pub linear: Linear<T>,
}

impl<T: Scalar> Head<T> {
    pub fn init(embed_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = derive_rng(seed, "head");
        Ok(Head {
            linear: Linear::init(&mut rng, embed_dim, num_classes)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.linear.bias.numel()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("head/weight".into(), self.linear.weight.clone()),
            ("head/bias".into(), self.linear.bias.clone()),
        ]
    }

    pub fn numel(&self) -> usize {
        self.linear.weight.numel() + self.linear.bias.numel()
    }

    pub fn set_trainable(&self, on: bool) {
        self.linear.weight.set_requires_grad(on);
        self.linear.bias.set_requires_grad(on);
    }

    /// `[B, d]` to logits `[B, C]`.
    pub fn forward(&self, cls: &Tensor<T>) -> Result<Tensor<T>> {
        self.linear.forward(cls)
    }
}

/// Rearranges `[B, C, H, W]` images into `[B, m, C·p·p]` patch rows. Patches
/// are ordered row-major over the grid, entries within a patch by
/// (channel, row, column).
pub fn patchify<T: Scalar>(config: &ModelConfig, images: &[T], batch: usize) -> Result<Tensor<T>> {
    let (c, side, p) = (config.channels, config.image_size, config.patch_size);
    let per = c * side * side;
    if images.len() != batch * per {
        return Err(Error::shape(
            "patchify",
            format!(
                "{} values for {batch} images of [{c}, {side}, {side}]",
                images.len()
            ),
        ));
    }
    let grid = side / p;
    let mut out = Vec::with_capacity(images.len());
    for img in images.chunks_exact(per) {
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for y in 0..p {
                        let row = ch * side * side + (gy * p + y) * side + gx * p;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(out, &[batch, grid * grid, c * p * p])
}

impl<T: Scalar> Backbone<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let m = config.num_patches();
        let mut rng = derive_rng(seed, "backbone");
        let patch = Linear::init(&mut rng, config.patch_len(), d)?;
        let cls = Tensor::param(truncated_normal(&mut rng, d, 0.02), &[d])?;
        let pos = Tensor::param(truncated_normal(&mut rng, (1 + m) * d, 0.02), &[1 + m, d])?;
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::init(&mut rng, d, config.ffn_hidden()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            config: config.clone(),
            patch,
            cls,
            pos,
            layers,
            norm: LayerNorm::init(d)?,
        })
    }

    /// Every backbone tensor under a stable name, in serialization order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = vec![
            ("backbone/patch/weight".into(), self.patch.weight.clone()),
            ("backbone/patch/bias".into(), self.patch.bias.clone()),
            ("backbone/cls".into(), self.cls.clone()),
            ("backbone/pos".into(), self.pos.clone()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.params() {
                out.push((format!("backbone/layers/{i}/{name}"), t.clone()));
            }
        }
        out.push(("backbone/norm/gamma".into(), self.norm.gamma.clone()));
        out.push(("backbone/norm/beta".into(), self.norm.beta.clone()));
        out
    }

    pub fn numel(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_trainable(&self, on: bool) {
        for (_, t) in self.named_params() {
            t.set_requires_grad(on);
        }
    }

    /// Canonical byte image of all backbone values (names, shapes, data).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in self.named_params() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&crate::tensor::encode_blob(t.shape(), &t.data()));
        }
        out
    }

    /// SHA-256 of [`Backbone::to_bytes`], hex encoded.
    pub fn checksum(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// `[B, m, C·p·p]` patches to `[B, 1 + m, d]` tokens: CLS first,
    /// positional embeddings added.
    pub fn patch_embed(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, pl, d) = (self.config.num_patches(), self.config.patch_len(), self.config.embed_dim);
        if patches.rank() != 3 || patches.shape()[1..] != [m, pl] {
            return Err(Error::shape(
                "patch_embed",
                format!("expected [B, {m}, {pl}] patches, got {:?}", patches.shape()),
            ));
        }
        let b = patches.shape()[0];
        let tokens = self.patch.forward(patches)?;
        let cls = self.cls.reshape(&[1, 1, d])?.broadcast_to(&[b, 1, d])?;
        concat(&[&cls, &tokens], 1)?.add_broadcast(&self.pos)
    }

    /// Single image `[C, H, W]` to `[1 + m, d]`.
    pub fn embed_image(&self, image: &[T]) -> Result<Tensor<T>> {
        let patches = patchify(&self.config, image, 1)?;
        let z = self.patch_embed(&patches)?;
        let s = z.shape()[1];
        z.reshape(&[s, self.config.embed_dim])
    }

    /// Final LayerNorm, then the CLS row: `[B, s, d]` to `[B, d]`.
    pub fn cls_embedding(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, d) = (z.shape()[0], z.shape()[2]);
        self.norm.forward(&z.slice(1, 0, 1)?)?.reshape(&[b, d])
    }

    /// Reference ViT without any prompt machinery.
    pub fn forward_plain(&self, patches: &Tensor<T>, head: &Head<T>) -> Result<Tensor<T>> {
        let shape = AttentionShape::of(&self.config);
        let mut z = self.patch_embed(patches)?;
        for layer in &self.layers {
            z = layer.forward(&z, shape, &AttentionPrompt::default())?.out;
        }
        head.forward(&self.cls_embedding(&z)?)
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let c = Tensor::new(t.to_vec(), t.shape())?;
            c.set_requires_grad(t.requires_grad());
            Ok(c)
        };
        let lin = |l: &Linear<T>| -> Result<Linear<T>> {
            Ok(Linear {
                weight: copy(&l.weight)?,
                bias: copy(&l.bias)?,
            })
        };
        let ln = |l: &LayerNorm<T>| -> Result<LayerNorm<T>> {
            Ok(LayerNorm {
                gamma: copy(&l.gamma)?,
                beta: copy(&l.beta)?,
            })
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(EncoderLayer {
                    norm1: ln(&l.norm1)?,
                    query: lin(&l.query)?,
                    key: lin(&l.key)?,
                    value: lin(&l.value)?,
                    proj: lin(&l.proj)?,
                    norm2: ln(&l.norm2)?,
                    fc1: lin(&l.fc1)?,
                    fc2: lin(&l.fc2)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            config: self.config.clone(),
            patch: lin(&self.patch)?,
            cls: copy(&self.cls)?,
            pos: copy(&self.pos)?,
            layers,
            norm: ln(&self.norm)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::tiny(3)
    }

    fn image(config: &ModelConfig, seed: u64) -> Vec<f64> {
        let n = config.channels * config.image_size * config.image_size;
        (0..n).map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin()).collect()
    }

    #[test]
    fn patch_embed_shape() {
        let c = tiny();
        let bb = Backbone::<f64>::init(&c, 0).unwrap();
        let z = bb.embed_image(&image(&c, 1)).unwrap();
        assert_eq!(z.shape(), &[5, 16]);
    }

    #[test]
    fn zero_image_embeds_to_cls_pos_and_bias() {
        let c = tiny();
        let bb = Backbone::<f64>::init(&c, 3).unwrap();
        bb.patch.bias.update_data(|b| b.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1));
        let z = bb.embed_image(&vec![0.0; 64]).unwrap().to_vec();
        let (pos, cls, bias) = (bb.pos.to_vec(), bb.cls.to_vec(), bb.patch.bias.to_vec());
        for t in 0..5 {
            for j in 0..16 {
                let extra = if t == 0 { cls[j] } else { bias[j] };
                assert_eq!(z[t * 16 + j], pos[t * 16 + j] + extra);
            }
        }
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let mut c = tiny();
        c.channels = 2;
        let img: Vec<f64> = (0..128).map(|i| i as f64).collect();
        let p = patchify(&c, &img, 1).unwrap();
        assert_eq!(p.shape(), &[1, 4, 32]);
        let v = p.to_vec();
        // patch 1 is the top-right block: channel 0 row 0 starts at column 4
        assert_eq!(&v[32..36], &[4.0, 5.0, 6.0, 7.0]);
        // second channel of patch 0 starts at offset 64
        assert_eq!(v[16], 64.0);
        assert!(patchify(&c, &img[..100], 1).is_err());
    }

    #[test]
    fn residual_passes_through_with_zero_branches() {
        let c = tiny();
        let bb = Backbone::<f64>::init(&c, 0).unwrap();
        let layer = &bb.layers[0];
        for l in [&layer.proj, &layer.fc2] {
            l.weight.update_data(|w| w.fill(0.0));
        }
        let z = bb.patch_embed(&patchify(&c, &image(&c, 2), 1).unwrap()).unwrap();
        let out = layer.forward(&z, AttentionShape::of(&c), &AttentionPrompt::default()).unwrap();
        assert_eq!(out.out.to_vec(), z.to_vec());
    }

    #[test]
    fn hand_computed_single_token_attention() {
        // d = 2, H = 1, s = 1, one KV prompt column
        let mut c = tiny();
        c.embed_dim = 2;
        c.num_heads = 1;
        c.prompt.segments = 1;
        let bb = Backbone::<f64>::init(&c, 0).unwrap();
        let layer = &bb.layers[0];
        let set = |l: &Linear<f64>, w: [f64; 4], b: [f64; 2]| {
            l.weight.assign(&w).unwrap();
            l.bias.assign(&b).unwrap();
        };
        set(&layer.query, [1.0, 0.5, -0.5, 2.0], [0.1, 0.0]);
        set(&layer.key, [0.3, -1.0, 0.7, 0.2], [0.0, 0.2]);
        set(&layer.value, [2.0, 0.0, 1.0, -1.0], [0.0, 0.0]);
        set(&layer.proj, [1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
        let z = Tensor::new(vec![0.4, -0.8], &[1, 1, 2]).unwrap();
        let pk = Tensor::new(vec![1.5, -0.25], &[1, 2]).unwrap();
        let kv = KvPrompt { key: pk.clone(), value: pk };
        let prompt = AttentionPrompt {
            kv: Some(&kv),
            placement: KvPlacement::After,
            token_gate: None,
        };
        let out = layer.msa_forward(&z, AttentionShape::of(&c), &prompt).unwrap();

        let (x0, x1) = (0.4, -0.8);
        let q = [x0 * 1.0 + x1 * -0.5 + 0.1, x0 * 0.5 + x1 * 2.0];
        let k = [x0 * 0.3 + x1 * 0.7, x0 * -1.0 + x1 * 0.2 + 0.2];
        let v = [x0 * 2.0 + x1 * 1.0, x1 * -1.0];
        let p = [1.5, -0.25];
        let sq2 = 2f64.sqrt();
        let s_own = (q[0] * k[0] + q[1] * k[1]) / sq2;
        let s_p = (q[0] * p[0] + q[1] * p[1]) / sq2;
        let a_own = 1.0 / (1.0 + (s_p - s_own).exp());
        let a_p = 1.0 - a_own;
        let want = [a_own * v[0] + a_p * p[0], a_own * v[1] + a_p * p[1]];

        let w = out.weights.to_vec();
        assert_eq!(out.weights.shape(), &[1, 1, 2]);
        assert!((w[0] - a_own).abs() < 1e-12 && (w[1] - a_p).abs() < 1e-12);
        let o = out.out.to_vec();
        assert!((o[0] - want[0]).abs() < 1e-12 && (o[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn kv_prompts_never_change_output_shape() {
        let c = tiny();
        let bb = Backbone::<f64>::init(&c, 0).unwrap();
        let z = bb.patch_embed(&patchify(&c, &image(&c, 1), 1).unwrap()).unwrap();
        for mkv in [1, 5, 10] {
            let t = Tensor::new((0..mkv * 16).map(|i| (i as f64).cos()).collect(), &[mkv, 16]).unwrap();
            let kv = KvPrompt { key: t.clone(), value: t };
            let prompt = AttentionPrompt { kv: Some(&kv), ..Default::default() };
            let out = bb.layers[0].msa_forward(&z, AttentionShape::of(&c), &prompt).unwrap();
            assert_eq!(out.out.shape(), z.shape());
            assert_eq!(out.weights.shape(), &[2, 5, 5 + mkv]);
        }
    }

    #[test]
    fn kv_width_mismatch_is_an_error() {
        let c = tiny();
        let bb = Backbone::<f64>::init(&c, 0).unwrap();
        let z = bb.patch_embed(&patchify(&c, &image(&c, 1), 1).unwrap()).unwrap();
        let t = Tensor::<f64>::zeros(&[2, 8]);
        let kv = KvPrompt { key: t.clone(), value: t };
        let prompt = AttentionPrompt { kv: Some(&kv), ..Default::default() };
        assert!(bb.layers[0].msa_forward(&z, AttentionShape::of(&c), &prompt).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let c = tiny();
        let bb = Backbone::<f32>::init(&c, 0).unwrap();
        let before = bb.checksum();
        assert_eq!(before, Backbone::<f32>::init(&c, 0).unwrap().checksum());
        bb.layers[1].fc1.bias.update_data(|b| b[0] += 1.0);
        assert_ne!(before, bb.checksum());
    }
}
