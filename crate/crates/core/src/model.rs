//! Backbone, prompts and head assembled into one classifier.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::prompts::{init_prompts, PromptSet, TrainableParam};
use crate::tensor::{concat, Scalar, Tensor};
use crate::vit::{patchify, AttentionPrompt, AttentionShape, Backbone, Head};

/// Differentiable stand-ins for the binary masks, one row per example group.
#[derive(Debug, Clone)]
pub struct MaskProbe<T: Scalar> {
    /// Per layer `[G, M]`.
    pub token: Vec<Tensor<T>>,
    /// Per layer `[G, M, R]`.
    pub segment: Vec<Tensor<T>>,
}

impl<T: Scalar> MaskProbe<T> {
    /// Probes seeded from the current binary masks, `groups` copies each,
    /// all requiring gradients.
    pub fn from_masks(prompts: &PromptSet<T>, groups: usize) -> Result<Self> {
        let (m, r) = (prompts.visual_len(), prompts.segments());
        let mut token = Vec::new();
        let mut segment = Vec::new();
        let bit = |b: bool| if b { T::one() } else { T::zero() };
        for lp in &prompts.layers {
            let t: Vec<T> = (0..groups).flat_map(|_| lp.token_keep.iter().map(|&b| bit(b))).collect();
            let s: Vec<T> = (0..groups).flat_map(|_| lp.segment_keep.iter().map(|&b| bit(b))).collect();
            token.push(Tensor::param(t, &[groups, m])?);
            segment.push(Tensor::param(s, &[groups, m, r])?);
        }
        Ok(MaskProbe { token, segment })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a, T: Scalar> {
    pub probe: Option<&'a MaskProbe<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    /// `[B, C]`
    pub logits: Tensor<T>,
    /// Final-normed CLS embedding `[B, d]`.
    pub embedding: Tensor<T>,
    /// Attention weights per layer, `[B·H, s, s + M_kv]`.
    pub attention: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub backbone: Backbone<T>,
    pub prompts: PromptSet<T>,
    pub head: Head<T>,
}

/// Parameter accounting in the style of a tuned/total column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunableCount {
    pub prompt_params: usize,
    pub head_params: usize,
    pub total_backbone: usize,
    /// `(prompt + head) / backbone`, in percent, rounded to 2 decimals.
    pub ratio_percent: f64,
}

impl std::fmt::Display for TunableCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}%", self.ratio_percent)
    }
}

/// Counts live prompt scalars (pruned visual entries excluded, shared KV
/// counted once) plus the head when it is trained.
pub fn count_tunable<T: Scalar>(model: &Model<T>, head_trainable: bool) -> TunableCount {
    let prompt_params = model.prompts.live_visual_params() + model.prompts.kv_params();
    let head_params = if head_trainable { model.head.numel() } else { 0 };
    let total_backbone = model.backbone.numel();
    let raw = 100.0 * (prompt_params + head_params) as f64 / total_backbone as f64;
    TunableCount {
        prompt_params,
        head_params,
        total_backbone,
        ratio_percent: (raw * 100.0).round() / 100.0,
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh prompts and head on top of `backbone`, seeded from `seed`.
    pub fn assemble(backbone: Backbone<T>, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if backbone.config.embed_dim != config.embed_dim || backbone.config.num_layers != config.num_layers {
            return Err(Error::Config("backbone architecture differs from model config".into()));
        }
        let mut backbone = backbone;
        backbone.config.prompt = config.prompt.clone();
        backbone.config.num_classes = config.num_classes;
        backbone.config.attention_scale = config.attention_scale;
        let prompts = init_prompts(config, seed)?;
        let head = Head::init(config.embed_dim, config.num_classes, seed)?;
        Ok(Model { backbone, prompts, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    /// Marks prompts and head trainable, the backbone frozen.
    pub fn freeze_backbone(&self) {
        self.backbone.set_trainable(false);
        self.prompts.set_trainable(true);
        self.head.set_trainable(true);
    }

    /// Prompt tensors then head, with update masks for pruned entries.
    pub fn trainable(&self) -> Vec<TrainableParam<T>> {
        let mut out = self.prompts.trainable();
        for (name, tensor) in self.head.named_params() {
            out.push(TrainableParam {
                name,
                tensor,
                update_mask: None,
            });
        }
        out
    }

    pub fn forward_images(&self, images: &[T], batch: usize) -> Result<Tensor<T>> {
        let patches = patchify(self.config(), images, batch)?;
        Ok(self.forward_with(&patches, &ForwardOptions::default())?.logits)
    }

    /// Logits for `[B, m, C·p·p]` patches.
    pub fn forward(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with(patches, &ForwardOptions::default())?.logits)
    }

    pub fn forward_with(&self, patches: &Tensor<T>, opts: &ForwardOptions<'_, T>) -> Result<ForwardOutput<T>> {
        let config = self.config();
        self.prompts.check(config)?;
        let shape = AttentionShape::of(config);
        let d = config.embed_dim;
        let m = self.prompts.visual_len();
        let patches_per = config.num_patches();
        let mut z = self.backbone.patch_embed(patches)?;
        let b = z.shape()[0];
        if let Some(probe) = opts.probe {
            if probe.token.len() != config.num_layers || probe.segment.len() != config.num_layers {
                return Err(Error::Config("mask probe layer count differs from model".into()));
            }
        }
        let mut attention = Vec::with_capacity(config.num_layers);
        for (l, layer) in self.backbone.layers.iter().enumerate() {
            let lp = &self.prompts.layers[l];
            let mut gate = None;
            if let Some(visual) = &lp.visual {
                let (prompt, token_gate) = self.masked_prompt(l, visual, b, opts.probe)?;
                let cls = z.slice(1, 0, 1)?;
                let tokens = z.slice(1, z.shape()[1] - patches_per, z.shape()[1])?;
                z = concat(&[&cls, &prompt, &tokens], 1)?;
                gate = token_gate
                    .map(|g| {
                        let groups = g.shape()[0];
                        concat(
                            &[&Tensor::ones(&[groups, 1]), &g, &Tensor::ones(&[groups, patches_per])],
                            1,
                        )
                    })
                    .transpose()?;
            }
            debug_assert_eq!(z.shape(), &[b, 1 + m + patches_per, d]);
            let prompt = AttentionPrompt {
                kv: lp.kv.as_ref(),
                placement: self.prompts.config.kv_placement,
                token_gate: gate,
            };
            let out = layer.forward(&z, shape, &prompt)?;
            z = out.out;
            attention.push(out.weights);
        }
        let embedding = self.backbone.cls_embedding(&z)?;
        let logits = self.head.forward(&embedding)?;
        Ok(ForwardOutput {
            logits,
            embedding,
            attention,
        })
    }

    /// Masked visual prompt broadcast to `[B, M, d]`, plus the attention gate
    /// `[G, M]` over prompt columns (`None` when nothing is masked).
    fn masked_prompt(
        &self,
        layer: usize,
        visual: &Tensor<T>,
        b: usize,
        probe: Option<&MaskProbe<T>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let (m, d) = (visual.shape()[0], visual.shape()[1]);
        let r = self.prompts.segments();
        let base = visual.reshape(&[1, m, d])?;
        if let Some(probe) = probe {
            let rho = &probe.token[layer];
            let sigma = &probe.segment[layer];
            let g = rho.shape()[0];
            if rho.shape() != [g, m] || sigma.shape() != [g, m, r] || (g != 1 && g != b) {
                return Err(Error::shape(
                    "mask probe",
                    format!("token {:?} / segment {:?} for batch {b}", rho.shape(), sigma.shape()),
                ));
            }
            let seg = sigma
                .reshape(&[g, m, r, 1])?
                .broadcast_to(&[g, m, r, d / r])?
                .reshape(&[g, m, d])?;
            let tok = rho.reshape(&[g, m, 1])?.broadcast_to(&[g, m, d])?;
            let scaled = base.broadcast_to(&[g, m, d])?.mul(&tok)?.mul(&seg)?;
            return Ok((scaled.broadcast_to(&[b, m, d])?, Some(rho.clone())));
        }
        let lp = &self.prompts.layers[layer];
        if lp.all_kept() {
            return Ok((base.broadcast_to(&[b, m, d])?, None));
        }
        let mask = Tensor::new(self.prompts.element_mask(layer), &[1, m, d])?;
        let rho: Vec<T> = lp
            .token_keep
            .iter()
            .map(|&k| if k { T::one() } else { T::zero() })
            .collect();
        let gate = Tensor::new(rho, &[1, m])?;
        Ok((base.mul(&mask)?.broadcast_to(&[b, m, d])?, Some(gate)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KvPlacement;
    use crate::tensor::no_grad;

    fn config(m: usize, mkv: usize) -> ModelConfig {
        let mut c = ModelConfig::tiny(3);
        c.prompt.visual_len = m;
        c.prompt.kv_len = mkv;
        c
    }

    fn model(c: &ModelConfig, seed: u64) -> Model<f64> {
        Model::assemble(Backbone::init(c, 100 + seed).unwrap(), c, seed).unwrap()
    }

    fn batch(c: &ModelConfig, b: usize, seed: u64) -> Tensor<f64> {
        let n = b * c.channels * c.image_size * c.image_size;
        let img: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.7 + seed as f64) * 1.3).sin()).collect();
        patchify(c, &img, b).unwrap()
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn no_prompts_matches_plain_vit_bit_exactly() {
        let c = config(0, 0);
        let mdl = model(&c, 0);
        let x = batch(&c, 3, 1);
        let a = mdl.forward(&x).unwrap().to_vec();
        let b = mdl.backbone.forward_plain(&x, &mdl.head).unwrap().to_vec();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sequence_length_and_row_sums() {
        let c = config(3, 2);
        let mdl = model(&c, 0);
        let out = mdl.forward_with(&batch(&c, 2, 0), &ForwardOptions::default()).unwrap();
        for a in &out.attention {
            let s = 1 + 3 + c.num_patches();
            assert_eq!(a.shape(), &[2 * c.num_heads, s, s + 2]);
            for row in a.to_vec().chunks(s + 2) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn placement_does_not_change_outputs() {
        let c = config(2, 3);
        let before = model(&c, 4);
        let mut after = before.clone();
        after.prompts.config.kv_placement = KvPlacement::After;
        let x = batch(&c, 2, 3);
        assert!(max_diff(&before.forward(&x).unwrap(), &after.forward(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn zero_mask_equals_physical_removal() {
        let c = config(4, 2);
        let mut mdl = model(&c, 1);
        for l in 0..c.num_layers {
            mdl.prompts.layers[l].token_keep[1 + l] = false;
        }
        let x = batch(&c, 2, 5);
        let masked = mdl.forward(&x).unwrap();

        let mut removed = mdl.prompts.deep_clone().unwrap();
        removed.config.visual_len = 3;
        for (l, lp) in removed.layers.iter_mut().enumerate() {
            let v = lp.visual.as_ref().unwrap().to_vec();
            let kept: Vec<f64> = v
                .chunks(16)
                .enumerate()
                .filter(|(k, _)| *k != 1 + l)
                .flat_map(|(_, r)| r.to_vec())
                .collect();
            lp.visual = Some(Tensor::new(kept, &[3, 16]).unwrap());
            lp.token_keep = vec![true; 3];
            lp.segment_keep = vec![true; 3 * 4];
        }
        let small = Model {
            backbone: mdl.backbone.clone(),
            prompts: removed,
            head: mdl.head.clone(),
        };
        assert!(max_diff(&masked, &small.forward(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn masked_prompt_values_are_ignored() {
        let c = config(3, 1);
        let mut mdl = model(&c, 2);
        mdl.prompts.layers[0].token_keep[2] = false;
        let x = batch(&c, 2, 1);
        let a = mdl.forward(&x).unwrap().to_vec();
        mdl.prompts.layers[0]
            .visual
            .as_ref()
            .unwrap()
            .update_data(|v| v[32..48].iter_mut().for_each(|e| *e = *e * -37.0 + 11.0));
        let b = mdl.forward(&x).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn segment_mask_equals_hard_zero_dims() {
        let c = config(2, 0);
        let mut mdl = model(&c, 3);
        mdl.prompts.layers[1].segment_keep[4 + 2] = false; // token 1, segment 2
        let x = batch(&c, 1, 0);
        let masked = mdl.forward(&x).unwrap();
        mdl.prompts.layers[1].segment_keep[4 + 2] = true;
        mdl.prompts.layers[1]
            .visual
            .as_ref()
            .unwrap()
            .update_data(|v| v[16 + 8..16 + 12].fill(0.0));
        assert!(max_diff(&masked, &mdl.forward(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn probe_at_ones_matches_plain_forward() {
        let c = config(2, 2);
        let mdl = model(&c, 0);
        let x = batch(&c, 3, 2);
        let probe = MaskProbe::from_masks(&mdl.prompts, 3).unwrap();
        let p = no_grad(|| mdl.forward_with(&x, &ForwardOptions { probe: Some(&probe) }))
            .unwrap()
            .logits;
        assert!(max_diff(&p, &mdl.forward(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn hand_count_of_tunable_parameters() {
        let mut c = ModelConfig::tiny(3);
        c.prompt.visual_len = 4;
        c.prompt.kv_len = 2;
        let mdl = model(&c, 0);
        let t = count_tunable(&mdl, true);
        // 2 layers × (4·16 visual + 2·16 shared kv); head 16·3 + 3
        assert_eq!(t.prompt_params, 2 * (64 + 32));
        assert_eq!(t.head_params, 51);
        // patch 16·16+16, cls 16, pos 5·16, per layer 4·(16·16+16) + 2·(32) LN
        // + fc1 16·32+32 + fc2 32·16+16, final LN 32
        let layer = 4 * (256 + 16) + 64 + (512 + 32) + (512 + 16);
        assert_eq!(t.total_backbone, 272 + 16 + 80 + 2 * layer + 32);
        let none = model(&config(0, 0), 0);
        assert_eq!(count_tunable(&none, false).ratio_percent, 0.0);
    }
}
