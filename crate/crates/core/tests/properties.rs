use proptest::prelude::*;

use kvprompt::data::Batch;
use kvprompt::tensor::no_grad;
use kvprompt::{
    count_tunable, importance_scores, lr_at, patchify, segment_prune, token_prune, Backbone, ForwardOptions, KvPlacement,
    Model, ModelConfig, PruneStage,
};

fn config(m: usize, mkv: usize, shared: bool) -> ModelConfig {
    let mut c = ModelConfig::tiny(3);
    c.prompt.visual_len = m;
    c.prompt.kv_len = mkv;
    c.prompt.kv_shared = shared;
    c
}

fn model(c: &ModelConfig, seed: u64) -> Model<f64> {
    Model::assemble(Backbone::init(c, seed ^ 0x5eed).unwrap(), c, seed).unwrap()
}

fn batch(c: &ModelConfig, b: usize, seed: u64) -> Batch<f64> {
    let pix = c.channels * c.image_size * c.image_size;
    let img: Vec<f64> = (0..b * pix).map(|i| ((i as f64 + seed as f64 * 3.1) * 0.37).sin()).collect();
    Batch {
        patches: patchify(c, &img, b).unwrap(),
        labels: (0..b).map(|i| (i + seed as usize) % c.num_classes).collect(),
    }
}

fn logits(m: &Model<f64>, b: &Batch<f64>) -> Vec<f64> {
    no_grad(|| m.forward(&b.patches)).unwrap().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_are_distributions(
        m in 0usize..5, mkv in 0usize..4, shared: bool, after: bool, b in 1usize..4, seed in 0u64..1000,
    ) {
        let mut c = config(m, mkv, shared);
        if after {
            c.prompt.kv_placement = KvPlacement::After;
        }
        let mdl = model(&c, seed);
        let out = no_grad(|| mdl.forward_with(&batch(&c, b, seed).patches, &ForwardOptions::default())).unwrap();
        prop_assert_eq!(out.logits.shape(), &[b, 3]);
        let s = 1 + m + c.num_patches();
        for a in &out.attention {
            prop_assert_eq!(a.shape(), &[b * c.num_heads, s, s + mkv]);
            for row in a.to_vec().chunks(s + mkv) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn placement_changes_neither_count_nor_output(m in 0usize..4, mkv in 1usize..4, shared: bool, seed in 0u64..1000) {
        let c = config(m, mkv, shared);
        let before = model(&c, seed);
        let mut after = before.clone();
        after.prompts.config.kv_placement = KvPlacement::After;
        let x = batch(&c, 2, seed);
        let diff = logits(&before, &x)
            .iter()
            .zip(logits(&after, &x))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prop_assert!(diff < 1e-12, "{}", diff);
        prop_assert_eq!(count_tunable(&before, shared), count_tunable(&after, shared));
    }

    #[test]
    fn freezing_leaves_only_prompts_and_head_trainable(m in 0usize..4, mkv in 0usize..4, shared: bool, seed in 0u64..1000) {
        let c = config(m, mkv, shared);
        let mdl = model(&c, seed);
        mdl.backbone.set_trainable(true);
        mdl.freeze_backbone();
        for (name, t) in mdl.backbone.named_params() {
            prop_assert!(!t.requires_grad(), "{}", name);
        }
        let trainable = mdl.trainable();
        prop_assert!(trainable.iter().all(|p| p.tensor.requires_grad()));
        prop_assert!(trainable.iter().all(|p| p.name.starts_with("prompts/") || p.name.starts_with("head/")));
        let bytes = mdl.backbone.to_bytes();
        let x = batch(&c, 2, seed);
        let loss = mdl.forward(&x.patches).unwrap().sum().unwrap();
        loss.backward().unwrap();
        for (name, t) in mdl.backbone.named_params() {
            prop_assert!(t.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{}", name);
        }
        prop_assert_eq!(bytes, mdl.backbone.to_bytes());
    }

    #[test]
    fn masked_prompt_entries_have_no_effect(
        keep in prop::collection::vec(any::<bool>(), 2 * 3),
        segs in prop::collection::vec(any::<bool>(), 2 * 3 * 4),
        scale in -1e3f64..1e3,
        seed in 0u64..1000,
    ) {
        let c = config(3, 2, true);
        let mut mdl = model(&c, seed);
        for (l, lp) in mdl.prompts.layers.iter_mut().enumerate() {
            lp.token_keep.copy_from_slice(&keep[l * 3..l * 3 + 3]);
            lp.segment_keep.copy_from_slice(&segs[l * 12..l * 12 + 12]);
        }
        let x = batch(&c, 2, seed);
        let before = logits(&mdl, &x);
        for l in 0..c.num_layers {
            let mask = mdl.prompts.element_mask(l);
            mdl.prompts.layers[l].visual.as_ref().unwrap().update_data(|v| {
                for (e, &k) in v.iter_mut().zip(&mask) {
                    if k == 0.0 {
                        *e = *e * scale + scale;
                    }
                }
            });
        }
        prop_assert_eq!(before, logits(&mdl, &x));
    }

    #[test]
    fn importance_ignores_batch_order(rotate in 0usize..4, seed in 0u64..1000) {
        let c = config(3, 2, true);
        let mdl = model(&c, seed);
        let mut data: Vec<Batch<f64>> = (0..4).map(|i| batch(&c, 2, seed + i)).collect();
        let a = importance_scores(&mdl, &data).unwrap();
        data.rotate_left(rotate);
        data.swap(0, 3);
        let b = importance_scores(&mdl, &data).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            for (s, t) in x.token.iter().chain(&x.segment).zip(y.token.iter().chain(&y.segment)) {
                prop_assert!((s - t).abs() <= 1e-12 * s.abs().max(1e-6), "{} vs {}", s, t);
            }
        }
    }

    #[test]
    fn pruning_cascade_is_token_then_segment(token in 0.0f64..1.0, segment in 0.0f64..1.0, seed in 0u64..1000) {
        let c = config(4, 0, true);
        let mut mdl = model(&c, seed);
        let data = vec![batch(&c, 3, seed)];
        let mut early = importance_scores(&mdl, &data).unwrap();
        prop_assert!(segment_prune(&mut early, &mut mdl.prompts, segment).is_err());
        let mut rep = importance_scores(&mdl, &data).unwrap();
        token_prune(&mut rep, &mut mdl.prompts, token).unwrap();
        let dropped = (token * 4.0).floor() as usize;
        for lp in &mdl.prompts.layers {
            prop_assert_eq!(lp.token_keep.iter().filter(|&&k| !k).count(), dropped);
        }
        segment_prune(&mut rep, &mut mdl.prompts, segment).unwrap();
        prop_assert_eq!(mdl.prompts.stage, PruneStage::SegmentPruned);
        prop_assert!(token_prune(&mut rep, &mut mdl.prompts, token).is_err());
    }

    #[test]
    fn schedule_is_bounded_and_monotone(total in 2usize..400, warm_frac in 0.0f64..0.9, base in 1e-4f64..10.0) {
        let warmup = ((total as f64) * warm_frac) as usize;
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, warmup, base).unwrap()).collect();
        prop_assert!(lrs.iter().all(|&l| (0.0..=base * (1.0 + 1e-12)).contains(&l)));
        prop_assert!(lrs[..=warmup].windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(lrs[warmup..].windows(2).all(|w| w[1] <= w[0] + 1e-15 * base));
        prop_assert_eq!(lrs[total], 0.0);
        prop_assert!(lr_at(total + 1, total, warmup, base).is_err());
    }
}
