//! Golden outputs of the embedding and encoder block, plus a
//! finite-difference check through a whole block.
//!
//! Set `KVPROMPT_BLESS=1` to rewrite the golden files.

use std::fs;
use std::path::PathBuf;

use kvprompt::gradcheck::check_gradients;
use kvprompt::vit::{AttentionPrompt, AttentionShape};
use kvprompt::{init_prompts, Backbone, ModelConfig, Tensor};

fn config() -> ModelConfig {
    let mut c = ModelConfig::tiny(3);
    c.prompt.kv_len = 2;
    c
}

fn image(c: &ModelConfig) -> Vec<f64> {
    let n = c.channels * c.image_size * c.image_size;
    (0..n).map(|i| ((i * 31 % 17) as f64 / 8.0 - 1.0) * 0.75).collect()
}

fn tokens(c: &ModelConfig, b: usize) -> Tensor<f64> {
    let s = 1 + c.num_patches();
    let n = b * s * c.embed_dim;
    Tensor::new((0..n).map(|i| (i as f64 * 0.173).cos()).collect(), &[b, s, c.embed_dim]).unwrap()
}

fn golden(name: &str, values: &[f64]) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let text: String = values.iter().map(|v| format!("{v:e}\n")).collect();
    if std::env::var_os("KVPROMPT_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, text).unwrap();
        return;
    }
    let stored = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let expected: Vec<f64> = stored.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(expected.len(), values.len(), "{name}: length");
    for (i, (e, v)) in expected.iter().zip(values).enumerate() {
        assert!((e - v).abs() <= 1e-12 * e.abs().max(1.0), "{name}[{i}]: {v} vs golden {e}");
    }
}

#[test]
fn patch_embed_matches_golden() {
    let c = config();
    let bb = Backbone::<f64>::init(&c, 2024).unwrap();
    let z = bb.embed_image(&image(&c)).unwrap();
    assert_eq!(z.shape(), [1 + c.num_patches(), c.embed_dim]);
    golden("patch_embed.txt", &z.to_vec());
}

#[test]
fn encoder_layer_matches_golden() {
    let c = config();
    let bb = Backbone::<f64>::init(&c, 2024).unwrap();
    let prompts = init_prompts::<f64>(&c, 7).unwrap();
    let z = tokens(&c, 2);
    let plain = bb.layers[0]
        .forward(&z, AttentionShape::of(&c), &AttentionPrompt::default())
        .unwrap();
    let prompted = bb.layers[0]
        .forward(
            &z,
            AttentionShape::of(&c),
            &AttentionPrompt {
                kv: prompts.layers[0].kv.as_ref(),
                ..AttentionPrompt::default()
            },
        )
        .unwrap();
    assert_eq!(prompted.out.shape(), z.shape());
    golden("encoder_layer.txt", &plain.out.to_vec());
    golden("encoder_layer_kv.txt", &prompted.out.to_vec());
}

#[test]
fn encoder_block_gradients_match_central_differences() {
    let mut c = config();
    c.prompt.kv_shared = false;
    let bb = Backbone::<f64>::init(&c, 5).unwrap();
    bb.set_trainable(true);
    let prompts = init_prompts::<f64>(&c, 3).unwrap();
    prompts.set_trainable(true);
    let kv = prompts.layers[0].kv.as_ref().unwrap();
    let z = tokens(&c, 2);
    z.set_requires_grad(true);
    let weights = Tensor::new((0..z.numel()).map(|i| (i as f64 * 0.61).sin() + 0.3).collect(), z.shape()).unwrap();
    let layer = &bb.layers[0];
    let named = [
        ("z", &z),
        ("key_prompt", &kv.key),
        ("value_prompt", &kv.value),
        ("norm1.gamma", &layer.norm1.gamma),
        ("query.weight", &layer.query.weight),
        ("key.weight", &layer.key.weight),
        ("value.bias", &layer.value.bias),
        ("proj.weight", &layer.proj.weight),
        ("norm2.beta", &layer.norm2.beta),
        ("fc1.weight", &layer.fc1.weight),
        ("fc2.bias", &layer.fc2.bias),
    ];
    let report = check_gradients(&named, 1e-5, 1e-6, || {
        let out = layer.forward(
            &z,
            AttentionShape::of(&c),
            &AttentionPrompt {
                kv: Some(kv),
                ..AttentionPrompt::default()
            },
        )?;
        out.out.mul(&weights)?.sum()
    })
    .unwrap();
    assert!(
        report.max_rel_error <= 1e-6,
        "{} at {}[{}]",
        report.max_rel_error,
        report.worst_param,
        report.worst_index
    );
}
