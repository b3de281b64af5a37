use criterion::{criterion_group, criterion_main, Criterion};
use kvprompt::data::make_shift_task;
use kvprompt::pruning::importance_over;
use kvprompt::tensor::Reduction;
use kvprompt::{Backbone, ModelConfig, Model, Prepared, Tensor};
use std::hint::black_box;

fn filled(rows: usize, cols: usize, salt: f32) -> Tensor<f32> {
    let data = (0..rows * cols).map(|i| (i as f32 * 0.37 + salt).sin()).collect();
    Tensor::new(data, &[rows, cols]).unwrap()
}

fn matmul(c: &mut Criterion) {
    for n in [32, 128] {
        let a = filled(n, n, 0.1);
        let b = filled(n, n, 0.2);
        c.bench_function(&format!("matmul {n}x{n}"), |bench| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
}

fn setup() -> (ModelConfig, Model<f32>, Prepared<f32>) {
    let mut config = ModelConfig::tiny(4);
    config.channels = 3;
    config.image_size = 16;
    config.embed_dim = 32;
    config.num_heads = 4;
    config.prompt.visual_len = 4;
    config.prompt.kv_len = 4;
    let (_, target) = make_shift_task(0, 4, 16);
    let data = Prepared::new(&target).unwrap();
    let backbone = Backbone::init(&config, 0).unwrap();
    let model = Model::assemble(backbone, &config, 0).unwrap();
    model.freeze_backbone();
    (config, model, data)
}

fn training_step(c: &mut Criterion) {
    let (config, model, data) = setup();
    let idx: Vec<usize> = (0..32).collect();
    let batch = data.train.batch(&config, &idx).unwrap();
    c.bench_function("forward batch 32", |bench| {
        bench.iter(|| kvprompt::tensor::no_grad(|| black_box(model.forward(&batch.patches).unwrap())))
    });
    c.bench_function("forward+backward batch 32", |bench| {
        bench.iter(|| {
            let loss = model
                .forward(&batch.patches)
                .unwrap()
                .cross_entropy(&batch.labels, Reduction::Mean)
                .unwrap();
            loss.backward().unwrap();
            for p in model.trainable() {
                p.tensor.zero_grad();
            }
        })
    });
}

fn importance(c: &mut Criterion) {
    let (_, model, data) = setup();
    c.bench_function("importance 64 examples", |bench| {
        bench.iter(|| black_box(importance_over(&model, &data.train, 32).unwrap()))
    });
}

criterion_group!(benches, matmul, training_step, importance);
criterion_main!(benches);
