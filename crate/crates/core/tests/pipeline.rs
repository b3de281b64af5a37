use std::time::{Duration, Instant};

use kvprompt::data::{make_shift_task, split_800_200};
use kvprompt::trainer::{finetune, pretrain_backbone, OptimizerKind, DEFAULT_LR_GRID, DEFAULT_WD_GRID};
use kvprompt::{sweep, Checkpoint, Dataset, ModelConfig, Precision, Prepared, Stage, TrainConfig};

fn shift_config(classes: usize, d: usize, layers: usize) -> ModelConfig {
    let mut c = ModelConfig::tiny(classes);
    c.channels = 3;
    c.image_size = 16;
    c.embed_dim = d;
    c.num_layers = layers;
    c.num_heads = 2;
    c.precision = Precision::F32;
    c
}

fn adamw(epochs: usize) -> TrainConfig {
    TrainConfig {
        base_lr: 2e-3,
        weight_decay: 0.05,
        epochs,
        warmup_epochs: 1,
        batch_size: 16,
        optimizer: OptimizerKind::AdamW,
        ..TrainConfig::default()
    }
}

fn with_val(ds: &Dataset, seed: u64) -> Dataset {
    let (train, val) = split_800_200(&ds.train, seed).unwrap();
    Dataset {
        train,
        val: Some(val),
        ..ds.clone()
    }
}

#[test]
fn one_epoch_pretrain_writes_a_loadable_checkpoint() {
    let c = shift_config(4, 16, 1);
    let (source, _) = make_shift_task(1, 4, 16);
    assert_eq!(source.train.len(), 64);
    let data = Prepared::<f32>::new(&source).unwrap();
    let cfg = TrainConfig {
        warmup_epochs: 0,
        ..adamw(1)
    };
    let (model, record) = pretrain_backbone(&c, &data, &cfg).unwrap();
    assert_eq!(record.epochs_run(), 1);
    assert_eq!(record.tunable.ratio_percent, 100.0);

    let dir = tempfile::tempdir().unwrap();
    Checkpoint::from_model(&model, Stage::Pretrain).unwrap().save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded.stage, Stage::Pretrain);
    let again = loaded.to_model::<f32>().unwrap();
    let probe = data.train.batch(&c, &[0, 5, 9, 63]).unwrap();
    let a: Vec<u32> = model.forward(&probe.patches).unwrap().to_vec().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = again.forward(&probe.patches).unwrap().to_vec().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn pretraining_lowers_the_loss() {
    let c = shift_config(4, 16, 1);
    let (source, _) = make_shift_task(2, 4, 24);
    let data = Prepared::<f32>::new(&source).unwrap();
    let (_, record) = pretrain_backbone(&c, &data, &adamw(20)).unwrap();
    let loss = |e: usize| record.epochs[e].train_loss.unwrap();
    assert!(loss(20) < loss(1), "epoch 1 {} vs epoch 20 {}", loss(1), loss(20));
}

#[test]
fn prompt_tuning_beats_a_linear_probe_on_the_target() {
    let c = shift_config(6, 32, 2);
    let (source, target) = make_shift_task(0, 6, 100);
    let (pre, _) = pretrain_backbone(&c, &Prepared::<f32>::new(&source).unwrap(), &TrainConfig { batch_size: 32, ..adamw(10) }).unwrap();
    let cfg = TrainConfig {
        base_lr: 0.2,
        epochs: 15,
        warmup_epochs: 2,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut gaps = Vec::new();
    for seed in 0..2 {
        let data = Prepared::<f32>::new(&with_val(&target, seed)).unwrap();
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let (_, probe) = finetune(&pre.backbone, &c, &cfg, &data).unwrap();
        let mut prompted = c.clone();
        prompted.prompt.visual_len = 4;
        prompted.prompt.kv_len = 4;
        let (_, tuned) = finetune(&pre.backbone, &prompted, &cfg, &data).unwrap();
        gaps.push(tuned.best_val_acc.unwrap() - probe.best_val_acc.unwrap());
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(mean > 0.0, "prompt tuning minus linear probe per seed {gaps:?}");
}

#[test]
fn full_default_grid_fits_its_budget() {
    let budget = Duration::from_secs(120);
    let mut c = shift_config(3, 16, 1);
    c.prompt.visual_len = 2;
    c.prompt.kv_len = 2;
    let (source, target) = make_shift_task(3, 3, 10);
    let (pre, _) = pretrain_backbone(&c, &Prepared::<f32>::new(&source).unwrap(), &adamw(2)).unwrap();
    let store = Checkpoint::from_model(&pre, Stage::Pretrain).unwrap().tensors;
    let data = Prepared::<f32>::new(&with_val(&target, 0)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let res = sweep(&store, &c, &cfg, &data, false, 1).unwrap();
    let took = start.elapsed();
    assert_eq!(res.outcomes.len(), DEFAULT_LR_GRID.len() * DEFAULT_WD_GRID.len());
    assert!(took < budget, "grid took {took:?}");
    assert!(res.outcomes[res.best].result.is_ok());
}
