//! Training loops, schedules, optimizers and grid sweeps.
//!
//! A run records an evaluation before the first update as epoch 0, then one
//! entry per epoch. With a validation split the trainable values of the best
//! epoch (earliest on ties) are restored at the end; without one the last
//! epoch is kept.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage, TensorStore};
use crate::config::{ModelConfig, PromptConfig};
use crate::data::{Prepared, Samples};
use crate::error::{Error, Result};
use crate::model::{count_tunable, Model, TunableCount};
use crate::pruning::{importance_scores, rewind, segment_prune, token_prune, ImportanceReport};
use crate::prompts::{PromptSet, TrainableParam};
use crate::tensor::{derive_rng, no_grad, Reduction, Scalar};
use crate::vit::{Backbone, Head};

pub const DEFAULT_LR_GRID: [f64; 10] = [50.0, 25.0, 10.0, 5.0, 2.5, 1.0, 0.5, 0.25, 0.1, 0.05];
pub const DEFAULT_WD_GRID: [f64; 4] = [0.01, 0.001, 0.0001, 0.0];
pub const DEFAULT_PRUNE_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with momentum and decoupled weight decay.
    #[default]
    Sgd,
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    pub prune_ratio_grid: Vec<f64>,
    /// Fraction of visual prompt tokens pruned per layer.
    pub token_prune_ratio: f64,
    /// Fraction of segments pruned within each kept token; defaults to the
    /// token ratio.
    pub segment_prune_ratio: Option<f64>,
    /// Length of the rewinding run; defaults to `epochs`.
    pub rewind_epochs: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            weight_decay: 1e-4,
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 64,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            wd_grid: DEFAULT_WD_GRID.to_vec(),
            prune_ratio_grid: DEFAULT_PRUNE_GRID.to_vec(),
            token_prune_ratio: 0.5,
            segment_prune_ratio: None,
            rewind_epochs: None,
            seed: 0,
        }
    }
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return cfg("epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return cfg(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return cfg("batch_size must be positive".into());
        }
        if self.lr_grid.is_empty() || self.wd_grid.is_empty() || self.prune_ratio_grid.is_empty() {
            return cfg("sweep grids must be non-empty".into());
        }
        let rates = [self.base_lr, self.weight_decay]
            .into_iter()
            .chain(self.lr_grid.iter().copied())
            .chain(self.wd_grid.iter().copied());
        for v in rates {
            if !v.is_finite() || v < 0.0 {
                return cfg(format!("learning rates and weight decays must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return cfg(format!("momentum {} outside [0, 1)", self.momentum));
        }
        check_ratio("token_prune_ratio", self.token_prune_ratio)?;
        if let Some(r) = self.segment_prune_ratio {
            check_ratio("segment_prune_ratio", r)?;
        }
        for &r in &self.prune_ratio_grid {
            check_ratio("prune ratio", r)?;
        }
        if self.rewind_epochs == Some(0) {
            return cfg("rewind_epochs must be positive".into());
        }
        Ok(())
    }

    pub fn segment_ratio(&self) -> f64 {
        self.segment_prune_ratio.unwrap_or(self.token_prune_ratio)
    }

    /// Copy with the grid point applied.
    pub fn with_point(&self, lr: f64, wd: f64) -> Self {
        TrainConfig {
            base_lr: lr,
            weight_decay: wd,
            ..self.clone()
        }
    }
}

/// Linear warmup from 0 over `warmup` steps, then cosine decay reaching 0 at
/// `total`. Training uses steps `0..total`; `step == total` is accepted as the
/// endpoint of the schedule.
pub fn lr_at(step: usize, total: usize, warmup: usize, base_lr: f64) -> Result<f64> {
    if warmup >= total {
        return Err(Error::Config(format!("warmup {warmup} must be below total steps {total}")));
    }
    if step > total {
        return Err(Error::Config(format!("step {step} outside schedule of {total} steps")));
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First-order optimizer state over a fixed parameter list.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new<T: Scalar>(kind: OptimizerKind, momentum: f64, params: &[TrainableParam<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect::<Vec<_>>();
        Optimizer {
            kind,
            momentum,
            first: zeros(),
            second: if kind == OptimizerKind::AdamW { zeros() } else { Vec::new() },
            steps: 0,
        }
    }

    /// One update from the gradients currently held by `params`. Entries
    /// whose update mask is 0 are left untouched, decay included.
    pub fn step<T: Scalar>(&mut self, params: &[TrainableParam<T>], lr: f64, weight_decay: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for (i, p) in params.iter().enumerate() {
            let Some(grad) = p.tensor.grad() else { continue };
            let mut values = p.tensor.to_vec();
            for (j, (v, g)) in values.iter_mut().zip(&grad).enumerate() {
                if p.update_mask.as_ref().is_some_and(|m| m[j] == T::zero()) {
                    continue;
                }
                let (x, g) = (v.as_f64(), g.as_f64());
                let next = match self.kind {
                    OptimizerKind::Sgd => {
                        let buf = &mut self.first[i][j];
                        *buf = self.momentum * *buf + g;
                        x * (1.0 - lr * weight_decay) - lr * *buf
                    }
                    OptimizerKind::AdamW => {
                        let m = &mut self.first[i][j];
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        let s = &mut self.second[i][j];
                        *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                        let mh = *m / (1.0 - ADAM_BETA1.powi(t));
                        let sh = *s / (1.0 - ADAM_BETA2.powi(t));
                        x * (1.0 - lr * weight_decay) - lr * mh / (sh.sqrt() + ADAM_EPS)
                    }
                };
                *v = T::of(next);
            }
            p.tensor.assign(&values)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step (0 for epoch 0).
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunableSummary {
    pub prompt_params: usize,
    pub head_params: usize,
    pub total_backbone: usize,
    pub ratio_percent: f64,
}

impl From<TunableCount> for TunableSummary {
    fn from(t: TunableCount) -> Self {
        TunableSummary {
            prompt_params: t.prompt_params,
            head_params: t.head_params,
            total_backbone: t.total_backbone,
            ratio_percent: t.ratio_percent,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Entry 0 is the evaluation before any update; entry `e` follows epoch `e`.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub tunable: TunableSummary,
    pub status: RunStatus,
    /// Kept out of serialized records so metric files are reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len().saturating_sub(1)
    }

    pub fn initial_val_acc(&self) -> Option<f64> {
        self.epochs.first().and_then(|e| e.val_acc)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("cannot encode run record: {e}")))
    }

    /// Per-epoch rows: `label,epoch,lr,train_loss,train_acc,val_loss,val_acc`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            label: &'a str,
            epoch: usize,
            lr: f64,
            train_loss: Option<f64>,
            train_acc: Option<f64>,
            val_loss: Option<f64>,
            val_acc: Option<f64>,
        }
        let mut w = csv::Writer::from_writer(out);
        for e in &self.epochs {
            w.serialize(Row {
                label: &self.label,
                epoch: e.epoch,
                lr: e.lr,
                train_loss: e.train_loss,
                train_acc: e.train_acc,
                val_loss: e.val_loss,
                val_acc: e.val_acc,
            })?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))
    }
}

/// Mean cross-entropy and accuracy over `samples`, without gradients.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &Samples<T>, batch_size: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    no_grad(|| {
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in samples.batches(model.config(), batch_size)? {
            let logits = model.forward(&batch.patches)?;
            loss += logits.cross_entropy(&batch.labels, Reduction::Sum)?.item().as_f64();
            correct += count_correct(&logits.to_vec(), &batch.labels);
        }
        let n = samples.len() as f64;
        Ok((loss / n, correct as f64 / n))
    })
}

/// Predicted class per row (lowest index on ties).
pub fn argmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn count_correct<T: Scalar>(logits: &[T], labels: &[usize]) -> usize {
    let classes = logits.len() / labels.len().max(1);
    argmax_rows(logits, classes)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// Data for one run.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a, T> {
    pub train: &'a Samples<T>,
    pub val: Option<&'a Samples<T>>,
    pub test: Option<&'a Samples<T>>,
}

impl<'a, T: Scalar> RunData<'a, T> {
    pub fn of(p: &'a Prepared<T>) -> Self {
        RunData {
            train: &p.train,
            val: p.val.as_ref(),
            test: p.test.as_ref(),
        }
    }
}

/// Trains `params` of `model`. When `frozen` is given its checksum must
/// stay unchanged after every epoch.
pub fn fit<T: Scalar>(
    model: &Model<T>,
    params: &[TrainableParam<T>],
    cfg: &TrainConfig,
    data: RunData<'_, T>,
    frozen: Option<&Backbone<T>>,
    label: &str,
) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let n = data.train.len();
    if n == 0 {
        return Err(Error::Data("empty training split".into()));
    }
    let config = model.config().clone();
    let head_trainable = model.head.linear.weight.requires_grad();
    let checksum = frozen.map(|b| b.checksum());
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.momentum, params);
    let mut rng = derive_rng(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..n).collect();

    let eval = |s: Option<&Samples<T>>| -> Result<(Option<f64>, Option<f64>)> {
        match s {
            Some(s) => {
                let (l, a) = evaluate(model, s, cfg.batch_size)?;
                Ok((Some(l), Some(a)))
            }
            None => Ok((None, None)),
        }
    };
    let (val_loss, val_acc) = eval(data.val)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        lr: 0.0,
        train_loss: None,
        train_acc: None,
        val_loss,
        val_acc,
    }];
    let snapshot = || params.iter().map(|p| p.tensor.to_vec()).collect::<Vec<_>>();
    let mut best = (0usize, val_acc, snapshot());
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.batch(&config, chunk)?;
            for p in params {
                p.tensor.zero_grad();
            }
            let diverged = |e: Error| {
                if e.is_non_finite() {
                    Error::NonFiniteLoss { epoch, step }
                } else {
                    e
                }
            };
            let logits = model.forward(&batch.patches).map_err(diverged)?;
            let loss = logits.cross_entropy(&batch.labels, Reduction::Mean).map_err(diverged)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss.backward().map_err(diverged)?;
            lr = lr_at(step, total, warmup, cfg.base_lr)?;
            optimizer.step(params, lr, cfg.weight_decay).map_err(diverged)?;
            loss_sum += value * chunk.len() as f64;
            correct += count_correct(&logits.to_vec(), &batch.labels);
            step += 1;
        }
        if let (Some(b), Some(sum)) = (frozen, &checksum) {
            if &b.checksum() != sum {
                return Err(Error::FrozenTensorChanged(format!("backbone after epoch {epoch}")));
            }
        }
        let (val_loss, val_acc) = eval(data.val)?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: Some(loss_sum / n as f64),
            train_acc: Some(correct as f64 / n as f64),
            val_loss,
            val_acc,
        });
        let better = match (val_acc, best.1) {
            (Some(a), Some(b)) => a > b,
            _ => true,
        };
        if better {
            best = (epoch, val_acc, snapshot());
        }
    }
    for (p, values) in params.iter().zip(&best.2) {
        p.tensor.assign(values)?;
    }
    let (_, test_acc) = eval(data.test)?;
    Ok(RunRecord {
        label: label.to_string(),
        train: cfg.clone(),
        model: config,
        epochs,
        best_epoch: best.0,
        best_val_acc: best.1,
        test_acc,
        tunable: count_tunable(model, head_trainable).into(),
        status: RunStatus::Completed,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Prompt-free model used for source pretraining.
pub fn source_model<T: Scalar>(config: &ModelConfig, num_classes: usize, seed: u64) -> Result<Model<T>> {
    let mut config = config.clone();
    config.num_classes = num_classes;
    config.prompt = PromptConfig {
        visual_len: 0,
        kv_len: 0,
        ..config.prompt.clone()
    };
    let backbone = Backbone::init(&config, seed)?;
    let head = Head::init(config.embed_dim, num_classes, seed)?;
    let prompts = PromptSet::empty(config.num_layers, config.embed_dim);
    Ok(Model {
        backbone,
        prompts,
        head,
    })
}

fn check_data<T: Scalar>(config: &ModelConfig, data: &Prepared<T>) -> Result<()> {
    let want = config.channels * config.image_size * config.image_size;
    if data.train.pixels != want {
        return Err(Error::Config(format!(
            "dataset images hold {} values, model expects {want}",
            data.train.pixels
        )));
    }
    Ok(())
}

/// Trains every backbone tensor and a source head on `source`.
pub fn pretrain_backbone<T: Scalar>(
    config: &ModelConfig,
    source: &Prepared<T>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, RunRecord)> {
    check_data(config, source)?;
    let model = source_model::<T>(config, source.num_classes, cfg.seed)?;
    model.backbone.set_trainable(true);
    model.head.set_trainable(true);
    let mut params: Vec<TrainableParam<T>> = model
        .backbone
        .named_params()
        .into_iter()
        .map(|(name, tensor)| TrainableParam {
            name,
            tensor,
            update_mask: None,
        })
        .collect();
    params.extend(model.trainable());
    let mut record = fit(&model, &params, cfg, RunData::of(source), None, "pretrain")?;
    record.tunable = TunableSummary {
        prompt_params: 0,
        head_params: model.head.numel(),
        total_backbone: model.backbone.numel(),
        ratio_percent: 100.0,
    };
    model.backbone.set_trainable(false);
    Ok((model, record))
}

/// Fresh prompts and head on a frozen copy of `backbone`, trained on the
/// target task. Requires a validation split.
pub fn finetune<T: Scalar>(
    backbone: &Backbone<T>,
    config: &ModelConfig,
    cfg: &TrainConfig,
    data: &Prepared<T>,
) -> Result<(Model<T>, RunRecord)> {
    if data.val.is_none() {
        return Err(Error::Data("finetune needs a validation split".into()));
    }
    finetune_on(backbone, config, cfg, RunData::of(data), "finetune")
}

pub fn finetune_on<T: Scalar>(
    backbone: &Backbone<T>,
    config: &ModelConfig,
    cfg: &TrainConfig,
    data: RunData<'_, T>,
    label: &str,
) -> Result<(Model<T>, RunRecord)> {
    let want = config.channels * config.image_size * config.image_size;
    if data.train.pixels != want {
        return Err(Error::Config(format!(
            "dataset images hold {} values, model expects {want}",
            data.train.pixels
        )));
    }
    let model = Model::assemble(backbone.deep_clone()?, config, cfg.seed)?;
    model.freeze_backbone();
    let record = fit(&model, &model.trainable(), cfg, data, Some(&model.backbone), label)?;
    Ok((model, record))
}

/// Another training run from the model's current state with a fresh
/// optimizer and the same seed.
pub fn continue_training<T: Scalar>(
    model: &Model<T>,
    cfg: &TrainConfig,
    data: RunData<'_, T>,
    label: &str,
) -> Result<RunRecord> {
    model.freeze_backbone();
    let cfg = TrainConfig {
        epochs: cfg.rewind_epochs.unwrap_or(cfg.epochs),
        warmup_epochs: cfg.warmup_epochs.min(cfg.rewind_epochs.unwrap_or(cfg.epochs) - 1),
        ..cfg.clone()
    };
    fit(model, &model.trainable(), &cfg, data, Some(&model.backbone), label)
}

/// Every stage of one fine-tuning pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOutcome<T: Scalar> {
    pub model: Model<T>,
    pub finetune: RunRecord,
    pub report: Option<ImportanceReport>,
    pub rewind: Option<RunRecord>,
}

impl<T: Scalar> PipelineOutcome<T> {
    /// Record of the last training stage.
    pub fn last(&self) -> &RunRecord {
        self.rewind.as_ref().unwrap_or(&self.finetune)
    }
}

/// Fine-tune, then optionally score, prune (token then segment) and rewind.
pub fn run_pipeline<T: Scalar>(
    backbone: &Backbone<T>,
    config: &ModelConfig,
    cfg: &TrainConfig,
    data: RunData<'_, T>,
    prune: Option<(f64, f64)>,
) -> Result<PipelineOutcome<T>> {
    let (mut model, finetune) = finetune_on(backbone, config, cfg, data, "finetune")?;
    let Some((token_ratio, segment_ratio)) = prune else {
        return Ok(PipelineOutcome {
            model,
            finetune,
            report: None,
            rewind: None,
        });
    };
    let batches = data.train.batches(model.config(), cfg.batch_size)?;
    let mut report = importance_scores(&model, &batches)?;
    token_prune(&mut report, &mut model.prompts, token_ratio)?;
    segment_prune(&mut report, &mut model.prompts, segment_ratio)?;
    let rewind = rewind(&model, cfg, data)?;
    Ok(PipelineOutcome {
        model,
        finetune,
        report: Some(report),
        rewind: Some(rewind),
    })
}

/// One point of a sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub lr: f64,
    pub wd: f64,
    pub prune_ratio: Option<f64>,
}

/// Grid points in `lr`-major order, optionally crossed with prune ratios.
pub fn grid_cells(cfg: &TrainConfig, with_pruning: bool) -> Result<Vec<SweepCell>> {
    if cfg.lr_grid.is_empty() || cfg.wd_grid.is_empty() || (with_pruning && cfg.prune_ratio_grid.is_empty()) {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let ratios: Vec<Option<f64>> = if with_pruning {
        cfg.prune_ratio_grid.iter().map(|&r| Some(r)).collect()
    } else {
        vec![None]
    };
    let mut cells = Vec::new();
    for &lr in &cfg.lr_grid {
        for &wd in &cfg.wd_grid {
            for &prune_ratio in &ratios {
                cells.push(SweepCell {
                    index: cells.len(),
                    lr,
                    wd,
                    prune_ratio,
                });
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: SweepCell,
    pub result: std::result::Result<RunRecord, String>,
}

impl CellOutcome {
    pub fn val_acc(&self) -> Option<f64> {
        self.result.as_ref().ok().and_then(|r| r.best_val_acc)
    }
}

/// Worker count from `KVPROMPT_THREADS`, else the machine's parallelism.
pub fn default_threads() -> usize {
    std::env::var("KVPROMPT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `eval` on every cell with at most `threads` workers. Outcomes come
/// back in grid order whatever the completion order; failures are kept as
/// messages rather than aborting the sweep.
pub fn run_cells<F>(cells: &[SweepCell], threads: usize, eval: F) -> Vec<CellOutcome>
where
    F: Fn(&SweepCell) -> Result<RunRecord> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let result = eval(cell).map_err(|e| e.to_string());
                slots.lock().expect("sweep slot lock")[i] = Some(CellOutcome { cell: *cell, result });
            });
        }
    });
    slots
        .into_inner()
        .expect("sweep slot lock")
        .into_iter()
        .map(|o| o.expect("every cell evaluated"))
        .collect()
}

/// Index of the best validation accuracy, first in grid order on ties.
pub fn select_best(outcomes: &[CellOutcome]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in outcomes.iter().enumerate() {
        if let Some(a) = o.val_acc() {
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((i, a));
            }
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Data(format!("no sweep cell out of {} succeeded", outcomes.len())))
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub outcomes: Vec<CellOutcome>,
    pub best: usize,
    /// Retrained on train ∪ val with the winning point.
    pub final_record: RunRecord,
    pub final_rewind: Option<RunRecord>,
    pub final_checkpoint: Checkpoint,
}

/// Grid search on `train`/`val`, then a final run with the winner on the
/// union of both, evaluated on `test`.
pub fn sweep<T: Scalar>(
    backbone: &TensorStore,
    config: &ModelConfig,
    cfg: &TrainConfig,
    data: &Prepared<T>,
    with_pruning: bool,
    threads: usize,
) -> Result<SweepResult> {
    cfg.validate()?;
    let val = data
        .val
        .as_ref()
        .ok_or_else(|| Error::Data("sweep needs a validation split".into()))?;
    let cells = grid_cells(cfg, with_pruning)?;
    let run = |cell: &SweepCell, d: RunData<'_, T>| -> Result<PipelineOutcome<T>> {
        let bb = Backbone::<T>::from_store(config, backbone)?;
        let point = cfg.with_point(cell.lr, cell.wd);
        let prune = cell.prune_ratio.map(|r| (r, cfg.segment_prune_ratio.unwrap_or(r)));
        run_pipeline(&bb, config, &point, d, prune)
    };
    let outcomes = run_cells(&cells, threads, |cell| {
        let d = RunData {
            train: &data.train,
            val: Some(val),
            test: None,
        };
        let out = run(cell, d)?;
        let mut record = out.last().clone();
        record.label = format!("cell-{}", cell.index);
        Ok(record)
    });
    let best = select_best(&outcomes)?;
    let full = Samples {
        images: [data.train.images.as_slice(), val.images.as_slice()].concat(),
        labels: [data.train.labels.as_slice(), val.labels.as_slice()].concat(),
        pixels: data.train.pixels,
    };
    let d = RunData {
        train: &full,
        val: None,
        test: data.test.as_ref(),
    };
    let out = run(&cells[best], d)?;
    let stage = if out.rewind.is_some() { Stage::Rewind } else { Stage::Finetune };
    let final_checkpoint = Checkpoint::from_model(&out.model, stage)?;
    Ok(SweepResult {
        outcomes,
        best,
        final_record: out.finetune,
        final_rewind: out.rewind,
        final_checkpoint,
    })
}

/// Plain-text table with right-aligned columns.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for row in rows {
        out.push('\n');
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out.push('\n');
    out
}

/// Sweep summary with tuned/total and accuracy columns.
pub fn sweep_table(outcomes: &[CellOutcome]) -> String {
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            let c = &o.cell;
            let prune = c.prune_ratio.map_or("-".into(), |r| format!("{:.1}%", 100.0 * r));
            match &o.result {
                Ok(r) => vec![
                    format!("{}", c.lr),
                    format!("{}", c.wd),
                    prune,
                    format!("{:.2}%", r.tunable.ratio_percent),
                    r.best_val_acc.map_or("-".into(), |a| format!("{:.1}%", 100.0 * a)),
                    "ok".into(),
                ],
                Err(e) => vec![
                    format!("{}", c.lr),
                    format!("{}", c.wd),
                    prune,
                    "-".into(),
                    "-".into(),
                    format!("failed: {e}"),
                ],
            }
        })
        .collect();
    format_table(&["lr", "wd", "Pruning", "Tuned/Total", "Accuracy", "Status"], &rows)
}
