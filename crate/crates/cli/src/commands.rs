use std::fs;
use std::path::{Path, PathBuf};

use kvprompt::ablation::{ablate, ablation_table, ROWS};
use kvprompt::checkpoint::{Checkpoint, Stage};
use kvprompt::data::Prepared;
use kvprompt::embed::{border_stats, recall_at_k, scatter_points, scatter_svg, write_scatter_csv, EmbeddingSet, Metric};
use kvprompt::pruning::{importance_over, rewind, segment_prune, token_prune};
use kvprompt::trainer::{default_threads, evaluate, finetune, pretrain_backbone, sweep, sweep_table, RunData, RunRecord};
use kvprompt::{Error, Model, PruneStage, Result, Scalar};
use serde::Serialize;

use crate::spec::{ExperimentSpec, Role};

/// Everything a command needs besides its element type.
pub struct Context {
    pub spec: ExperimentSpec,
    pub out: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub quiet: bool,
}

impl Context {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    /// Creates `out/<stage>/` and writes the resolved spec into it.
    fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.out.join(stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write(&dir.join("config.toml"), self.spec.to_toml()?)?;
        Ok(dir)
    }

    /// The explicit `--checkpoint`, else the default stage output.
    fn input(&self, default_stage: &str) -> PathBuf {
        self.checkpoints
            .first()
            .cloned()
            .unwrap_or_else(|| self.out.join(default_stage).join("checkpoint"))
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn toml_text<S: Serialize>(value: &S) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Data(format!("cannot encode output: {e}")))
}

fn csv_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Timing {
    wall_time_secs: f64,
}

/// `record.toml`, `epochs.csv` and the separate `timing.toml`.
fn save_record(dir: &Path, record: &RunRecord) -> Result<()> {
    write(&dir.join("record.toml"), record.to_toml()?)?;
    record.write_csv(csv_file(&dir.join("epochs.csv"))?)?;
    write(
        &dir.join("timing.toml"),
        toml_text(&Timing {
            wall_time_secs: record.wall_time_secs,
        })?,
    )
}

fn load_stage(path: &Path, wanted: &[Stage], hint: &str) -> Result<Checkpoint> {
    if !path.join("manifest.toml").exists() {
        return Err(Error::Pipeline(format!("no checkpoint at {}; {hint}", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    if !wanted.contains(&ckpt.stage) {
        return Err(Error::Pipeline(format!(
            "{} holds a {} checkpoint; {hint}",
            path.display(),
            ckpt.stage
        )));
    }
    Ok(ckpt)
}

fn target<T: Scalar>(ctx: &Context) -> Result<Prepared<T>> {
    let ds = ctx.spec.target_with_val()?;
    ds.check_model(&ctx.spec.model)?;
    if ds.num_classes() != ctx.spec.model.num_classes {
        return Err(Error::Config(format!(
            "model.num_classes is {}, target task has {} classes",
            ctx.spec.model.num_classes,
            ds.num_classes()
        )));
    }
    Prepared::new(&ds)
}

fn pct(x: Option<f64>) -> String {
    x.map_or("-".into(), |a| format!("{:.2}%", 100.0 * a))
}

pub fn pretrain<T: Scalar>(ctx: &Context) -> Result<()> {
    let ds = ctx.spec.dataset(Role::Source)?;
    ds.check_model(&ctx.spec.model)?;
    let data = Prepared::<T>::new(&ds)?;
    let (model, record) = pretrain_backbone(&ctx.spec.model, &data, &ctx.spec.pretrain)?;
    let dir = ctx.stage_dir("pretrain")?;
    save_record(&dir, &record)?;
    Checkpoint::from_model(&model, Stage::Pretrain)?.save(dir.join("checkpoint"))?;
    ctx.say(format!(
        "pretrain: {} epochs, source test accuracy {}",
        record.epochs_run(),
        pct(record.test_acc)
    ));
    Ok(())
}

pub fn finetune_cmd<T: Scalar>(ctx: &Context) -> Result<()> {
    let ckpt = load_stage(&ctx.input("pretrain"), &[Stage::Pretrain], "run `pretrain` first")?;
    let data = target::<T>(ctx)?;
    let (model, record) = finetune(&ckpt.backbone::<T>()?, &ctx.spec.model, &ctx.spec.finetune, &data)?;
    let dir = ctx.stage_dir("finetune")?;
    save_record(&dir, &record)?;
    Checkpoint::from_model(&model, Stage::Finetune)?.save(dir.join("checkpoint"))?;
    ctx.say(format!(
        "finetune: best epoch {}, val accuracy {}, test accuracy {}, tuned/total {:.2}%",
        record.best_epoch,
        pct(record.best_val_acc),
        pct(record.test_acc),
        record.tunable.ratio_percent
    ));
    Ok(())
}

#[derive(Serialize)]
struct PruneSummary {
    token_ratio: f64,
    segment_ratio: f64,
    pruned_tokens: usize,
    visual_params_before: usize,
    visual_params_after: usize,
    examples: usize,
    batches: usize,
}

pub fn prune<T: Scalar>(ctx: &Context) -> Result<()> {
    let ckpt = load_stage(&ctx.input("finetune"), &[Stage::Finetune], "run `finetune` first")?;
    let mut model: Model<T> = ckpt.to_model()?;
    if model.prompts.stage != PruneStage::Dense {
        return Err(Error::Pipeline("checkpoint is already pruned".into()));
    }
    let data = target::<T>(ctx)?;
    let cfg = &ctx.spec.finetune;
    let before = model.prompts.live_visual_params();
    let mut report = importance_over(&model, &data.train, cfg.batch_size)?;
    token_prune(&mut report, &mut model.prompts, cfg.token_prune_ratio)?;
    segment_prune(&mut report, &mut model.prompts, cfg.segment_ratio())?;
    let dir = ctx.stage_dir("prune")?;
    report.write_csv(csv_file(&dir.join("importance.csv"))?)?;
    let summary = PruneSummary {
        token_ratio: cfg.token_prune_ratio,
        segment_ratio: cfg.segment_ratio(),
        pruned_tokens: report.pruned_tokens(),
        visual_params_before: before,
        visual_params_after: model.prompts.live_visual_params(),
        examples: report.examples,
        batches: report.batches,
    };
    write(&dir.join("summary.toml"), toml_text(&summary)?)?;
    Checkpoint::from_model(&model, Stage::Prune)?.save(dir.join("checkpoint"))?;
    ctx.say(format!(
        "prune: {} tokens removed, visual prompt parameters {} -> {}",
        summary.pruned_tokens, summary.visual_params_before, summary.visual_params_after
    ));
    Ok(())
}

pub fn rewind_cmd<T: Scalar>(ctx: &Context) -> Result<()> {
    let ckpt = load_stage(&ctx.input("prune"), &[Stage::Prune], "run `prune` first")?;
    let model: Model<T> = ckpt.to_model()?;
    let data = target::<T>(ctx)?;
    let record = rewind(&model, &ctx.spec.finetune, RunData::of(&data))?;
    let dir = ctx.stage_dir("rewind")?;
    save_record(&dir, &record)?;
    Checkpoint::from_model(&model, Stage::Rewind)?.save(dir.join("checkpoint"))?;
    ctx.say(format!(
        "rewind: val accuracy {}, test accuracy {}, tuned/total {:.2}%",
        pct(record.best_val_acc),
        pct(record.test_acc),
        record.tunable.ratio_percent
    ));
    Ok(())
}

#[derive(Serialize)]
struct EvalMetrics {
    checkpoint: String,
    stage: String,
    val_loss: f64,
    val_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_acc: Option<f64>,
}

/// Loads any checkpoint as a target model. A pretrain checkpoint gets the
/// same fresh prompts and head a `finetune` run would start from.
fn target_model<T: Scalar>(ctx: &Context, path: &Path) -> Result<(Checkpoint, Model<T>)> {
    let ckpt = load_stage(
        path,
        &[Stage::Pretrain, Stage::Finetune, Stage::Prune, Stage::Rewind],
        "expected a kvprompt checkpoint",
    )?;
    let model = if ckpt.stage == Stage::Pretrain {
        Model::assemble(ckpt.backbone::<T>()?, &ctx.spec.model, ctx.spec.finetune.seed)?
    } else {
        ckpt.to_model()?
    };
    Ok((ckpt, model))
}

pub fn eval<T: Scalar>(ctx: &Context) -> Result<()> {
    let path = ctx
        .checkpoints
        .first()
        .cloned()
        .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let (ckpt, model) = target_model::<T>(ctx, &path)?;
    let data = target::<T>(ctx)?;
    let bs = ctx.spec.finetune.batch_size;
    let val = data.val.as_ref().ok_or_else(|| Error::Data("missing val split".into()))?;
    let (val_loss, val_acc) = evaluate(&model, val, bs)?;
    let test = data.test.as_ref().map(|t| evaluate(&model, t, bs)).transpose()?;
    let metrics = EvalMetrics {
        checkpoint: path.display().to_string(),
        stage: ckpt.stage.to_string(),
        val_loss,
        val_acc,
        test_loss: test.map(|t| t.0),
        test_acc: test.map(|t| t.1),
    };
    let dir = ctx.stage_dir("eval")?;
    write(&dir.join("metrics.toml"), toml_text(&metrics)?)?;
    ctx.say(format!(
        "eval ({} checkpoint): val accuracy {}, test accuracy {}",
        metrics.stage,
        pct(Some(val_acc)),
        pct(metrics.test_acc)
    ));
    Ok(())
}

#[derive(Serialize)]
struct CellRow {
    index: usize,
    lr: f64,
    wd: f64,
    prune_ratio: Option<f64>,
    val_acc: Option<f64>,
    tuned_percent: Option<f64>,
    error: Option<String>,
}

pub fn sweep_cmd<T: Scalar>(ctx: &Context) -> Result<()> {
    let ckpt = load_stage(&ctx.input("pretrain"), &[Stage::Pretrain], "run `pretrain` first")?;
    let data = target::<T>(ctx)?;
    let threads = default_threads();
    let res = sweep(
        &ckpt.tensors,
        &ctx.spec.model,
        &ctx.spec.finetune,
        &data,
        ctx.spec.sweep.pruning,
        threads,
    )?;
    let dir = ctx.stage_dir("sweep")?;
    let mut w = csv::Writer::from_writer(csv_file(&dir.join("cells.csv"))?);
    for o in &res.outcomes {
        let rec = o.result.as_ref().ok();
        w.serialize(CellRow {
            index: o.cell.index,
            lr: o.cell.lr,
            wd: o.cell.wd,
            prune_ratio: o.cell.prune_ratio,
            val_acc: rec.and_then(|r| r.best_val_acc),
            tuned_percent: rec.map(|r| r.tunable.ratio_percent),
            error: o.result.as_ref().err().cloned(),
        })?;
    }
    w.flush().map_err(|e| Error::io(dir.join("cells.csv"), e))?;
    let table = sweep_table(&res.outcomes);
    write(&dir.join("summary.txt"), &table)?;
    let final_rec = res.final_rewind.as_ref().unwrap_or(&res.final_record);
    save_record(&dir, final_rec)?;
    let cell = &res.outcomes[res.best].cell;
    res.final_checkpoint.save(dir.join("checkpoint"))?;
    ctx.say(table.trim_end());
    ctx.say(format!(
        "sweep: {} cells on {threads} workers, best lr {} wd {}{}, final test accuracy {}",
        res.outcomes.len(),
        cell.lr,
        cell.wd,
        cell.prune_ratio.map_or(String::new(), |r| format!(" prune {r}")),
        pct(final_rec.test_acc)
    ));
    Ok(())
}

#[derive(Serialize)]
struct RecallRow {
    source: String,
    metric: String,
    k: usize,
    recall: f64,
    queried: usize,
    skipped: usize,
}

#[derive(Serialize)]
struct EmbedMetadata {
    projection: &'static str,
    curvature: f64,
    split: &'static str,
    sources: Vec<String>,
}

pub fn embed<T: Scalar>(ctx: &Context) -> Result<()> {
    let paths = if ctx.checkpoints.is_empty() {
        vec![ctx.input("rewind")]
    } else {
        ctx.checkpoints.clone()
    };
    let data = target::<T>(ctx)?;
    let (samples, split) = match &data.test {
        Some(t) => (t, "test"),
        None => (data.val.as_ref().expect("target has a val split"), "val"),
    };
    let mut sets = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let (ckpt, model) = target_model::<T>(ctx, path)?;
        let tag = format!("{}-{}", ckpt.stage, i);
        sets.push(EmbeddingSet::from_model(&model, samples, ctx.spec.finetune.batch_size, tag)?);
    }
    let c = ctx.spec.embed.curvature;
    let dir = ctx.stage_dir("embed")?;
    let refs: Vec<&EmbeddingSet> = sets.iter().collect();
    let points = scatter_points(&refs, c)?;
    write_scatter_csv(&points, csv_file(&dir.join("points.csv"))?)?;
    let radius = 1.0 / c.sqrt();
    write(&dir.join("scatter.svg"), scatter_svg(&points, radius))?;
    let mut w = csv::Writer::from_writer(csv_file(&dir.join("recall.csv"))?);
    for set in &sets {
        for &k in &ctx.spec.embed.recall_k {
            if k >= set.len() {
                continue;
            }
            for (name, metric) in [("euclidean", Metric::Euclidean), ("poincare", Metric::Poincare { curvature: c })] {
                let r = recall_at_k(set, k, metric)?;
                ctx.say(format!("{} {name} recall@{k}: {:.4}", set.source, r.recall));
                w.serialize(RecallRow {
                    source: set.source.clone(),
                    metric: name.into(),
                    k,
                    recall: r.recall,
                    queried: r.queried,
                    skipped: r.skipped,
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(dir.join("recall.csv"), e))?;
    let mut w = csv::Writer::from_writer(csv_file(&dir.join("border.csv"))?);
    for s in border_stats(&points, radius) {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(dir.join("border.csv"), e))?;
    let meta = EmbedMetadata {
        projection: "pca-2d (substitute for UMAP), then exponential map at the origin",
        curvature: c,
        split,
        sources: sets.iter().map(|s| s.source.clone()).collect(),
    };
    write(&dir.join("metadata.toml"), toml_text(&meta)?)
}

#[derive(Serialize)]
struct AblationCsvRow {
    visual_prompts: bool,
    key_value_prompts: bool,
    pruning_and_rewinding: bool,
    pruned_percent: f64,
    tuned_total_percent: f64,
    val_acc: f64,
    test_acc: Option<f64>,
}

pub fn ablate_cmd<T: Scalar>(ctx: &Context) -> Result<()> {
    let ckpt = load_stage(&ctx.input("pretrain"), &[Stage::Pretrain], "run `pretrain` first")?;
    let data = target::<T>(ctx)?;
    let rows = ablate(&ckpt.backbone::<T>()?, &ctx.spec.model, &ctx.spec.finetune, &data, &ROWS)?;
    let table = ablation_table(&rows);
    let dir = ctx.stage_dir("ablate")?;
    write(&dir.join("table.txt"), &table)?;
    let mut w = csv::Writer::from_writer(csv_file(&dir.join("rows.csv"))?);
    for r in &rows {
        w.serialize(AblationCsvRow {
            visual_prompts: r.components.visual,
            key_value_prompts: r.components.kv,
            pruning_and_rewinding: r.components.prune,
            pruned_percent: r.pruned_percent,
            tuned_total_percent: r.tunable.ratio_percent,
            val_acc: r.val_acc,
            test_acc: r.test_acc,
        })?;
    }
    w.flush().map_err(|e| Error::io(dir.join("rows.csv"), e))?;
    ctx.say(table.trim_end());
    Ok(())
}
