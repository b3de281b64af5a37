//! Component ablation: visual prompts, key-value prompts and pruning with
//! rewinding, switched on in four combinations.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::data::Prepared;
use crate::trainer::{format_table, run_pipeline, PipelineOutcome, RunData, RunRecord, TrainConfig, TunableSummary};
use crate::vit::Backbone;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Components {
    pub visual: bool,
    pub kv: bool,
    pub prune: bool,
}

/// Row order of the ablation table.
pub const ROWS: [Components; 4] = [
    Components { visual: true, kv: false, prune: false },
    Components { visual: true, kv: true, prune: false },
    Components { visual: true, kv: false, prune: true },
    Components { visual: true, kv: true, prune: true },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub components: Components,
    /// Percent of visual prompt scalars removed.
    pub pruned_percent: f64,
    pub visual_params_before: usize,
    pub visual_params_after: usize,
    pub tunable: TunableSummary,
    /// Validation accuracy of the selected epoch of the last stage.
    pub val_acc: f64,
    /// Validation accuracy before pruning, equal to `val_acc` without it.
    pub dense_val_acc: f64,
    pub test_acc: Option<f64>,
}

/// Trains one model per entry of `rows` on `data`. `config` gives the
/// prompt lengths; rows without key-value prompts set `kv_len` to 0.
pub fn ablate<T: Scalar>(
    backbone: &Backbone<T>,
    config: &ModelConfig,
    cfg: &TrainConfig,
    data: &Prepared<T>,
    rows: &[Components],
) -> Result<Vec<AblationRow>> {
    if config.prompt.visual_len == 0 || config.prompt.kv_len == 0 {
        return Err(Error::Config("ablation needs positive visual_len and kv_len".into()));
    }
    if data.val.is_none() {
        return Err(Error::Data("ablation needs a validation split".into()));
    }
    // A pruned row's dense stage is the unpruned row with the same prompts,
    // so each prompt combination is trained once.
    let mut cache: Vec<((bool, bool), PipelineOutcome<T>)> = Vec::new();
    let mut out = Vec::with_capacity(rows.len());
    for &components in rows {
        let key = (components.visual, components.kv);
        let mut c = config.clone();
        if !components.visual {
            c.prompt.visual_len = 0;
        }
        if !components.kv {
            c.prompt.kv_len = 0;
        }
        if !cache.iter().any(|(k, _)| *k == key) {
            let wants_prune = rows
                .iter()
                .any(|r| (r.visual, r.kv) == key && r.prune);
            let prune = wants_prune.then(|| (cfg.token_prune_ratio, cfg.segment_ratio()));
            cache.push((key, run_pipeline(backbone, &c, cfg, RunData::of(data), prune)?));
        }
        let result = &cache.iter().find(|(k, _)| *k == key).expect("cached").1;
        let before = c.num_layers * c.prompt.visual_len * c.embed_dim;
        let (last, after) = if components.prune {
            (result.last(), result.model.prompts.live_visual_params())
        } else {
            (&result.finetune, before)
        };
        let acc = |r: &RunRecord| {
            r.best_val_acc
                .ok_or_else(|| Error::Data("run recorded no validation accuracy".into()))
        };
        out.push(AblationRow {
            components,
            pruned_percent: if before == 0 { 0.0 } else { 100.0 * (before - after) as f64 / before as f64 },
            visual_params_before: before,
            visual_params_after: after,
            tunable: last.tunable,
            val_acc: acc(last)?,
            dense_val_acc: acc(&result.finetune)?,
            test_acc: last.test_acc,
        });
    }
    Ok(out)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let tick = |b: bool| if b { "x" } else { "" }.to_string();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                tick(r.components.visual),
                tick(r.components.kv),
                tick(r.components.prune),
                format!("{:.1}%", r.pruned_percent),
                format!("{:.2}%", r.tunable.ratio_percent),
                format!("{:.1}%", 100.0 * r.val_acc),
            ]
        })
        .collect();
    format_table(
        &[
            "Visual Prompts",
            "Key-Value Prompts",
            "Pruning & Rewinding",
            "Pruning",
            "Tuned/Total",
            "Accuracy",
        ],
        &body,
    )
}
