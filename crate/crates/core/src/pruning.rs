//! Cascade prompt pruning: importance scoring, token pruning, segment
//! pruning and rewinding.
//!
//! The importance of a mask variable is the mean over training examples of
//! `|∂L(x)/∂ρ|`, evaluated at ρ = 1. Each example gets its own probe row so a
//! single backward pass yields per-example gradients.

use serde::Serialize;

use crate::data::{Batch, Samples};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MaskProbe, Model};
use crate::prompts::{PromptSet, PruneStage};
use crate::tensor::{Reduction, Scalar};
use crate::trainer::{continue_training, RunData, RunRecord, TrainConfig};

/// Per-layer importance scores and the keep plan derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    /// Length `M`.
    pub token: Vec<f64>,
    /// Row-major `[M, R]`.
    pub segment: Vec<f64>,
    pub token_keep: Vec<bool>,
    pub segment_keep: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub layers: Vec<LayerImportance>,
    pub segments: usize,
    pub examples: usize,
    pub batches: usize,
    pub token_ratio: Option<f64>,
    pub segment_ratio: Option<f64>,
}

/// Running sums of absolute mask gradients. Shards built from disjoint
/// data can be merged before [`finish`](Self::finish).
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceAccumulator {
    token: Vec<Vec<f64>>,
    segment: Vec<Vec<f64>>,
    segments: usize,
    examples: usize,
    batches: usize,
}

impl ImportanceAccumulator {
    pub fn new<T: Scalar>(prompts: &PromptSet<T>) -> Self {
        let (m, r) = (prompts.visual_len(), prompts.segments());
        ImportanceAccumulator {
            token: vec![vec![0.0; m]; prompts.layers.len()],
            segment: vec![vec![0.0; m * r]; prompts.layers.len()],
            segments: r,
            examples: 0,
            batches: 0,
        }
    }

    /// Adds one batch. Every parameter of `model` must already be frozen.
    pub fn add_batch<T: Scalar>(&mut self, model: &Model<T>, batch: &Batch<T>) -> Result<()> {
        let b = batch.labels.len();
        let probe = MaskProbe::from_masks(&model.prompts, b)?;
        let out = model.forward_with(&batch.patches, &ForwardOptions { probe: Some(&probe) })?;
        out.logits.cross_entropy(&batch.labels, Reduction::Sum)?.backward()?;
        let layers = self.token.iter_mut().zip(&mut self.segment);
        for ((tok, seg), (pt, ps)) in layers.zip(probe.token.iter().zip(&probe.segment)) {
            for (dst, src) in [(tok, pt), (seg, ps)] {
                let grad = src.grad().unwrap_or_else(|| vec![T::zero(); src.numel()]);
                let width = dst.len();
                for row in grad.chunks(width.max(1)) {
                    for (d, g) in dst.iter_mut().zip(row) {
                        *d += g.as_f64().abs();
                    }
                }
            }
        }
        self.examples += b;
        self.batches += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ImportanceAccumulator) -> Result<()> {
        let same = self.segments == other.segments
            && self.token.len() == other.token.len()
            && self.token.iter().zip(&other.token).all(|(a, b)| a.len() == b.len());
        if !same {
            return Err(Error::Config("importance shards cover different prompt layouts".into()));
        }
        for (a, b) in self.token.iter_mut().zip(&other.token).chain(self.segment.iter_mut().zip(&other.segment)) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.examples += other.examples;
        self.batches += other.batches;
        Ok(())
    }

    pub fn finish(self) -> Result<ImportanceReport> {
        if self.examples == 0 {
            return Err(Error::Data("importance scoring saw no examples".into()));
        }
        let n = self.examples as f64;
        let layers = self
            .token
            .into_iter()
            .zip(self.segment)
            .map(|(t, s)| LayerImportance {
                token_keep: vec![true; t.len()],
                segment_keep: vec![true; s.len()],
                token: t.into_iter().map(|x| x / n).collect(),
                segment: s.into_iter().map(|x| x / n).collect(),
            })
            .collect();
        Ok(ImportanceReport {
            layers,
            segments: self.segments,
            examples: self.examples,
            batches: self.batches,
            token_ratio: None,
            segment_ratio: None,
        })
    }
}

/// Scores every visual prompt token and segment of a dense model over
/// `batches`. Parameters are left untouched and their trainable flags are
/// restored afterwards.
pub fn importance_scores<T: Scalar>(model: &Model<T>, batches: &[Batch<T>]) -> Result<ImportanceReport> {
    if model.prompts.stage != PruneStage::Dense {
        return Err(Error::Pipeline("importance scores need an unpruned model".into()));
    }
    if model.prompts.visual_len() == 0 {
        return Err(Error::Config("model has no visual prompts to score".into()));
    }
    if batches.is_empty() {
        return Err(Error::Data("importance scoring needs at least one batch".into()));
    }
    let mut tensors: Vec<_> = model.backbone.named_params().into_iter().map(|(_, t)| t).collect();
    tensors.extend(model.trainable().into_iter().map(|p| p.tensor));
    let flags: Vec<bool> = tensors.iter().map(|t| t.requires_grad()).collect();
    for t in &tensors {
        t.set_requires_grad(false);
    }
    let mut acc = ImportanceAccumulator::new(&model.prompts);
    let result = batches.iter().try_for_each(|b| acc.add_batch(model, b));
    for (t, on) in tensors.iter().zip(flags) {
        t.set_requires_grad(on);
    }
    result?;
    acc.finish()
}

/// Scores over one pass of `samples` in storage order.
pub fn importance_over<T: Scalar>(
    model: &Model<T>,
    samples: &Samples<T>,
    batch_size: usize,
) -> Result<ImportanceReport> {
    importance_scores(model, &samples.batches(model.config(), batch_size)?)
}

/// Indices of the `count` lowest scores; among equal scores the higher index
/// goes first so the lower one is kept.
fn lowest(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    idx.truncate(count);
    idx
}

fn prune_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("prune ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

fn check_cover<T: Scalar>(report: &ImportanceReport, prompts: &PromptSet<T>) -> Result<()> {
    let (m, r) = (prompts.visual_len(), prompts.segments());
    if report.layers.len() != prompts.layers.len()
        || report.segments != r
        || report.layers.iter().any(|l| l.token.len() != m || l.segment.len() != m * r)
    {
        return Err(Error::Config("importance report does not match the prompt layout".into()));
    }
    Ok(())
}

/// Sets ρ = 0 for the `floor(ratio·M)` lowest-scoring tokens of every layer.
pub fn token_prune<T: Scalar>(report: &mut ImportanceReport, prompts: &mut PromptSet<T>, ratio: f64) -> Result<()> {
    check_ratio(ratio)?;
    check_cover(report, prompts)?;
    if prompts.stage != PruneStage::Dense {
        return Err(Error::Pipeline(format!("token pruning runs once, prompts are {:?}", prompts.stage)));
    }
    let count = prune_count(ratio, prompts.visual_len());
    for (li, lp) in report.layers.iter_mut().zip(&mut prompts.layers) {
        li.token_keep = vec![true; li.token.len()];
        for k in lowest(&li.token, count) {
            li.token_keep[k] = false;
        }
        lp.token_keep.clone_from(&li.token_keep);
    }
    report.token_ratio = Some(ratio);
    prompts.stage = PruneStage::TokenPruned;
    Ok(())
}

/// Within each kept token, zeroes the `floor(ratio·R)` lowest-scoring
/// segments. A token that loses every segment is pruned as a whole.
pub fn segment_prune<T: Scalar>(report: &mut ImportanceReport, prompts: &mut PromptSet<T>, ratio: f64) -> Result<()> {
    check_ratio(ratio)?;
    let r = prompts.segments();
    if r == 0 || prompts.embed_dim % r != 0 {
        return Err(Error::Config(format!("width {} not divisible into {r} segments", prompts.embed_dim)));
    }
    check_cover(report, prompts)?;
    if prompts.stage != PruneStage::TokenPruned {
        return Err(Error::Pipeline(format!(
            "segment pruning needs token-pruned prompts, got {:?}",
            prompts.stage
        )));
    }
    let count = prune_count(ratio, r);
    for (li, lp) in report.layers.iter_mut().zip(&mut prompts.layers) {
        li.segment_keep = vec![true; li.segment.len()];
        for k in 0..li.token.len() {
            if !li.token_keep[k] {
                continue;
            }
            let row = &li.segment[k * r..(k + 1) * r];
            for j in lowest(row, count) {
                li.segment_keep[k * r + j] = false;
            }
            if count == r {
                li.token_keep[k] = false;
            }
        }
        lp.token_keep.clone_from(&li.token_keep);
        lp.segment_keep.clone_from(&li.segment_keep);
    }
    report.segment_ratio = Some(ratio);
    prompts.stage = PruneStage::SegmentPruned;
    Ok(())
}

/// One more training run of the surviving prompts and head with the
/// original learning rate and weight decay.
pub fn rewind<T: Scalar>(model: &Model<T>, cfg: &TrainConfig, data: RunData<'_, T>) -> Result<RunRecord> {
    if model.prompts.stage == PruneStage::Dense {
        return Err(Error::Pipeline("rewind needs pruned prompts".into()));
    }
    continue_training(model, cfg, data, "rewind")
}

#[derive(Serialize)]
struct ScoreRow {
    layer: usize,
    token: usize,
    segment: i64,
    score: f64,
    pruned: u8,
}

impl ImportanceReport {
    pub fn pruned_tokens(&self) -> usize {
        self.layers.iter().map(|l| l.token_keep.iter().filter(|&&k| !k).count()).sum()
    }

    /// Rows `layer,token,segment,score,pruned` with segment -1 on token rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let r = self.segments;
        for (l, li) in self.layers.iter().enumerate() {
            for (k, &score) in li.token.iter().enumerate() {
                w.serialize(ScoreRow {
                    layer: l,
                    token: k,
                    segment: -1,
                    score,
                    pruned: u8::from(!li.token_keep[k]),
                })?;
            }
            for (i, &score) in li.segment.iter().enumerate() {
                let (k, j) = (i / r, i % r);
                w.serialize(ScoreRow {
                    layer: l,
                    token: k,
                    segment: j as i64,
                    score,
                    pruned: u8::from(!(li.token_keep[k] && li.segment_keep[i])),
                })?;
            }
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))
    }
}
