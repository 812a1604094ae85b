//! Multi-task pre-training: cross-entropy over masked-item targets plus cross-entropy
//! over token-masking targets, each averaged over its own target positions.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::kg::{KnowledgeGraph, Split, Triple};
use crate::log::JsonlLog;
use crate::model::{Float, Model, Params, TokenBatch};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, EarlyStopper, GroupLr, LinearSchedule, Progress};
use crate::sampler::{build_epoch, stream_rng, PretrainMode, PretrainSample, TaskTag};
use crate::text::{TokenId, TokenizedKg, PAD};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: GroupLr,
    pub warmup: f64,
    pub patience: usize,
    pub clip_norm: f64,
    pub max_len: usize,
    pub mode: PretrainMode,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: GroupLr {
                encoder: 1e-4,
                head: 2e-4,
            },
            warmup: 0.05,
            patience: 3,
            clip_norm: 1.0,
            max_len: 128,
            mode: PretrainMode::Multitask,
            adamw: AdamWConfig::default(),
            seed: 42,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pretrain.{m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad("warmup must lie in [0, 1)");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.lr.encoder < 0.0 || self.lr.head < 0.0 {
            return bad("learning rates must be non-negative");
        }
        if self.max_len < 16 {
            return bad("max_len must be at least 16");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub mem_head: usize,
    pub mem_tail: usize,
    pub mrm: usize,
    pub mlm_only: usize,
}

impl TaskCounts {
    pub fn add(&mut self, tag: TaskTag) {
        match tag {
            TaskTag::MemHead => self.mem_head += 1,
            TaskTag::MemTail => self.mem_tail += 1,
            TaskTag::Mrm => self.mrm += 1,
            TaskTag::MlmOnly => self.mlm_only += 1,
        }
    }

    pub fn merge(&mut self, other: &TaskCounts) {
        self.mem_head += other.mem_head;
        self.mem_tail += other.mem_tail;
        self.mrm += other.mrm;
        self.mlm_only += other.mlm_only;
    }

    pub fn total(&self) -> usize {
        self.mem_head + self.mem_tail + self.mrm + self.mlm_only
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLossReport {
    pub mlm_loss: f64,
    pub mim_loss: f64,
    pub total: f64,
    pub mlm_targets: usize,
    pub mim_targets: usize,
    pub tasks: TaskCounts,
}

/// Mean cross-entropy of `logits` rows against `targets` and its gradient with
/// respect to the logits. No rows gives `(0, empty)`.
pub fn masked_cross_entropy<A: Float>(logits: ArrayView2<A>, targets: &[TokenId]) -> (f64, Array2<A>) {
    let n = targets.len();
    let mut grad = Array2::zeros(logits.dim());
    if n == 0 {
        return (0.0, grad);
    }
    let inv_n = A::from_f64(1.0 / n as f64).unwrap();
    let mut loss = 0.0;
    for ((row, mut g), &t) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(targets) {
        let max = row.fold(A::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut sum = A::zero();
        for (gi, &v) in g.iter_mut().zip(row.iter()) {
            *gi = (v - max).exp();
            sum += *gi;
        }
        let lse = sum.ln() + max;
        loss += (lse - row[t as usize]).to_f64().unwrap();
        g.mapv_inplace(|e| e / sum * inv_n);
        g[t as usize] -= inv_n;
    }
    (loss / n as f64, grad)
}

/// Token batch of masked inputs; description slots blanked to PAD are hidden from attention.
pub fn sample_batch(samples: &[&PretrainSample]) -> TokenBatch {
    let seq_len = samples
        .iter()
        .map(|s| s.layout.content_len())
        .max()
        .unwrap_or(0)
        .max(1);
    let mut ids = Vec::with_capacity(samples.len() * seq_len);
    let mut mask = Vec::with_capacity(samples.len() * seq_len);
    for s in samples {
        let len = s.layout.content_len();
        for i in 0..seq_len {
            let t = s.x.get(i).copied().unwrap_or(PAD);
            ids.push(t);
            mask.push(i < len && t != PAD);
        }
    }
    TokenBatch {
        ids,
        mask,
        batch: samples.len(),
        seq_len,
    }
}

/// Loss of `samples`. With `train = Some((rng, grads))` the pass runs in training
/// mode and accumulates gradients; the returned head cache statistics are folded
/// into the model's running statistics by [`pretrain_step`].
pub fn pretrain_loss<A: Float>(
    model: &Model<A>,
    samples: &[&PretrainSample],
    train: Option<(&mut ChaCha8Rng, &mut Params<A>)>,
) -> Result<(PretrainLossReport, Option<crate::model::HeadCache<A>>)> {
    let batch = sample_batch(samples);
    let mut mim_rows = Vec::new();
    let mut mim_targets = Vec::new();
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut tasks = TaskCounts::default();
    for (b, s) in samples.iter().enumerate() {
        tasks.add(s.task);
        for i in 0..batch.seq_len.min(s.y1.len()) {
            if s.y1[i] != PAD {
                mim_rows.push(b * batch.seq_len + i);
                mim_targets.push(s.y1[i]);
            } else if s.y2[i] != PAD {
                mlm_rows.push(b * batch.seq_len + i);
                mlm_targets.push(s.y2[i]);
            }
        }
    }
    let rows: Vec<usize> = mim_rows.iter().chain(&mlm_rows).copied().collect();
    let n_mim = mim_rows.len();
    let mut report = PretrainLossReport {
        mlm_targets: mlm_rows.len(),
        mim_targets: n_mim,
        tasks,
        ..Default::default()
    };
    let is_train = train.is_some();
    let (states, cache, grads) = match train {
        Some((rng, grads)) => {
            let (s, c) = model.forward_train(&batch, rng)?;
            (s, Some(c), Some(grads))
        }
        None => (model.forward_infer(&batch)?, None, None),
    };
    if rows.is_empty() {
        return Ok((report, None));
    }
    let selected = states.select(Axis(0), &rows);
    let (logits, head_cache) = model.head_forward(selected.view(), is_train);
    let (mim, d_mim) = masked_cross_entropy(logits.slice(ndarray::s![..n_mim, ..]), &mim_targets);
    let (mlm, d_mlm) = masked_cross_entropy(logits.slice(ndarray::s![n_mim.., ..]), &mlm_targets);
    report.mim_loss = mim;
    report.mlm_loss = mlm;
    report.total = mim + mlm;
    if let (Some(cache), Some(grads)) = (cache, grads) {
        let d_logits = ndarray::concatenate(Axis(0), &[d_mim.view(), d_mlm.view()]).unwrap();
        let d_sel = model.head_backward(d_logits.view(), &head_cache, grads);
        let mut d_states = Array2::zeros(states.dim());
        for (k, &r) in rows.iter().enumerate() {
            d_states.row_mut(r).assign(&d_sel.row(k));
        }
        model.backward(d_states, &cache, grads);
        return Ok((report, Some(head_cache)));
    }
    Ok((report, None))
}

/// One optimizer update on `samples`. Returns the loss report and the pre-clip
/// gradient norm.
pub fn pretrain_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    samples: &[&PretrainSample],
    lr: GroupLr,
    clip_norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(PretrainLossReport, f64)> {
    if samples.is_empty() {
        return Err(Error::Config("pre-training batch is empty".into()));
    }
    let mut grads = model.params.zeros_like();
    let (report, head_cache) = pretrain_loss(model, samples, Some((rng, &mut grads)))?;
    if !report.total.is_finite() {
        return Ok((report, f64::NAN));
    }
    let norm = clip_grad_norm(&mut grads, clip_norm);
    opt.step(&mut model.params, &grads, lr);
    if let Some(c) = head_cache {
        model.update_bn_stats(&c);
    }
    Ok((report, norm))
}

#[derive(Debug, Clone, Serialize)]
struct StepRecord {
    phase: &'static str,
    epoch: usize,
    step: usize,
    lr_encoder: f64,
    lr_head: f64,
    mlm: f64,
    mim: f64,
    total: f64,
    grad_norm: f64,
    tasks: TaskCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_total: f64,
    pub valid: PretrainLossReport,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model<f32>,
    pub history: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Task counts over all training samples drawn.
    pub tasks: TaskCounts,
}

/// Validation loss over fixed samples, batched.
pub fn validation_loss(
    model: &Model<f32>,
    samples: &[PretrainSample],
    batch_size: usize,
) -> Result<PretrainLossReport> {
    let mut mlm = 0.0;
    let mut mim = 0.0;
    let mut out = PretrainLossReport::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PretrainSample> = chunk.iter().collect();
        let (r, _) = pretrain_loss(model, &refs, None)?;
        mlm += r.mlm_loss * r.mlm_targets as f64;
        mim += r.mim_loss * r.mim_targets as f64;
        out.mlm_targets += r.mlm_targets;
        out.mim_targets += r.mim_targets;
        out.tasks.merge(&r.tasks);
    }
    out.mlm_loss = if out.mlm_targets > 0 { mlm / out.mlm_targets as f64 } else { 0.0 };
    out.mim_loss = if out.mim_targets > 0 { mim / out.mim_targets as f64 } else { 0.0 };
    out.total = out.mlm_loss + out.mim_loss;
    Ok(out)
}

/// Trains on the base training triples with validation-loss early stopping.
pub fn run_pretraining(
    kg: &KnowledgeGraph,
    texts: &TokenizedKg,
    mut model: Model<f32>,
    cfg: &PretrainConfig,
    log: &mut JsonlLog,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let exec = model.exec;
    let vocab = model.config.vocab_size;
    let max_len = cfg.max_len.min(model.config.max_len);
    let train: Vec<Triple> = kg.base_triples(Split::Train).copied().collect();
    let valid: Vec<Triple> = kg.base_triples(Split::Valid).copied().collect();
    if train.is_empty() {
        return Err(Error::Config("no training triples to pre-train on".into()));
    }
    // fixed validation draws so epochs are comparable
    let valid_samples = build_epoch(&valid, texts, vocab, max_len, cfg.mode, cfg.seed, u64::MAX, exec);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(steps_per_epoch * cfg.epochs, cfg.warmup);
    let mut opt = AdamW::new(&model.params, cfg.adamw);
    let mut stopper = EarlyStopper::minimizing(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut tasks = TaskCounts::default();
    let mut stopped_early = false;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let samples = build_epoch(&train, texts, vocab, max_len, cfg.mode, cfg.seed, epoch as u64, exec);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64, u64::MAX - 1));
        let mut dropout_rng = stream_rng(cfg.seed ^ 0xD1B5_4A32_D192_ED03, epoch as u64, 0);
        let mut epoch_total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&PretrainSample> = idx.iter().map(|&i| &samples[i]).collect();
            let lr = cfg.lr.scaled(schedule.factor(step));
            let (report, norm) =
                pretrain_step(&mut model, &mut opt, &batch, lr, cfg.clip_norm, &mut dropout_rng)?;
            if !report.total.is_finite() || !norm.is_finite() {
                let ids: Vec<String> = idx
                    .iter()
                    .map(|&i| {
                        let t = train[i];
                        format!("{}:{}:{}", t.head, t.relation, t.tail)
                    })
                    .collect();
                return Err(Error::NonFinite {
                    what: "pre-training loss".into(),
                    context: format!(
                        "step {step}, lr {:.3e}/{:.3e}, batch triples [{}]",
                        lr.encoder,
                        lr.head,
                        ids.join(", ")
                    ),
                });
            }
            tasks.merge(&report.tasks);
            epoch_total += report.total * batch.len() as f64;
            log.record(&StepRecord {
                phase: "pretrain",
                epoch,
                step,
                lr_encoder: lr.encoder,
                lr_head: lr.head,
                mlm: report.mlm_loss,
                mim: report.mim_loss,
                total: report.total,
                grad_norm: norm,
                tasks: report.tasks,
            })?;
            step += 1;
        }
        let valid_report = validation_loss(&model, &valid_samples, cfg.batch_size.max(64))?;
        let record = PretrainEpoch {
            epoch,
            train_total: epoch_total / train.len() as f64,
            valid: valid_report,
        };
        info!(
            epoch,
            train = record.train_total,
            valid = valid_report.total,
            "pre-training epoch"
        );
        log.record(&serde_json::json!({"phase": "pretrain_epoch", "record": record}))?;
        history.push(record);
        match stopper.observe(valid_report.total) {
            Progress::Improved => best = model.clone(),
            Progress::Stale => {}
            Progress::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(PretrainOutcome {
        model: best,
        history,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        tasks,
    })
}
