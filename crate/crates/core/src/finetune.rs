//! Siamese fine-tuning with in-batch negatives.
//!
//! A batch of `n` triples is encoded twice: `(head, relation)` pairs and tail
//! entities. Every cross cell `(i, j)` is supervised, positive when tail `j`
//! completes query `i`. The per-cell loss is a focal term on `p = (cos + 1) / 2`
//! plus a sigmoid term on the L1 distance between the two pooled vectors.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::eval::{evaluate, EncodeConfig, RankingReport};
use crate::kg::{build_filter_index, FilterIndex, FilterScope, KnowledgeGraph, Split, Triple};
use crate::log::JsonlLog;
use crate::model::{pooled_rows, scatter_pooled, Float, Model, Params, TokenBatch};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, GroupLr, LinearSchedule};
use crate::sampler::stream_rng;
use crate::text::TokenizedKg;
use crate::{Error, Result};

pub const P_CLAMP: f64 = 1e-6;

/// Cell labels: 1 positive, 0 negative, -1 not supervised.
pub type LabelMatrix = Array2<i8>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "finetune.alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "finetune.gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// How off-diagonal cells are supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    /// Every cell; off-diagonal positives come from the label filter.
    #[default]
    InBatch,
    /// Diagonal positives plus `k` sampled off-diagonal negatives per row.
    Random(usize),
}

/// `y[i][j] = 1` iff `i == j` or tail `j` completes query `i` according to `filter`.
pub fn build_label_matrix(batch: &[Triple], filter: &FilterIndex) -> LabelMatrix {
    let n = batch.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let q = &batch[i];
        (i == j || filter.contains(q.head, q.relation, batch[j].tail)) as i8
    })
}

/// Keeps the diagonal and `k` random off-diagonal cells per row that are not known
/// completions; everything else is unsupervised.
pub fn random_negative_labels<R: Rng + ?Sized>(
    batch: &[Triple],
    filter: &FilterIndex,
    k: usize,
    rng: &mut R,
) -> LabelMatrix {
    let n = batch.len();
    let mut y = Array2::from_elem((n, n), -1i8);
    for i in 0..n {
        y[[i, i]] = 1;
        let q = &batch[i];
        let pool: Vec<usize> = (0..n)
            .filter(|&j| j != i && !filter.contains(q.head, q.relation, batch[j].tail))
            .collect();
        for &j in pool.choose_multiple(rng, k.min(pool.len())) {
            y[[i, j]] = 0;
        }
    }
    y
}

#[derive(Debug, Clone)]
pub struct ScoreBatch {
    /// Cosine `d1` per cell.
    pub scores: Array2<f64>,
    /// Rows of either side with zero norm (their cosines are 0).
    pub zero_norm: usize,
}

/// Cosine matrix between query and entity vectors.
pub fn score_batch<A: Float>(pairs: ArrayView2<A>, entities: ArrayView2<A>) -> ScoreBatch {
    let zero_norm = pairs
        .outer_iter()
        .chain(entities.outer_iter())
        .filter(|r| r.iter().all(|x| *x == A::zero()))
        .count();
    if zero_norm > 0 {
        warn!(zero_norm, "zero-norm vectors in score batch");
    }
    ScoreBatch {
        scores: crate::eval::cosine_matrix(pairs, entities),
        zero_norm,
    }
}

/// `Σ_k |u_ik - v_jk|` per cell.
pub fn diff_sums<A: Float>(pairs: ArrayView2<A>, entities: ArrayView2<A>) -> Array2<f64> {
    let n = pairs.nrows();
    let m = entities.nrows();
    Array2::from_shape_fn((n, m), |(i, j)| {
        pairs
            .row(i)
            .iter()
            .zip(entities.row(j))
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap())
            .sum()
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_p(d1: f64) -> (f64, bool) {
    let p = (d1 + 1.0) / 2.0;
    let c = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    (c, c != p)
}

/// `x^g`, with `0^0 = 1`.
fn powg(x: f64, g: f64) -> f64 {
    if g == 0.0 {
        1.0
    } else {
        x.powf(g)
    }
}

/// Focal term of one cell and its derivative with respect to `d1`.
fn focal(d1: f64, positive: bool, fp: FocalParams) -> (f64, f64) {
    let (p, clamped) = clamp_p(d1);
    let g = fp.gamma;
    let (loss, dp) = if positive {
        let w = powg(1.0 - p, g);
        let dw = if g == 0.0 { 0.0 } else { -g * powg(1.0 - p, g - 1.0) };
        let loss = -fp.alpha * w * p.ln();
        (loss, -fp.alpha * (dw * p.ln() + w / p))
    } else {
        let w = powg(p, g);
        let dw = if g == 0.0 { 0.0 } else { g * powg(p, g - 1.0) };
        let l = (1.0 - p).ln();
        (-(1.0 - fp.alpha) * w * l, -(1.0 - fp.alpha) * (dw * l - w / (1.0 - p)))
    };
    (loss, if clamped { 0.0 } else { dp * 0.5 })
}

/// Distance term of one cell and its derivative with respect to the L1 distance.
fn distance(sum: f64, positive: bool) -> (f64, f64) {
    let s = sigmoid(sum);
    let ds = s * (1.0 - s);
    if positive {
        (s, ds)
    } else {
        (1.0 - s, -ds)
    }
}

/// Joint loss components: mean focal and mean distance terms over supervised cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub focal: f64,
    pub distance: f64,
    pub total: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Mean over supervised cells of focal + distance terms.
pub fn joint_loss(
    scores: ArrayView2<f64>,
    diff_sums: ArrayView2<f64>,
    labels: &LabelMatrix,
    fp: FocalParams,
) -> Result<JointLoss> {
    let mut out = JointLoss::default();
    for ((i, j), &y) in labels.indexed_iter() {
        if y < 0 {
            continue;
        }
        let (d1, d2) = (scores[[i, j]], diff_sums[[i, j]]);
        if !d1.is_finite() || !d2.is_finite() {
            return Err(Error::NonFinite {
                what: "score".into(),
                context: format!("cell ({i}, {j}): cosine {d1}, distance {d2}"),
            });
        }
        let positive = y == 1;
        out.focal += focal(d1, positive, fp).0;
        out.distance += distance(d2, positive).0;
        if positive {
            out.positives += 1;
        } else {
            out.negatives += 1;
        }
    }
    let cells = (out.positives + out.negatives).max(1) as f64;
    out.focal /= cells;
    out.distance /= cells;
    out.total = out.focal + out.distance;
    Ok(out)
}

/// Joint loss and its gradient with respect to both sets of vectors.
pub fn joint_loss_grad<A: Float>(
    pairs: ArrayView2<A>,
    entities: ArrayView2<A>,
    labels: &LabelMatrix,
    fp: FocalParams,
) -> Result<(JointLoss, Array2<A>, Array2<A>)> {
    let u = pairs.mapv(|x| x.to_f64().unwrap());
    let v = entities.mapv(|x| x.to_f64().unwrap());
    let scores = crate::eval::cosine_matrix(u.view(), v.view());
    let sums = diff_sums(u.view(), v.view());
    let loss = joint_loss(scores.view(), sums.view(), labels, fp)?;
    let cells = (loss.positives + loss.negatives).max(1) as f64;

    let (n, m) = labels.dim();
    let mut dc = Array2::<f64>::zeros((n, m));
    let mut dd = Array2::<f64>::zeros((n, m));
    for ((i, j), &y) in labels.indexed_iter() {
        if y < 0 {
            continue;
        }
        dc[[i, j]] = focal(scores[[i, j]], y == 1, fp).1 / cells;
        dd[[i, j]] = distance(sums[[i, j]], y == 1).1 / cells;
    }

    let norms = |x: &Array2<f64>| -> Array1<f64> { x.map_axis(Axis(1), |r| r.dot(&r).sqrt()) };
    let (nu, nv) = (norms(&u), norms(&v));
    let unit = |x: &Array2<f64>, nx: &Array1<f64>| {
        let mut out = x.clone();
        for (mut r, &n) in out.outer_iter_mut().zip(nx) {
            if n > 0.0 {
                r.mapv_inplace(|a| a / n);
            }
        }
        out
    };
    let (un, vn) = (unit(&u, &nu), unit(&v, &nv));
    let dcs = &dc * &scores;
    // d cos(u, v) / du = (v̂ - cos · û) / |u|
    let mut du = dc.dot(&vn);
    let mut dv = dc.t().dot(&un);
    for (i, mut r) in du.outer_iter_mut().enumerate() {
        let s = dcs.row(i).sum();
        if nu[i] > 0.0 {
            r.zip_mut_with(&un.row(i), |a, &b| *a = (*a - s * b) / nu[i]);
        } else {
            r.fill(0.0);
        }
    }
    for (j, mut r) in dv.outer_iter_mut().enumerate() {
        let s = dcs.column(j).sum();
        if nv[j] > 0.0 {
            r.zip_mut_with(&vn.row(j), |a, &b| *a = (*a - s * b) / nv[j]);
        } else {
            r.fill(0.0);
        }
    }
    for ((i, j), &w) in dd.indexed_iter() {
        if w == 0.0 {
            continue;
        }
        for k in 0..u.ncols() {
            let diff = u[[i, k]] - v[[j, k]];
            let sgn = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            du[[i, k]] += w * sgn;
            dv[[j, k]] -= w * sgn;
        }
    }
    let cast = |x: Array2<f64>| x.mapv(|a| A::from_f64(a).unwrap());
    Ok((loss, cast(du), cast(dv)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub lr: GroupLr,
    pub warmup: f64,
    pub clip_norm: f64,
    pub negatives: Negatives,
    pub encode: EncodeConfig,
    pub adamw: AdamWConfig,
    pub seed: u64,
    /// Validation queries used for model selection; 0 means all.
    pub valid_limit: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            batch_size: 128,
            alpha: 0.8,
            gamma: 2.0,
            lr: GroupLr {
                encoder: 1e-3,
                head: 1e-3,
            },
            warmup: 0.05,
            clip_norm: 1.0,
            negatives: Negatives::InBatch,
            encode: EncodeConfig::default(),
            adamw: AdamWConfig::default(),
            seed: 42,
            valid_limit: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn focal(&self) -> FocalParams {
        FocalParams {
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.focal().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("finetune.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Config("finetune.warmup must lie in [0, 1)".into()));
        }
        if self.encode.pair_max_len < 4 || self.encode.entity_max_len < 3 {
            return Err(Error::Config("finetune sequence lengths are too small".into()));
        }
        Ok(())
    }
}

/// One Siamese update. Returns the loss and the pre-clip gradient norm.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    texts: &TokenizedKg,
    batch: &[Triple],
    labels: &LabelMatrix,
    cfg: &FinetuneConfig,
    lr: GroupLr,
    rng: &mut ChaCha8Rng,
) -> Result<(JointLoss, f64)> {
    let enc = &cfg.encode;
    let pair_layouts: Vec<_> = batch
        .iter()
        .map(|t| texts.pair_sequence(t.head, t.relation, enc.pair_max_len))
        .collect();
    let ent_layouts: Vec<_> = batch
        .iter()
        .map(|t| texts.entity_sequence(t.tail, enc.entity_max_len))
        .collect();
    let pb = TokenBatch::from_layouts(&pair_layouts);
    let eb = TokenBatch::from_layouts(&ent_layouts);
    let (ps, pc) = model.forward_train(&pb, rng)?;
    let (es, ec) = model.forward_train(&eb, rng)?;
    let u = pooled_rows(&ps, &pb);
    let v = pooled_rows(&es, &eb);
    let (loss, du, dv) = joint_loss_grad(u.view(), v.view(), labels, cfg.focal())?;
    let mut grads: Params<f32> = model.params.zeros_like();
    model.backward(scatter_pooled(du.view(), &pb), &pc, &mut grads);
    model.backward(scatter_pooled(dv.view(), &eb), &ec, &mut grads);
    let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            what: "fine-tuning gradient".into(),
            context: format!("lr {:.3e}", lr.encoder),
        });
    }
    opt.step(&mut model.params, &grads, lr);
    Ok((loss, norm))
}

#[derive(Debug, Clone, Serialize)]
struct StepRecord {
    phase: &'static str,
    epoch: usize,
    step: usize,
    lr_encoder: f64,
    focal: f64,
    distance: f64,
    total: f64,
    positives: usize,
    negatives: usize,
    grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    /// 0 is the model before any update.
    pub epoch: usize,
    /// Mean training loss; absent before the first update.
    pub train_loss: Option<f64>,
    pub valid_hits10: f64,
    pub valid_mrr: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters with the best validation Hits@10.
    pub model: Model<f32>,
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub best_valid: RankingReport,
}

/// Validation queries, optionally a fixed prefix of a seeded shuffle.
fn validation_graph(kg: &KnowledgeGraph, limit: usize, seed: u64) -> KnowledgeGraph {
    let mut g = kg.clone();
    if limit > 0 && limit < g.valid.len() {
        let mut base: Vec<Triple> = kg.base_triples(Split::Valid).copied().collect();
        base.shuffle(&mut stream_rng(seed, 0, u64::MAX - 2));
        base.truncate(limit.div_ceil(2));
        g.valid = base;
    }
    g
}

/// Trains on the inverse-augmented training triples and keeps the parameters with
/// the best validation Hits@10 (evaluated before training and after every epoch).
pub fn run_finetune(
    kg: &KnowledgeGraph,
    texts: &TokenizedKg,
    mut model: Model<f32>,
    cfg: &FinetuneConfig,
    log: &mut JsonlLog,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if !kg.is_augmented() {
        return Err(Error::Config(
            "fine-tuning needs a graph with inverse relations".into(),
        ));
    }
    let train = kg.train.clone();
    if train.is_empty() {
        return Err(Error::Config("no training triples to fine-tune on".into()));
    }
    let label_filter = build_filter_index(kg, FilterScope::TrainOnly);
    let eval_filter = build_filter_index(kg, FilterScope::All);
    let valid_kg = validation_graph(kg, cfg.valid_limit, cfg.seed);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(steps_per_epoch * cfg.epochs, cfg.warmup);
    let mut opt = AdamW::new(&model.params, cfg.adamw);

    let validate = |m: &Model<f32>| evaluate(m, &valid_kg, texts, Split::Valid, &eval_filter, &cfg.encode);
    let initial = validate(&model)?;
    let mut history = vec![FinetuneEpoch {
        epoch: 0,
        train_loss: None,
        valid_hits10: initial.hits10,
        valid_mrr: initial.mrr,
    }];
    log.record(&serde_json::json!({"phase": "finetune_epoch", "record": history[0]}))?;
    let mut best = (model.clone(), 0, initial);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64, u64::MAX - 1));
        let mut rng = stream_rng(cfg.seed ^ 0x5EED_F17E, epoch as u64, 0);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Triple> = idx.iter().map(|&i| train[i]).collect();
            let labels = match cfg.negatives {
                Negatives::InBatch => build_label_matrix(&batch, &label_filter),
                Negatives::Random(k) => random_negative_labels(&batch, &label_filter, k, &mut rng),
            };
            let lr = cfg.lr.scaled(schedule.factor(step));
            let (loss, norm) =
                finetune_step(&mut model, &mut opt, texts, &batch, &labels, cfg, lr, &mut rng)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    what: "fine-tuning loss".into(),
                    context: format!("epoch {epoch}, step {step}"),
                });
            }
            total += loss.total * batch.len() as f64;
            log.record(&StepRecord {
                phase: "finetune",
                epoch,
                step,
                lr_encoder: lr.encoder,
                focal: loss.focal,
                distance: loss.distance,
                total: loss.total,
                positives: loss.positives,
                negatives: loss.negatives,
                grad_norm: norm,
            })?;
            step += 1;
        }
        let report = validate(&model)?;
        let record = FinetuneEpoch {
            epoch,
            train_loss: Some(total / train.len() as f64),
            valid_hits10: report.hits10,
            valid_mrr: report.mrr,
        };
        info!(epoch, loss = record.train_loss, hits10 = report.hits10, "fine-tuning epoch");
        log.record(&serde_json::json!({"phase": "finetune_epoch", "record": record}))?;
        history.push(record);
        if report.hits10 > best.2.hits10 {
            best = (model.clone(), epoch, report);
        }
    }
    Ok(FinetuneOutcome {
        model: best.0,
        history,
        best_epoch: best.1,
        best_valid: best.2,
    })
}
