use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    batch_norm_backward, batch_norm_infer, batch_norm_train, cst, dropout_mask, gelu,
    gelu_backward, layer_norm, layer_norm_backward, linear, masked_softmax_rows, NormCache,
    BN_EPS,
};
use super::params::{BlockIds, TensorId};
use super::{EncoderConfig, Float, ParamLayout, Params};
use crate::text::{SequenceLayout, TokenId, PAD};
use crate::{Error, Exec, Result};

/// Running-statistics momentum of the head's batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// `batch` sequences of `seq_len` tokens, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<TokenId>, mask: Vec<bool>, batch: usize, seq_len: usize) -> Result<Self> {
        if ids.len() != batch * seq_len || mask.len() != ids.len() {
            return Err(Error::Config(format!(
                "token batch of {batch}x{seq_len} got {} ids and {} mask entries",
                ids.len(),
                mask.len()
            )));
        }
        Ok(TokenBatch {
            ids,
            mask,
            batch,
            seq_len,
        })
    }

    /// Stacks layouts, cutting the shared PAD tail down to the longest content.
    pub fn from_layouts<'a, I>(layouts: I) -> Self
    where
        I: IntoIterator<Item = &'a SequenceLayout>,
    {
        let layouts: Vec<&SequenceLayout> = layouts.into_iter().collect();
        let seq_len = layouts
            .iter()
            .map(|l| l.content_len())
            .max()
            .unwrap_or(0)
            .max(1);
        let mut ids = Vec::with_capacity(layouts.len() * seq_len);
        let mut mask = Vec::with_capacity(layouts.len() * seq_len);
        for l in &layouts {
            for i in 0..seq_len {
                ids.push(l.tokens.get(i).copied().unwrap_or(PAD));
                mask.push(i < l.content_len());
            }
        }
        TokenBatch {
            ids,
            mask,
            batch: layouts.len(),
            seq_len,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    /// Row of the CLS state of sequence `b`.
    pub fn cls_row(&self, b: usize) -> usize {
        b * self.seq_len
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<A> {
    /// `[len, hidden]`
    pub token_states: Array2<A>,
    pub pooled: Array1<A>,
}

#[derive(Debug, Clone)]
struct BlockCache<A> {
    x_in: Array2<A>,
    q: Array2<A>,
    k: Array2<A>,
    v: Array2<A>,
    /// One `[T, T]` matrix per (sequence, head).
    probs: Vec<Array2<A>>,
    ctx: Array2<A>,
    drop_attn: Option<Array2<A>>,
    ln1: NormCache<A>,
    x1: Array2<A>,
    z: Array2<A>,
    act: Array2<A>,
    drop_ffn: Option<Array2<A>>,
    ln2: NormCache<A>,
}

/// Activations kept by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<A> {
    ids: Vec<TokenId>,
    mask: Vec<bool>,
    batch: usize,
    seq_len: usize,
    emb_ln: NormCache<A>,
    emb_drop: Option<Array2<A>>,
    blocks: Vec<BlockCache<A>>,
}

impl<A> EncoderCache<A> {
    /// Attention weights of `layer` for sequence `b`, head `h`.
    pub fn attention(&self, layer: usize, b: usize, h: usize) -> &Array2<A> {
        let heads = self.blocks[layer].probs.len() / self.batch;
        &self.blocks[layer].probs[b * heads + h]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

#[derive(Debug, Clone)]
enum HeadNorm<A> {
    Batch {
        cache: NormCache<A>,
        mean: Array1<A>,
        var: Array1<A>,
    },
    Running {
        xhat: Array2<A>,
        inv_std: Array1<A>,
    },
}

#[derive(Debug, Clone)]
pub struct HeadCache<A> {
    x: Array2<A>,
    z: Array2<A>,
    normed: Array2<A>,
    norm: HeadNorm<A>,
}

impl<A> HeadCache<A> {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }
}

/// Encoder parameters plus the head's running normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<A> {
    pub config: EncoderConfig,
    pub params: Params<A>,
    pub bn_mean: Array1<A>,
    pub bn_var: Array1<A>,
    pub exec: Exec,
}

impl<A: Float> Model<A> {
    /// Gaussian(0, 0.02) weights, zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(ParamLayout::new(&config));
        let params = Params::init(layout, 0.02, seed);
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: EncoderConfig, params: Params<A>) -> Self {
        let d = config.hidden;
        Model {
            config,
            params,
            bn_mean: Array1::zeros(d),
            bn_var: Array1::ones(d),
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.params.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.data.len()
    }

    pub fn cast<B: Float>(&self) -> Model<B> {
        let conv = |a: &Array1<A>| a.mapv(|x| B::from_f64(x.to_f64().unwrap()).unwrap());
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            bn_mean: conv(&self.bn_mean),
            bn_var: conv(&self.bn_var),
            exec: self.exec,
        }
    }

    fn check(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq_len > self.config.max_len {
            return Err(Error::Config(format!(
                "sequence length {} exceeds encoder max_len {}",
                batch.seq_len, self.config.max_len
            )));
        }
        if let Some(&id) = batch
            .ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Inference-mode hidden states `[batch * seq_len, hidden]`.
    pub fn forward_infer(&self, batch: &TokenBatch) -> Result<Array2<A>> {
        Ok(self.forward_impl(batch, None)?.0)
    }

    /// Training-mode forward; dropout masks come from `rng`.
    pub fn forward_train(
        &self,
        batch: &TokenBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<A>, EncoderCache<A>)> {
        self.forward_impl(batch, Some(rng))
    }

    /// Forward without dropout that still records activations (for gradient checks).
    pub fn forward_cached(&self, batch: &TokenBatch) -> Result<(Array2<A>, EncoderCache<A>)> {
        self.forward_impl(batch, None)
    }

    /// Encodes one sequence in inference mode.
    pub fn encode(&self, tokens: &[TokenId], mask: &[bool]) -> Result<EncoderOutput<A>> {
        let batch = TokenBatch::new(tokens.to_vec(), mask.to_vec(), 1, tokens.len())?;
        if tokens.is_empty() {
            return Err(Error::Config("cannot encode an empty sequence".into()));
        }
        let token_states = self.forward_infer(&batch)?;
        let pooled = token_states.row(0).to_owned();
        Ok(EncoderOutput {
            token_states,
            pooled,
        })
    }

    /// Pooled (CLS) vectors `[batch, hidden]` in inference mode.
    pub fn encode_pooled(&self, batch: &TokenBatch) -> Result<Array2<A>> {
        let states = self.forward_infer(batch)?;
        Ok(pooled_rows(&states, batch))
    }

    fn dropout(
        &self,
        x: Array2<A>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Array2<A>, Option<Array2<A>>) {
        match rng {
            Some(r) if self.config.dropout > 0.0 => {
                let m = dropout_mask::<A, _>(x.nrows(), x.ncols(), self.config.dropout, &mut **r);
                (x * &m, Some(m))
            }
            _ => (x, None),
        }
    }

    fn forward_impl(
        &self,
        batch: &TokenBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<A>, EncoderCache<A>)> {
        self.check(batch)?;
        let p = &self.params;
        let layout = p.layout.clone();
        let d = self.config.hidden;
        let t_len = batch.seq_len;

        let tok = p.v2(layout.token_emb);
        let pos = p.v2(layout.pos_emb);
        let mut x = Array2::zeros((batch.rows(), d));
        for (r, mut row) in x.outer_iter_mut().enumerate() {
            row.assign(&tok.row(batch.ids[r] as usize));
            row += &pos.row(r % t_len);
        }
        let (x, emb_ln) = layer_norm(x.view(), p.v1(layout.emb_ln_g), p.v1(layout.emb_ln_b));
        let (mut x, emb_drop) = self.dropout(x, &mut rng);

        let mut blocks = Vec::with_capacity(layout.blocks.len());
        for ids in &layout.blocks {
            let q = linear(x.view(), p.v2(ids.wq), p.v1(ids.bq));
            let k = linear(x.view(), p.v2(ids.wk), p.v1(ids.bk));
            let v = linear(x.view(), p.v2(ids.wv), p.v1(ids.bv));
            let (probs, ctx) = self.attention(&q, &k, &v, &batch.mask, batch.batch, t_len);
            let a = linear(ctx.view(), p.v2(ids.wo), p.v1(ids.bo));
            let (a, drop_attn) = self.dropout(a, &mut rng);
            let r1 = &x + &a;
            let (x1, ln1) = layer_norm(r1.view(), p.v1(ids.ln1_g), p.v1(ids.ln1_b));
            let z = linear(x1.view(), p.v2(ids.w1), p.v1(ids.b1));
            let act = gelu(&z);
            let f = linear(act.view(), p.v2(ids.w2), p.v1(ids.b2));
            let (f, drop_ffn) = self.dropout(f, &mut rng);
            let r2 = &x1 + &f;
            let (x2, ln2) = layer_norm(r2.view(), p.v1(ids.ln2_g), p.v1(ids.ln2_b));
            blocks.push(BlockCache {
                x_in: x,
                q,
                k,
                v,
                probs,
                ctx,
                drop_attn,
                ln1,
                x1,
                z,
                act,
                drop_ffn,
                ln2,
            });
            x = x2;
        }
        let cache = EncoderCache {
            ids: batch.ids.clone(),
            mask: batch.mask.clone(),
            batch: batch.batch,
            seq_len: t_len,
            emb_ln,
            emb_drop,
            blocks,
        };
        Ok((x, cache))
    }

    fn attention(
        &self,
        q: &Array2<A>,
        k: &Array2<A>,
        v: &Array2<A>,
        mask: &[bool],
        n_seq: usize,
        t_len: usize,
    ) -> (Vec<Array2<A>>, Array2<A>) {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = cst::<A>(1.0 / (dh as f64).sqrt());
        let per_seq = self.exec.map(n_seq, |b| {
            let rows = b * t_len..(b + 1) * t_len;
            let key_mask = &mask[rows.clone()];
            let mut ctx = Array2::zeros((t_len, self.config.hidden));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = q.slice(s![rows.clone(), cols.clone()]);
                let kb = k.slice(s![rows.clone(), cols.clone()]);
                let vb = v.slice(s![rows.clone(), cols.clone()]);
                let mut scores = qb.dot(&kb.t());
                scores.mapv_inplace(|x| x * scale);
                masked_softmax_rows(&mut scores, key_mask);
                ctx.slice_mut(s![.., cols]).assign(&scores.dot(&vb));
                probs.push(scores);
            }
            (probs, ctx)
        });
        let mut ctx_all = Array2::zeros((n_seq * t_len, self.config.hidden));
        let mut probs_all = Vec::with_capacity(n_seq * heads);
        for (b, (probs, ctx)) in per_seq.into_iter().enumerate() {
            ctx_all
                .slice_mut(s![b * t_len..(b + 1) * t_len, ..])
                .assign(&ctx);
            probs_all.extend(probs);
        }
        (probs_all, ctx_all)
    }

    /// Accumulates parameter gradients for `d_states` (gradient of the loss with
    /// respect to the forward output) into `grads`.
    pub fn backward(&self, d_states: Array2<A>, cache: &EncoderCache<A>, grads: &mut Params<A>) {
        let p = &self.params;
        let layout = p.layout.clone();
        let mut dx = d_states;
        for (ids, c) in layout.blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(dx, ids, c, cache, grads);
        }
        if let Some(m) = &cache.emb_drop {
            dx *= m;
        }
        let (demb, dg, db) = layer_norm_backward(dx.view(), &cache.emb_ln, p.v1(layout.emb_ln_g));
        acc1(grads, layout.emb_ln_g, &dg);
        acc1(grads, layout.emb_ln_b, &db);
        {
            let mut g = grads.m2(layout.token_emb);
            for (r, row) in demb.outer_iter().enumerate() {
                let mut gr = g.row_mut(cache.ids[r] as usize);
                gr += &row;
            }
        }
        let mut g = grads.m2(layout.pos_emb);
        for (r, row) in demb.outer_iter().enumerate() {
            let mut gr = g.row_mut(r % cache.seq_len);
            gr += &row;
        }
    }

    fn block_backward(
        &self,
        dx2: Array2<A>,
        ids: &BlockIds,
        c: &BlockCache<A>,
        cache: &EncoderCache<A>,
        grads: &mut Params<A>,
    ) -> Array2<A> {
        let p = &self.params;
        let (dr2, dg, db) = layer_norm_backward(dx2.view(), &c.ln2, p.v1(ids.ln2_g));
        acc1(grads, ids.ln2_g, &dg);
        acc1(grads, ids.ln2_b, &db);

        let mut df = dr2.clone();
        if let Some(m) = &c.drop_ffn {
            df *= m;
        }
        acc_linear(grads, ids.w2, ids.b2, c.act.view(), df.view());
        let dact = df.dot(&p.v2(ids.w2).t());
        let dz = gelu_backward(&c.z, &dact);
        acc_linear(grads, ids.w1, ids.b1, c.x1.view(), dz.view());
        let mut dx1 = dz.dot(&p.v2(ids.w1).t());
        dx1 += &dr2;

        let (dr1, dg, db) = layer_norm_backward(dx1.view(), &c.ln1, p.v1(ids.ln1_g));
        acc1(grads, ids.ln1_g, &dg);
        acc1(grads, ids.ln1_b, &db);

        let mut da = dr1.clone();
        if let Some(m) = &c.drop_attn {
            da *= m;
        }
        acc_linear(grads, ids.wo, ids.bo, c.ctx.view(), da.view());
        let dctx = da.dot(&p.v2(ids.wo).t());
        let (dq, dk, dv) = self.attention_backward(&dctx, c, cache.batch, cache.seq_len);

        let mut dx = dr1;
        for (w, b, dy) in [(ids.wq, ids.bq, &dq), (ids.wk, ids.bk, &dk), (ids.wv, ids.bv, &dv)] {
            acc_linear(grads, w, b, c.x_in.view(), dy.view());
            general_mat_mul(A::one(), dy, &p.v2(w).t(), A::one(), &mut dx);
        }
        dx
    }

    fn attention_backward(
        &self,
        dctx: &Array2<A>,
        c: &BlockCache<A>,
        n_seq: usize,
        t_len: usize,
    ) -> (Array2<A>, Array2<A>, Array2<A>) {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let d = self.config.hidden;
        let scale = cst::<A>(1.0 / (dh as f64).sqrt());
        let per_seq = self.exec.map(n_seq, |b| {
            let rows = b * t_len..(b + 1) * t_len;
            let mut dq = Array2::zeros((t_len, d));
            let mut dk = Array2::zeros((t_len, d));
            let mut dv = Array2::zeros((t_len, d));
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let probs = &c.probs[b * heads + h];
                let g = dctx.slice(s![rows.clone(), cols.clone()]);
                let qb = c.q.slice(s![rows.clone(), cols.clone()]);
                let kb = c.k.slice(s![rows.clone(), cols.clone()]);
                let vb = c.v.slice(s![rows.clone(), cols.clone()]);
                let dp = g.dot(&vb.t());
                dv.slice_mut(s![.., cols.clone()]).assign(&probs.t().dot(&g));
                // dS = P * (dP - rowsum(P * dP)), scaled
                let mut ds = probs * &dp;
                for (mut ds_row, p_row) in ds.outer_iter_mut().zip(probs.outer_iter()) {
                    let inner = ds_row.sum();
                    ndarray::Zip::from(&mut ds_row)
                        .and(&p_row)
                        .for_each(|o, &pv| *o = (*o - pv * inner) * scale);
                }
                dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kb));
                dk.slice_mut(s![.., cols]).assign(&ds.t().dot(&qb));
            }
            (dq, dk, dv)
        });
        let rows = n_seq * t_len;
        let (mut dq, mut dk, mut dv) = (
            Array2::zeros((rows, d)),
            Array2::zeros((rows, d)),
            Array2::zeros((rows, d)),
        );
        for (b, (q, k, v)) in per_seq.into_iter().enumerate() {
            let r = s![b * t_len..(b + 1) * t_len, ..];
            dq.slice_mut(r).assign(&q);
            dk.slice_mut(r).assign(&k);
            dv.slice_mut(r).assign(&v);
        }
        (dq, dk, dv)
    }

    /// Token-prediction head: dense, GELU, batch normalization, vocabulary projection.
    /// `train` selects batch statistics (and records them in the cache) versus the
    /// running statistics.
    pub fn head_forward(&self, states: ArrayView2<A>, train: bool) -> (Array2<A>, HeadCache<A>) {
        let p = &self.params;
        let ids = p.layout.head;
        let z = linear(states, p.v2(ids.w), p.v1(ids.b));
        let act = gelu(&z);
        let gain = p.v1(ids.bn_g);
        let bias = p.v1(ids.bn_b);
        let (normed, norm) = if train && act.nrows() > 0 {
            let (y, cache, mean, var) = batch_norm_train(act.view(), gain, bias);
            (y, HeadNorm::Batch { cache, mean, var })
        } else {
            let y = batch_norm_infer(
                act.view(),
                gain,
                bias,
                self.bn_mean.view(),
                self.bn_var.view(),
            );
            let inv_std = self.bn_var.mapv(|v| A::one() / (v + cst(BN_EPS)).sqrt());
            let xhat = (&act - &self.bn_mean) * &inv_std;
            (y, HeadNorm::Running { xhat, inv_std })
        };
        let logits = linear(normed.view(), p.v2(ids.out_w), p.v1(ids.out_b));
        let cache = HeadCache {
            x: states.to_owned(),
            z,
            normed,
            norm,
        };
        (logits, cache)
    }

    /// Logits `[rows, vocab]` for the given token states.
    pub fn predict_tokens(&self, states: ArrayView2<A>, train: bool) -> Array2<A> {
        self.head_forward(states, train).0
    }

    /// Returns the gradient with respect to the head input and accumulates parameter
    /// gradients.
    pub fn head_backward(
        &self,
        d_logits: ArrayView2<A>,
        cache: &HeadCache<A>,
        grads: &mut Params<A>,
    ) -> Array2<A> {
        let p = &self.params;
        let ids = p.layout.head;
        acc_linear(grads, ids.out_w, ids.out_b, cache.normed.view(), d_logits);
        let dn = d_logits.dot(&p.v2(ids.out_w).t());
        let gain = p.v1(ids.bn_g);
        let dact = match &cache.norm {
            HeadNorm::Batch { cache: c, .. } => {
                let (dx, dg, db) = batch_norm_backward(dn.view(), c, gain);
                acc1(grads, ids.bn_g, &dg);
                acc1(grads, ids.bn_b, &db);
                dx
            }
            HeadNorm::Running { xhat, inv_std } => {
                acc1(grads, ids.bn_g, &(&dn * xhat).sum_axis(Axis(0)));
                acc1(grads, ids.bn_b, &dn.sum_axis(Axis(0)));
                &dn * &(inv_std * &gain)
            }
        };
        let dz = gelu_backward(&cache.z, &dact);
        acc_linear(grads, ids.w, ids.b, cache.x.view(), dz.view());
        dz.dot(&p.v2(ids.w).t())
    }

    /// Folds the batch statistics recorded by a training-mode head pass into the
    /// running statistics (unbiased variance).
    pub fn update_bn_stats(&mut self, cache: &HeadCache<A>) {
        if let HeadNorm::Batch { mean, var, .. } = &cache.norm {
            let n = cache.rows() as f64;
            let m = cst::<A>(BN_MOMENTUM);
            let keep = A::one() - m;
            let unbias = cst::<A>(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
            self.bn_mean = &self.bn_mean * keep + mean * m;
            self.bn_var = &self.bn_var * keep + &(var * (m * unbias));
        }
    }
}

fn acc1<A: Float>(grads: &mut Params<A>, id: TensorId, g: &Array1<A>) {
    let mut dst = grads.m1(id);
    dst += g;
}

fn acc_linear<A: Float>(
    grads: &mut Params<A>,
    w: TensorId,
    b: TensorId,
    x: ArrayView2<A>,
    dy: ArrayView2<A>,
) {
    general_mat_mul(A::one(), &x.t(), &dy, A::one(), &mut grads.m2(w));
    acc1(grads, b, &dy.sum_axis(Axis(0)));
}

/// CLS rows of `states`.
pub fn pooled_rows<A: Float>(states: &Array2<A>, batch: &TokenBatch) -> Array2<A> {
    let rows: Vec<usize> = (0..batch.batch).map(|b| batch.cls_row(b)).collect();
    states.select(Axis(0), &rows)
}

/// Spreads a gradient on pooled vectors back onto the CLS rows of a state gradient.
pub fn scatter_pooled<A: Float>(d_pooled: ArrayView2<A>, batch: &TokenBatch) -> Array2<A> {
    let mut d = Array2::zeros((batch.rows(), d_pooled.ncols()));
    for (b, row) in d_pooled.outer_iter().enumerate() {
        d.row_mut(batch.cls_row(b)).assign(&row);
    }
    d
}

