use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, Float};

/// Learning-rate group of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Embeddings and transformer blocks.
    Encoder,
    /// Token-prediction head and its vocabulary projection.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub offset: usize,
    init: Init,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weight decay applies to matrices only, not to biases and normalization gains.
    pub fn decays(&self) -> bool {
        self.shape.len() == 2
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub w: TensorId,
    pub b: TensorId,
    pub bn_g: TensorId,
    pub bn_b: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

/// Names, shapes and offsets of every trainable tensor in one flat buffer.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<TensorSpec>,
    pub token_emb: TensorId,
    pub pos_emb: TensorId,
    pub emb_ln_g: TensorId,
    pub emb_ln_b: TensorId,
    pub blocks: Vec<BlockIds>,
    pub head: HeadIds,
    len: usize,
}

struct Builder {
    entries: Vec<TensorSpec>,
    len: usize,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, shape: &[usize], init: Init) -> TensorId {
        let spec = TensorSpec {
            name,
            group,
            shape: shape.to_vec(),
            offset: self.len,
            init,
        };
        self.len += spec.len();
        self.entries.push(spec);
        TensorId(self.entries.len() - 1)
    }
}

impl ParamLayout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        use Init::*;
        use ParamGroup::*;
        let d = cfg.hidden;
        let v = cfg.vocab_size;
        let mut b = Builder {
            entries: Vec::new(),
            len: 0,
        };
        let token_emb = b.add("embeddings.token".into(), Encoder, &[v, d], Normal);
        let pos_emb = b.add("embeddings.position".into(), Encoder, &[cfg.max_len, d], Normal);
        let emb_ln_g = b.add("embeddings.norm.gain".into(), Encoder, &[d], Ones);
        let emb_ln_b = b.add("embeddings.norm.bias".into(), Encoder, &[d], Zeros);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let mut add = |n: &str, shape: &[usize], init| {
                    b.add(format!("blocks.{l}.{n}"), Encoder, shape, init)
                };
                BlockIds {
                    wq: add("attn.query.weight", &[d, d], Normal),
                    bq: add("attn.query.bias", &[d], Zeros),
                    wk: add("attn.key.weight", &[d, d], Normal),
                    bk: add("attn.key.bias", &[d], Zeros),
                    wv: add("attn.value.weight", &[d, d], Normal),
                    bv: add("attn.value.bias", &[d], Zeros),
                    wo: add("attn.output.weight", &[d, d], Normal),
                    bo: add("attn.output.bias", &[d], Zeros),
                    ln1_g: add("attn.norm.gain", &[d], Ones),
                    ln1_b: add("attn.norm.bias", &[d], Zeros),
                    w1: add("ffn.inner.weight", &[d, cfg.ff], Normal),
                    b1: add("ffn.inner.bias", &[cfg.ff], Zeros),
                    w2: add("ffn.outer.weight", &[cfg.ff, d], Normal),
                    b2: add("ffn.outer.bias", &[d], Zeros),
                    ln2_g: add("ffn.norm.gain", &[d], Ones),
                    ln2_b: add("ffn.norm.bias", &[d], Zeros),
                }
            })
            .collect();
        let head = HeadIds {
            w: b.add("head.dense.weight".into(), Head, &[d, d], Normal),
            b: b.add("head.dense.bias".into(), Head, &[d], Zeros),
            bn_g: b.add("head.norm.gain".into(), Head, &[d], Ones),
            bn_b: b.add("head.norm.bias".into(), Head, &[d], Zeros),
            out_w: b.add("head.vocab.weight".into(), Head, &[d, v], Normal),
            out_b: b.add("head.vocab.bias".into(), Head, &[v], Zeros),
        };
        ParamLayout {
            entries: b.entries,
            len: b.len,
            token_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            blocks,
            head,
        }
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spec(&self, id: TensorId) -> &TensorSpec {
        &self.entries[id.0]
    }
}

/// Flat parameter (or gradient, or optimizer moment) buffer over a [`ParamLayout`].
#[derive(Clone, PartialEq)]
pub struct Params<A> {
    pub layout: Arc<ParamLayout>,
    pub data: Vec<A>,
}

impl<A> std::fmt::Debug for Params<A> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Params")
            .field("tensors", &self.layout.entries.len())
            .field("scalars", &self.data.len())
            .finish()
    }
}

impl PartialEq for ParamLayout {
    fn eq(&self, other: &Self) -> bool {
        self.len == other.len
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

impl<A: Float> Params<A> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![A::zero(); layout.len()];
        Params { layout, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    /// Gaussian(0, std) weights, zero biases, unit normalization gains.
    pub fn init(layout: Arc<ParamLayout>, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut data = Vec::with_capacity(layout.len());
        for spec in &layout.entries {
            for _ in 0..spec.len() {
                let x = match spec.init {
                    Init::Normal => normal.sample(&mut rng),
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                };
                data.push(A::from_f64(x).unwrap());
            }
        }
        Params { layout, data }
    }

    pub fn slice(&self, id: TensorId) -> &[A] {
        let s = self.layout.spec(id);
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, id: TensorId) -> &mut [A] {
        let (offset, len) = {
            let s = self.layout.spec(id);
            (s.offset, s.len())
        };
        &mut self.data[offset..offset + len]
    }

    pub fn v1(&self, id: TensorId) -> ArrayView1<'_, A> {
        ArrayView1::from(self.slice(id))
    }

    pub fn v2(&self, id: TensorId) -> ArrayView2<'_, A> {
        let shape = &self.layout.spec(id).shape;
        ArrayView2::from_shape((shape[0], shape[1]), self.slice(id)).unwrap()
    }

    pub fn m1(&mut self, id: TensorId) -> ArrayViewMut1<'_, A> {
        ArrayViewMut1::from(self.slice_mut(id))
    }

    pub fn m2(&mut self, id: TensorId) -> ArrayViewMut2<'_, A> {
        let shape = self.layout.spec(id).shape.clone();
        ArrayViewMut2::from_shape((shape[0], shape[1]), self.slice_mut(id)).unwrap()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = A::zero());
    }

    pub fn squared_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.to_f64().unwrap();
                v * v
            })
            .sum()
    }

    pub fn scale(&mut self, factor: A) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// Converts to another float width, e.g. for high-precision gradient checks.
    pub fn cast<B: Float>(&self) -> Params<B> {
        Params {
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|x| B::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        let i = self
            .layout
            .entries
            .partition_point(|s| s.offset + s.len() <= index);
        self.layout.entries[i].group
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 11,
            hidden: 8,
            layers: 2,
            heads: 2,
            ff: 12,
            max_len: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn layout_is_contiguous_and_named_uniquely() {
        let layout = ParamLayout::new(&cfg());
        let mut offset = 0;
        let mut names = std::collections::HashSet::new();
        for s in &layout.entries {
            assert_eq!(s.offset, offset);
            offset += s.len();
            assert!(names.insert(s.name.clone()));
        }
        assert_eq!(offset, layout.len());
        assert_eq!(layout.blocks.len(), 2);
    }

    #[test]
    fn init_is_seeded() {
        let layout = Arc::new(ParamLayout::new(&cfg()));
        let a = Params::<f32>::init(layout.clone(), 0.02, 3);
        let b = Params::<f32>::init(layout.clone(), 0.02, 3);
        let c = Params::<f32>::init(layout.clone(), 0.02, 4);
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
        let g = a.slice(layout.emb_ln_g);
        assert!(g.iter().all(|&x| x == 1.0));
        let bias = a.slice(layout.blocks[1].b1);
        assert!(bias.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn group_lookup_by_flat_index() {
        let layout = Arc::new(ParamLayout::new(&cfg()));
        let p = Params::<f64>::zeros(layout.clone());
        assert_eq!(p.group_of(0), ParamGroup::Encoder);
        assert_eq!(p.group_of(layout.len() - 1), ParamGroup::Head);
        let head_start = layout.spec(layout.head.w).offset;
        assert_eq!(p.group_of(head_start - 1), ParamGroup::Encoder);
        assert_eq!(p.group_of(head_start), ParamGroup::Head);
    }
}
