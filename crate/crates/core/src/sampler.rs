//! Pre-training samples: one masked item (head entity, tail entity or relation) plus
//! token-level masking restricted to the rest of the triple.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kg::Triple;
use crate::text::{Region, SequenceLayout, Span, TokenId, TokenizedKg, MASK, PAD, RESERVED};
use crate::Exec;

pub const MLM_SELECT: f64 = 0.15;
pub const MLM_MASK: f64 = 0.8;
/// Thresholds on the task draw: below the first masks the head, below the second the tail.
pub const TASK_THRESHOLDS: (f64, f64) = (0.4, 0.8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    MemHead,
    MemTail,
    Mrm,
    /// Token masking over every text region with no masked item.
    MlmOnly,
}

/// Which objectives a pre-training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    #[default]
    Multitask,
    MlmOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainSample {
    /// Masked input.
    pub x: Vec<TokenId>,
    /// Item targets, PAD where inactive.
    pub y1: Vec<TokenId>,
    /// Token targets, PAD where inactive.
    pub y2: Vec<TokenId>,
    pub task: TaskTag,
    /// Layout of the unmasked sequence.
    pub layout: SequenceLayout,
}

impl PretrainSample {
    /// Attention mask of the masked input: the content prefix of the layout.
    pub fn attention_mask(&self) -> Vec<bool> {
        self.layout.attention_mask()
    }
}

/// Independent stream for `(seed, epoch, index)`, stable under any schedule.
pub fn stream_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut s = splitmix(seed);
    s = splitmix(s ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    s = splitmix(s ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    ChaCha8Rng::seed_from_u64(s)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Selects each position of `spans` with probability 0.15; a selected position keeps
/// its original token in `y2` and becomes MASK (0.8), a random non-reserved token
/// (0.1) or stays unchanged (0.1).
pub fn mask_mlm_region<R: Rng + ?Sized>(
    x: &mut [TokenId],
    y2: &mut [TokenId],
    spans: &[Span],
    vocab_size: usize,
    rng: &mut R,
) {
    for span in spans {
        for i in span.range() {
            if rng.random::<f64>() >= MLM_SELECT {
                continue;
            }
            y2[i] = x[i];
            if rng.random::<f64>() < MLM_MASK {
                x[i] = MASK;
            } else if rng.random::<f64>() > 0.5 && vocab_size > RESERVED {
                x[i] = rng.random_range(RESERVED..vocab_size) as TokenId;
            }
        }
    }
}

/// Masks `layout` according to a fresh task draw.
pub fn sample_from_layout<R: Rng + ?Sized>(
    layout: SequenceLayout,
    vocab_size: usize,
    mode: PretrainMode,
    rng: &mut R,
) -> PretrainSample {
    use Region::*;
    let mut x = layout.tokens.clone();
    let mut y1 = vec![PAD; x.len()];
    let mut y2 = vec![PAD; x.len()];
    let task = match mode {
        PretrainMode::MlmOnly => TaskTag::MlmOnly,
        PretrainMode::Multitask => {
            let alpha = rng.random::<f64>();
            if alpha < TASK_THRESHOLDS.0 {
                TaskTag::MemHead
            } else if alpha < TASK_THRESHOLDS.1 {
                TaskTag::MemTail
            } else {
                TaskTag::Mrm
            }
        }
    };
    let (item, blanked, mlm): (Option<Region>, Option<Region>, &[Region]) = match task {
        TaskTag::MemHead => (Some(Head), Some(HeadDesc), &[Relation, Tail, TailDesc]),
        TaskTag::MemTail => (Some(Tail), Some(TailDesc), &[Head, HeadDesc, Relation]),
        TaskTag::Mrm => (Some(Relation), None, &[Head, HeadDesc, Tail, TailDesc]),
        TaskTag::MlmOnly => (None, None, &[Head, HeadDesc, Relation, Tail, TailDesc]),
    };
    if let Some(item) = item {
        for i in layout.span(item).range() {
            y1[i] = x[i];
            x[i] = MASK;
        }
    }
    if let Some(desc) = blanked {
        for i in layout.span(desc).range() {
            x[i] = PAD;
        }
    }
    let spans: Vec<Span> = mlm.iter().map(|&r| layout.span(r)).collect();
    mask_mlm_region(&mut x, &mut y2, &spans, vocab_size, rng);
    PretrainSample {
        x,
        y1,
        y2,
        task,
        layout,
    }
}

pub fn build_pretrain_sample<R: Rng + ?Sized>(
    triple: &Triple,
    texts: &TokenizedKg,
    vocab_size: usize,
    max_len: usize,
    mode: PretrainMode,
    rng: &mut R,
) -> PretrainSample {
    let layout = texts.triple_sequence(triple.head, triple.relation, triple.tail, max_len);
    sample_from_layout(layout, vocab_size, mode, rng)
}

/// Samples for one pass over `triples`; sample `i` draws from `stream_rng(seed, epoch, i)`.
#[allow(clippy::too_many_arguments)]
pub fn build_epoch(
    triples: &[Triple],
    texts: &TokenizedKg,
    vocab_size: usize,
    max_len: usize,
    mode: PretrainMode,
    seed: u64,
    epoch: u64,
    exec: Exec,
) -> Vec<PretrainSample> {
    exec.map(triples.len(), |i| {
        let mut rng = stream_rng(seed, epoch, i as u64);
        build_pretrain_sample(&triples[i], texts, vocab_size, max_len, mode, &mut rng)
    })
}

#[cfg(test)]
pub(crate) mod scripted {
    use rand::RngCore;

    /// Replays the given `random::<f64>()` values in order, then repeats the last.
    pub struct Scripted {
        values: Vec<f64>,
        pos: usize,
    }

    impl Scripted {
        pub fn new(values: &[f64]) -> Self {
            Scripted {
                values: values.to_vec(),
                pos: 0,
            }
        }
    }

    impl RngCore for Scripted {
        fn next_u32(&mut self) -> u32 {
            (self.next_u64() >> 32) as u32
        }

        fn next_u64(&mut self) -> u64 {
            let v = self.values[self.pos.min(self.values.len() - 1)];
            self.pos += 1;
            ((v * (1u64 << 53) as f64) as u64) << 11
        }

        fn fill_bytes(&mut self, dst: &mut [u8]) {
            for chunk in dst.chunks_mut(8) {
                let b = self.next_u64().to_le_bytes();
                chunk.copy_from_slice(&b[..chunk.len()]);
            }
        }
    }
}
