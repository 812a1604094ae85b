//! AdamW with per-group learning rates, warmup/decay schedule, clipping, early stopping.

use serde::{Deserialize, Serialize};

use crate::model::{Float, ParamGroup, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Peak learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupLr {
    pub encoder: f64,
    pub head: f64,
}

impl GroupLr {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Head => self.head,
        }
    }

    pub fn scaled(&self, factor: f64) -> GroupLr {
        GroupLr {
            encoder: self.encoder * factor,
            head: self.head * factor,
        }
    }
}

/// Adam moments with weight decay applied directly to the weights, matrices only.
#[derive(Debug, Clone)]
pub struct AdamW<A> {
    pub config: AdamWConfig,
    m: Params<A>,
    v: Params<A>,
    t: u64,
}

impl<A: Float> AdamW<A> {
    pub fn new(params: &Params<A>, config: AdamWConfig) -> Self {
        AdamW {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params<A>, grads: &Params<A>, lr: GroupLr) {
        self.t += 1;
        let c = self.config;
        let b1 = A::from_f64(c.beta1).unwrap();
        let b2 = A::from_f64(c.beta2).unwrap();
        let one = A::one();
        let bc1 = A::from_f64(1.0 - c.beta1.powi(self.t as i32)).unwrap();
        let bc2 = A::from_f64(1.0 - c.beta2.powi(self.t as i32)).unwrap();
        let eps = A::from_f64(c.eps).unwrap();
        let layout = params.layout.clone();
        for spec in &layout.entries {
            let rate = A::from_f64(lr.get(spec.group)).unwrap();
            let decay = if spec.decays() {
                A::from_f64(c.weight_decay).unwrap()
            } else {
                A::zero()
            };
            let r = spec.offset..spec.offset + spec.len();
            let p = &mut params.data[r.clone()];
            let g = &grads.data[r.clone()];
            let m = &mut self.m.data[r.clone()];
            let v = &mut self.v.data[r];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= rate * (mhat / (vhat.sqrt() + eps) + decay * p[i]);
            }
        }
    }
}

/// Linear warmup from 0 to the peak, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LinearSchedule {
    pub fn new(total_steps: usize, warmup_fraction: f64) -> Self {
        LinearSchedule {
            total_steps,
            warmup_steps: (warmup_fraction * total_steps as f64).ceil() as usize,
        }
    }

    /// Multiplier on the peak learning rate at `step` (0-based).
    pub fn factor(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            step as f64 / self.warmup_steps as f64
        } else if self.total_steps <= self.warmup_steps {
            1.0
        } else {
            let left = self.total_steps.saturating_sub(step) as f64;
            (left / (self.total_steps - self.warmup_steps) as f64).clamp(0.0, 1.0)
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<A: Float>(grads: &mut Params<A>, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale(A::from_f64(max_norm / norm).unwrap());
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stale,
    Stop,
}

/// Stops after `patience` consecutive epochs without improving on the best value.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    maximize: bool,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
    seen: usize,
}

impl EarlyStopper {
    pub fn minimizing(patience: usize) -> Self {
        Self::new(patience, false)
    }

    pub fn maximizing(patience: usize) -> Self {
        Self::new(patience, true)
    }

    fn new(patience: usize, maximize: bool) -> Self {
        EarlyStopper {
            patience,
            maximize,
            best: None,
            best_epoch: 0,
            stale: 0,
            seen: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> Progress {
        let epoch = self.seen;
        self.seen += 1;
        let better = match self.best {
            None => true,
            Some(b) if self.maximize => value > b,
            Some(b) => value < b,
        };
        if better {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.stale = 0;
            Progress::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Progress::Stop
            } else {
                Progress::Stale
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}
