//! Supervised fine-tuning of the student on one corpus.
//!
//! AdamW with decoupled weight decay, global-norm gradient clipping, and a
//! linear-warmup cosine schedule. Optimizer moments start from zero on every
//! call to [`train_branch`].

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DistillCorpus;
use crate::error::{Error, Result};
use crate::model::NanoLm;
use crate::params::ParameterVector;
use crate::seed::derive_seed;
use crate::vocab::{TokenizedExample, Vocabulary};

/// Whether the learning-rate schedule restarts for every branch or spans all
/// rounds of a merge run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleScope {
    #[default]
    PerBranch,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule_scope: ScheduleScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 3e-3,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_fraction: 0.01,
            grad_clip_norm: 1.0,
            batch_size: 16,
            total_steps: 250,
            seed: 0,
            schedule_scope: ScheduleScope::PerBranch,
        }
    }
}

impl TrainConfig {
    /// Large-batch optimizer settings (lr 1e-5, batch 64).
    pub fn large_batch() -> Self {
        TrainConfig { base_lr: 1e-5, batch_size: 64, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} not in [0, 1)", self.warmup_fraction)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.clone() }
    }
}

/// Learning rate at `step` of a `total`-step schedule: linear ramp from zero
/// over `ceil(warmup_fraction * total)` steps, then cosine decay to zero.
pub fn lr_at_total(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total {
        return Err(Error::Config(format!("step {step} outside schedule of {total} steps")));
    }
    let warmup = (cfg.warmup_fraction * total as f64).ceil() as usize;
    if step < warmup {
        return Ok(cfg.base_lr * step as f64 / warmup as f64);
    }
    let span = total - warmup;
    if span == 0 {
        return Ok(cfg.base_lr);
    }
    let progress = (step - warmup) as f64 / span as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    lr_at_total(step, cfg.total_steps, cfg)
}

/// The part of a longer schedule one training call covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleWindow {
    pub offset: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the update within this training call.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// A corpus tokenized once for training.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub examples: Vec<TokenizedExample>,
}

impl TrainData {
    /// Fails on any example longer than the context; nothing is truncated.
    pub fn new(corpus: &DistillCorpus, vocab: &Vocabulary, context_length: usize) -> Result<Self> {
        let mut examples = Vec::with_capacity(corpus.len());
        for ex in &corpus.examples {
            let t = TokenizedExample::new(vocab, &ex.prompt_text, &ex.target_text)?;
            if t.len() > context_length {
                return Err(Error::Length { len: t.len(), max: context_length });
            }
            examples.push(t);
        }
        Ok(TrainData { examples })
    }
}

#[derive(Clone, Debug)]
struct DataOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    cursor: usize,
}

impl DataOrder {
    fn new(seed: u64, n: usize) -> Self {
        DataOrder { rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &["data-order"])), perm: (0..n).collect(), cursor: 0 }
    }

    /// Next batch of indices; a fresh permutation starts each epoch and the
    /// final partial batch of an epoch is kept.
    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.cursor == 0 {
            self.perm.sort_unstable();
            self.perm.shuffle(&mut self.rng);
        }
        let end = (self.cursor + size).min(self.perm.len());
        let batch = self.perm[self.cursor..end].to_vec();
        self.cursor = if end == self.perm.len() { 0 } else { end };
        batch
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParameterVector,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: usize,
    pub log: Vec<StepRecord>,
    window: ScheduleWindow,
    order: DataOrder,
}

impl TrainState {
    pub fn new(params: ParameterVector, data_len: usize, cfg: &TrainConfig, window: ScheduleWindow) -> Self {
        let n = params.len();
        TrainState {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            log: Vec::new(),
            window,
            order: DataOrder::new(cfg.seed, data_len),
        }
    }
}

/// Global L2 norm accumulated in `f64`.
pub fn global_norm(g: &[f32]) -> f64 {
    g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Rescales `g` to norm at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(g: &mut [f32], max_norm: f64) -> f64 {
    let norm = global_norm(g);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for x in g.iter_mut() {
            *x *= s;
        }
    }
    norm
}

/// One AdamW update with decoupled weight decay. `t` is the 1-based update count.
pub fn adamw_update(params: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], t: usize, lr: f64, cfg: &TrainConfig) {
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    let step = (lr / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let eps = cfg.eps as f32;
    let decay = (1.0 - lr * cfg.weight_decay) as f32;
    for i in 0..params.len() {
        let g = grad[i];
        m[i] = b1f * m[i] + (1.0 - b1f) * g;
        v[i] = b2f * v[i] + (1.0 - b2f) * g * g;
        let denom = (v[i] * inv_bc2).sqrt() + eps;
        params[i] = params[i] * decay - step * m[i] / denom;
    }
}

/// Samples a batch, clips, and applies one update.
pub fn sft_step(state: &mut TrainState, data: &TrainData, lm: &NanoLm, cfg: &TrainConfig) -> Result<()> {
    if data.examples.is_empty() {
        return Err(Error::Precondition("training corpus is empty".into()));
    }
    let t = state.step + 1;
    let idx = state.order.next_batch(cfg.batch_size);
    let batch: Vec<TokenizedExample> = idx.iter().map(|&i| data.examples[i].clone()).collect();
    let (loss, mut grad) = lm.loss_and_grad(&state.params, &batch)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: t, detail: format!("loss {loss}") });
    }
    let grad_norm = clip_global_norm(&mut grad, cfg.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Divergence { step: t, detail: format!("gradient norm {grad_norm}") });
    }
    let clipped_norm = global_norm(&grad);
    let lr = lr_at_total(state.window.offset + t, state.window.total, cfg)?;
    adamw_update(&mut state.params.values, &grad, &mut state.m, &mut state.v, t, lr, cfg);
    if let Some(i) = state.params.values.iter().position(|x| !x.is_finite()) {
        return Err(Error::Divergence { step: t, detail: format!("parameter {i} became non-finite") });
    }
    state.step = t;
    state.log.push(StepRecord { step: t, loss, lr, grad_norm, clipped_norm });
    Ok(())
}

/// Trains `steps` updates from `init` with fresh optimizer state; the
/// schedule spans exactly these steps.
pub fn train_branch(
    init: &ParameterVector,
    corpus: &DistillCorpus,
    steps: usize,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<(ParameterVector, Vec<StepRecord>)> {
    train_branch_window(init, corpus, steps, cfg, vocab, ScheduleWindow { offset: 0, total: steps })
}

pub fn train_branch_window(
    init: &ParameterVector,
    corpus: &DistillCorpus,
    steps: usize,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    window: ScheduleWindow,
) -> Result<(ParameterVector, Vec<StepRecord>)> {
    let lm = NanoLm::for_params(init)?;
    let data = TrainData::new(corpus, vocab, lm.config.context_length)?;
    train_on_data(init, &data, steps, cfg, &lm, window, |_, _| Ok(()))
}

/// Core loop; `on_step` sees the state after every update.
pub fn train_on_data(
    init: &ParameterVector,
    data: &TrainData,
    steps: usize,
    cfg: &TrainConfig,
    lm: &NanoLm,
    window: ScheduleWindow,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<(ParameterVector, Vec<StepRecord>)> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::Config("a branch needs at least one step".into()));
    }
    if data.examples.is_empty() {
        return Err(Error::Precondition("training corpus is empty".into()));
    }
    if window.offset + steps > window.total {
        return Err(Error::Config("training steps overrun the schedule window".into()));
    }
    let mut state = TrainState::new(init.clone(), data.examples.len(), cfg, window);
    for _ in 0..steps {
        sft_step(&mut state, data, lm, cfg)?;
        let rec = *state.log.last().expect("step logged");
        on_step(&state, &rec)?;
    }
    Ok((state.params, state.log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        let cfg = TrainConfig { base_lr: 1e-3, total_steps: 200, ..TrainConfig::default() };
        // warmup = ceil(0.01 * 200) = 2, cosine phase 2..=200, midpoint 101.
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert!((lr_at(1, &cfg).unwrap() - 5e-4).abs() < 1e-12);
        assert!((lr_at(2, &cfg).unwrap() - 1e-3).abs() < 1e-12);
        assert!((lr_at(101, &cfg).unwrap() - 5e-4).abs() < 1e-12);
        assert!(lr_at(200, &cfg).unwrap().abs() < 1e-12);
        assert!(lr_at(201, &cfg).is_err());
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (0..=250).map(|s| lr_at(s, &cfg).unwrap()).collect();
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        assert_eq!(peak, cfg.base_lr);
        let top = lrs.iter().position(|&l| l == peak).unwrap();
        assert!(lrs[..=top].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[top..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn no_warmup_starts_at_base() {
        let cfg = TrainConfig { warmup_fraction: 0.0, total_steps: 10, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), cfg.base_lr);
    }

    #[test]
    fn clipping_scales_to_the_limit() {
        let mut g = vec![3.0f32, 4.0];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-7 && (g[1] - 0.8).abs() < 1e-7);
        let mut small = vec![0.3f32, 0.4];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = vec![0.5f32, -1.0, 2.0];
        let before = p.clone();
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adamw_update(&mut p, &[0.0; 3], &mut m, &mut v, 1, 1e-2, &cfg);
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.5f32, -1.0, 2.0];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 1..=5 {
            let before: Vec<f32> = p.iter().map(|x| x.abs()).collect();
            adamw_update(&mut p, &[0.0; 3], &mut m, &mut v, t, 1e-2, &cfg);
            assert!(p.iter().zip(&before).all(|(x, b)| x.abs() < *b));
        }
    }

    #[test]
    fn epochs_cover_every_example_and_keep_the_tail() {
        let mut order = DataOrder::new(3, 10);
        let sizes: Vec<usize> = (0..4).map(|_| order.next_batch(4).len()).collect();
        assert_eq!(sizes, vec![4, 4, 2, 4]);
        let mut order = DataOrder::new(3, 10);
        let mut epoch: Vec<usize> = (0..3).flat_map(|_| order.next_batch(4)).collect();
        epoch.sort_unstable();
        assert_eq!(epoch, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { base_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { grad_clip_norm: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::large_batch().validate().is_ok());
    }
}
