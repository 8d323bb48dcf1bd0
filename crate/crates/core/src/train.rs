//! AdamW training for from-scratch and retrofit runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{loss_on_tape, ModelConfig, Retrieval};
use crate::numeric::{save_checkpoint, ParameterStore, Tape, Tensor};

/// Learning rate at the first warmup step.
pub const WARMUP_START_LR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear ramp from `1e-7` to `peak` over `warmup` steps, then a cosine
    /// decay reaching `min` at step `cosine_len` and staying there.
    WarmupCosine { warmup: usize, peak: f64, min: f64, cosine_len: usize },
    Constant(f64),
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::WarmupCosine { warmup, peak, min, cosine_len } => {
                if step < warmup {
                    WARMUP_START_LR + (peak - WARMUP_START_LR) * step as f64 / warmup as f64
                } else if step < cosine_len {
                    let t = (step - warmup) as f64 / (cosine_len - warmup) as f64;
                    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * t).cos())
                } else {
                    min
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant(lr) => ensure!(lr >= 0.0 && lr.is_finite(), "learning rate must be finite and non-negative"),
            LrSchedule::WarmupCosine { warmup, peak, min, cosine_len } => {
                ensure!(warmup <= cosine_len, "warmup ({warmup}) must not exceed the cosine length ({cosine_len})");
                ensure!(peak >= min && min > 0.0, "need peak >= min > 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Neighbours per chunk used in training.
    pub k_train: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_steps: 1000,
            schedule: LrSchedule::WarmupCosine {
                warmup: 100,
                peak: 2e-3,
                min: 2e-4,
                cosine_len: 1000,
            },
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            seed: 0,
            k_train: 2,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch size must be positive");
        ensure!(self.k_train >= 1, "k_train must be positive");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "Adam betas must lie in [0, 1)");
        ensure!(self.eps > 0.0 && self.weight_decay >= 0.0, "eps must be positive and weight decay non-negative");
        self.schedule.validate()
    }
}

/// One training sequence with its precomputed neighbour values.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub neighbors: Option<Vec<Vec<Vec<u32>>>>,
}

impl TrainExample {
    pub fn retrieval(&self) -> Retrieval<'_> {
        match &self.neighbors {
            Some(n) => Retrieval::On(n),
            None => Retrieval::Off,
        }
    }

    /// Keeps the first `k` neighbours of every chunk.
    pub fn truncated(&self, k: usize) -> TrainExample {
        TrainExample {
            tokens: self.tokens.clone(),
            neighbors: self
                .neighbors
                .as_ref()
                .map(|n| n.iter().map(|c| c.iter().take(k).cloned().collect()).collect()),
        }
    }
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParameterStore<f32>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.tensor(id).shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<f32> {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<f32> {
        &self.v[i]
    }

    /// Applies one update to every unfrozen parameter. Weight decay applies
    /// to matrices only.
    pub fn step(&mut self, store: &mut ParameterStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (tc.beta1, tc.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_frozen(id) {
                continue;
            }
            let decay = if store.tensor(id).shape().len() >= 2 { tc.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let g = grads[id.0].as_ref();
            let p = store.tensor_mut(id);
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i] as f64);
                let mi = b1 * m.data()[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] as f64 + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let pi = p.data()[i] as f64;
                let update = (mi / c1) / ((vi / c2).sqrt() + tc.eps) + decay * pi;
                p.data_mut()[i] = (pi - lr * update) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean loss per scored token, in nats.
    pub loss: f64,
    pub tokens: usize,
    pub max_abs_grad: f64,
}

/// Summed loss gradients over a batch; sequences run in parallel and are
/// reduced in batch order.
pub fn batch_gradients(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    batch: &[TrainExample],
    dropout_seed: u64,
) -> Result<(Vec<Option<Tensor<f32>>>, f64, usize)> {
    let per: Vec<(Vec<Option<Tensor<f32>>>, f64, usize)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut tape = Tape::new();
            let (loss, _) = loss_on_tape(&mut tape, store, cfg, &ex.tokens, ex.retrieval(), Some(&mut rng))?;
            let tokens = crate::model::next_token_targets(&ex.tokens).iter().flatten().count();
            let value = tape.value(loss).data()[0] as f64;
            let grads = tape.backward(loss)?;
            Ok((tape.param_grads(&grads, store.len()), value, tokens))
        })
        .collect::<Result<_>>()?;
    let mut total: Vec<Option<Tensor<f32>>> = (0..store.len()).map(|_| None).collect();
    let (mut loss, mut tokens) = (0.0, 0);
    for (grads, l, t) in per {
        loss += l;
        tokens += t;
        for (acc, g) in total.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    Ok((total, loss, tokens))
}

/// One optimizer step on `batch`; returns the mean per-token loss.
pub fn train_step(
    store: &mut ParameterStore<f32>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    opt: &mut AdamW,
    batch: &[TrainExample],
    step: usize,
) -> Result<StepStats> {
    ensure!(!batch.is_empty(), "empty batch");
    let batch: Vec<TrainExample> = batch.iter().map(|b| b.truncated(tc.k_train)).collect();
    let (mut grads, loss_sum, tokens) = batch_gradients(store, cfg, &batch, tc.seed ^ (step as u64) << 20)?;
    let denom = tokens.max(1) as f32;
    for g in grads.iter_mut().flatten() {
        for x in g.data_mut() {
            *x /= denom;
        }
    }
    let max_abs_grad = grads.iter().flatten().map(|g| g.max_abs() as f64).fold(0.0, f64::max);
    let loss = loss_sum / tokens.max(1) as f64;
    let finite = grads.iter().flatten().all(Tensor::is_finite);
    if !loss.is_finite() || !finite {
        return Err(Error::NonFinite { step, loss, max_abs_grad });
    }
    if let Some(clip) = tc.grad_clip {
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = (clip / norm) as f32;
            for g in grads.iter_mut().flatten() {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    opt.step(store, &grads, tc.schedule.lr(step), tc);
    Ok(StepStats { loss, tokens, max_abs_grad })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss_nats: f64,
    pub lr: f64,
    pub tokens_seen: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    /// Checkpoint path and cadence in steps.
    pub checkpoint: Option<(PathBuf, usize)>,
}

/// Runs `tc.max_steps` steps over `data`, drawing batches from a shuffled
/// order reseeded every epoch.
pub fn train(
    store: &mut ParameterStore<f32>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    data: &[TrainExample],
    outputs: &TrainOutputs,
) -> Result<Vec<LogEntry>> {
    tc.validate()?;
    cfg.validate()?;
    ensure!(!data.is_empty(), "no training sequences");
    let mut log = match &outputs.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut opt = AdamW::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut entries = Vec::with_capacity(tc.max_steps);
    let mut tokens_seen = 0u64;
    for step in 0..tc.max_steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(data[order.pop().expect("refilled")].clone());
        }
        let stats = train_step(store, cfg, tc, &mut opt, &batch, step)?;
        tokens_seen += stats.tokens as u64;
        let entry = LogEntry {
            step,
            loss_nats: stats.loss,
            lr: tc.schedule.lr(step),
            tokens_seen,
        };
        if let (Some(w), Some(p)) = (log.as_mut(), &outputs.log) {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(p, e))?;
        }
        entries.push(entry);
        if let Some((path, every)) = &outputs.checkpoint {
            if *every > 0 && (step + 1) % every == 0 {
                save_checkpoint(path, &cfg.to_json(), store)?;
            }
        }
    }
    if let (Some(mut w), Some(p)) = (log, &outputs.log) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(entries)
}

/// Mean per-token loss (nats) of `data` without updating anything.
pub fn mean_loss(store: &ParameterStore<f32>, cfg: &ModelConfig, data: &[TrainExample]) -> Result<f64> {
    let per: Vec<(f64, usize)> = data
        .par_iter()
        .map(|ex| {
            let ll = crate::model::log_likelihood(store, cfg, &ex.tokens, ex.retrieval())?;
            Ok((ll.total_nats(), ll.scored()))
        })
        .collect::<Result<_>>()?;
    let (l, n) = per.iter().fold((0.0, 0), |(a, b), &(l, n)| (a + l, b + n));
    ensure!(n > 0, "no scored tokens");
    Ok(l / n as f64)
}

/// Saves `store` with its config.
pub fn save_model(path: &Path, cfg: &ModelConfig, store: &ParameterStore<f32>) -> Result<()> {
    save_checkpoint(path, &cfg.to_json(), store)
}

/// Loads a checkpoint and its config.
pub fn load_model(path: &Path) -> Result<(ModelConfig, ParameterStore<f32>)> {
    let (blob, store) = crate::numeric::load_checkpoint(path)?;
    let cfg = ModelConfig::from_json(&blob).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((cfg, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::model::NeighborMode;

    fn toy() -> ModelConfig {
        let mut c = ModelConfig::small(16, 4, 16, 2);
        c.heads = 2;
        c.head_dim = 8;
        c.d_ffw = 32;
        c.d_enc = 8;
        c.enc_d_ffw = 16;
        c.rel_features = 8;
        c
    }

    fn batch() -> Vec<TrainExample> {
        let nb = |s: u32| (0..4).map(|u| (0..2).map(|j| (0..8).map(|i| (s + u * 7 + j * 3 + i) % 250 + 1).collect()).collect()).collect();
        vec![
            TrainExample { tokens: b"hello retro desk".iter().map(|&b| b as u32 + 1).collect(), neighbors: Some(nb(1)) },
            TrainExample { tokens: b"chunked attends!".iter().map(|&b| b as u32 + 1).collect(), neighbors: Some(nb(9)) },
        ]
    }

    #[test]
    fn schedule_matches_closed_form() {
        let s = LrSchedule::WarmupCosine { warmup: 10, peak: 1e-3, min: 1e-4, cosine_len: 110 };
        for step in 0..150 {
            let want = if step < 10 {
                1e-7 + (1e-3 - 1e-7) * step as f64 / 10.0
            } else if step < 110 {
                1e-4 + 0.45e-3 * (1.0 + (std::f64::consts::PI * (step - 10) as f64 / 100.0).cos())
            } else {
                1e-4
            };
            assert!((s.lr(step) - want).abs() < 1e-15, "step {step}");
        }
        assert_eq!(s.lr(0), 1e-7);
        assert!((s.lr(10) - 1e-3).abs() < 1e-15);
        assert!(LrSchedule::WarmupCosine { warmup: 20, peak: 1.0, min: 0.1, cosine_len: 10 }.validate().is_err());
        assert!(LrSchedule::WarmupCosine { warmup: 1, peak: 1.0, min: 0.0, cosine_len: 10 }.validate().is_err());
    }

    #[test]
    fn zero_lr_changes_only_moments() {
        let cfg = toy();
        let mut store = init_params(&cfg, 0).unwrap();
        let before = store.clone();
        let tc = TrainConfig { schedule: LrSchedule::Constant(0.0), ..TrainConfig::default() };
        let mut opt = AdamW::new(&store);
        train_step(&mut store, &cfg, &tc, &mut opt, &batch(), 0).unwrap();
        assert_eq!(store, before);
        assert!(opt.first_moment(0).max_abs() > 0.0);
    }

    #[test]
    fn frozen_everything_keeps_loss_constant() {
        let cfg = toy();
        let mut store = init_params(&cfg, 1).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.set_frozen(id, true);
        }
        let tc = TrainConfig { schedule: LrSchedule::Constant(1e-2), ..TrainConfig::default() };
        let mut opt = AdamW::new(&store);
        let a = train_step(&mut store, &cfg, &tc, &mut opt, &batch(), 0).unwrap();
        let b = train_step(&mut store, &cfg, &tc, &mut opt, &batch(), 1).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn overfits_a_single_batch() {
        let cfg = toy();
        let mut store = init_params(&cfg, 2).unwrap();
        let tc = TrainConfig {
            schedule: LrSchedule::Constant(1e-2),
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&store);
        let mut last = f64::INFINITY;
        for step in 0..200 {
            last = train_step(&mut store, &cfg, &tc, &mut opt, &batch(), step).unwrap().loss;
        }
        assert!(last < 0.1, "loss after 200 steps: {last}");
    }

    #[test]
    fn frozen_tensors_are_byte_identical() {
        let mut cfg = toy();
        let base_cfg = ModelConfig { neighbor_mode: NeighborMode::Off, ..cfg.clone() };
        let base = init_params(&base_cfg, 3).unwrap();
        cfg.neighbor_mode = NeighborMode::Both;
        let mut store = crate::model::retrofit_params(&base, &base_cfg, &cfg, 4).unwrap();
        let tc = TrainConfig { max_steps: 5, batch_size: 2, ..TrainConfig::default() };
        train(&mut store, &cfg, &tc, &batch(), &TrainOutputs::default()).unwrap();
        for id in base.ids() {
            let a: Vec<u32> = base.tensor(id).data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = store.tensor(store.id(base.name(id)).unwrap()).data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let cfg = toy();
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str| {
            let mut store = init_params(&cfg, 5).unwrap();
            let tc = TrainConfig { max_steps: 4, batch_size: 3, ..TrainConfig::default() };
            let out = TrainOutputs {
                log: Some(dir.path().join(format!("{name}.jsonl"))),
                checkpoint: Some((dir.path().join(format!("{name}.rckp")), 2)),
            };
            train(&mut store, &cfg, &tc, &batch(), &out).unwrap();
            store
        };
        assert_eq!(run("a"), run("b"));
        let la = std::fs::read(dir.path().join("a.jsonl")).unwrap();
        assert_eq!(la, std::fs::read(dir.path().join("b.jsonl")).unwrap());
        assert_eq!(String::from_utf8(la).unwrap().lines().count(), 4);
        assert_eq!(std::fs::read(dir.path().join("a.rckp")).unwrap(), std::fs::read(dir.path().join("b.rckp")).unwrap());
        let (c, _) = load_model(&dir.path().join("a.rckp")).unwrap();
        assert_eq!(c, cfg);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let cfg = toy();
        let mut store = init_params(&cfg, 6).unwrap();
        let id = store.id("dec.readout").unwrap();
        store.tensor_mut(id).data_mut()[0] = f32::NAN;
        let mut opt = AdamW::new(&store);
        let err = train_step(&mut store, &cfg, &TrainConfig::default(), &mut opt, &batch(), 7).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 7, .. }));
        assert_eq!(err.exit_code(), 4);
    }
}
