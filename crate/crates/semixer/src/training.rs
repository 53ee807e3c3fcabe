//! Mini-batch training: adaptive-moment updates, global-norm gradient
//! clipping, plateau learning-rate halving, early stopping on validation
//! loss, and a per-epoch history record.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dataio::{normalize_with, Windows};
use crate::mpmc::{draw_sample_masks, predict, sample_loss_and_grad, ModelConfig, ModelParams};
use crate::numerics::rng::{self, TAG_MASK, TAG_SHUFFLE};
use crate::{Error, Result};

/// Per-sample gradients held in memory at once inside a batch.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global L2 clip threshold; None disables clipping.
    pub clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            patience: 5,
            seed,
            clip: Some(5.0),
        }
    }
}

/// Mean squared error over equal-length slices.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "mse over mismatched lengths");
    let n = pred.len().max(1) as f64;
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

/// Adaptive-moment optimizer with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer dimension mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient dimension mismatch");
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Errors with the owning parameter's name if any gradient entry is not
/// finite; training aborts rather than writing poison into the moments.
pub fn check_gradient_finite(grad: &[f64], params: &ModelParams) -> Result<()> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient for parameter {} (flat index {i})",
            params.name_at(i)
        )));
    }
    Ok(())
}

/// Scales the gradient so its global L2 norm is at most `max_norm`.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
}

/// Validation-driven schedule: halve the learning rate after every two
/// consecutive non-improving epochs, stop once they reach the patience.
pub struct PlateauSchedule {
    best: f64,
    since_improve: usize,
    patience: usize,
}

pub struct PlateauDecision {
    pub improved: bool,
    pub halve_lr: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            since_improve: 0,
            patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val: f64) -> PlateauDecision {
        if val < self.best {
            self.best = val;
            self.since_improve = 0;
            PlateauDecision { improved: true, halve_lr: false, stop: false }
        } else {
            self.since_improve += 1;
            PlateauDecision {
                improved: false,
                halve_lr: self.since_improve.is_multiple_of(2),
                stop: self.since_improve >= self.patience,
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Rate in effect during this epoch's updates.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// 1-based; 0 if no epoch ran.
    pub best_epoch: usize,
    pub best_val: f64,
}

pub fn save_history_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut out = String::from("epoch,train_mse,val_mse,lr,seconds\n");
    for e in &history.epochs {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            e.epoch, e.train_mse, e.val_mse, e.lr, e.seconds
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Mean normalized-space MSE over every window, inference mode.
pub fn validation_mse(params: &ModelParams, windows: &Windows) -> Result<f64> {
    let losses: Vec<Result<f64>> = (0..windows.count())
        .into_par_iter()
        .map(|i| {
            let w = windows.get(i);
            let f = predict(params, w.history)?;
            let target = normalize_with(w.target, &f.stats);
            Ok(mse_loss(&f.normalized, &target))
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / windows.count() as f64)
}

pub struct TrainOutcome {
    /// Parameters from the best-validation epoch.
    pub params: ModelParams,
    pub history: TrainHistory,
}

fn check_windows(cfg: &ModelConfig, w: &Windows, what: &str) -> Result<()> {
    if w.n() != cfg.n || w.horizon() != cfg.t || w.channels() != cfg.c {
        return Err(Error::Config(format!(
            "{what} windows are ({}, {}, {} channels) but the model expects ({}, {}, {} channels)",
            w.n(),
            w.horizon(),
            w.channels(),
            cfg.n,
            cfg.t,
            cfg.c
        )));
    }
    Ok(())
}

/// Full training run. Shuffling, mask draws, and chunked gradient folds are
/// all seeded, so identical inputs give bitwise-identical outcomes.
pub fn train(
    config: &ModelConfig,
    tc: &TrainConfig,
    train_windows: &Windows,
    val_windows: &Windows,
) -> Result<TrainOutcome> {
    if tc.epochs == 0 || tc.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    if !(tc.lr.is_finite() && tc.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", tc.lr)));
    }
    if let Some(clip) = tc.clip {
        if !(clip.is_finite() && clip > 0.0) {
            return Err(Error::Config(format!("clip threshold must be positive, got {clip}")));
        }
    }
    check_windows(config, train_windows, "training")?;
    check_windows(config, val_windows, "validation")?;

    let mut params = ModelParams::init(config.clone(), tc.seed);
    let mut opt = Adam::new(params.param_count(), tc.lr);
    let mut sched = PlateauSchedule::new(tc.patience);
    let mut history = TrainHistory::default();
    let mut best_data = params.data().to_vec();
    let mut best_epoch = 0;
    let count = train_windows.count();

    for epoch in 1..=tc.epochs {
        let start = Instant::now();
        let lr_in_effect = opt.lr();
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng::stream(tc.seed, &[TAG_SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(tc.batch_size).enumerate() {
            let mut grad_acc = vec![0.0; params.param_count()];
            let mut batch_loss = 0.0;
            // cap concurrent per-sample gradients; fold in deterministic order
            for (chunk_idx, chunk) in batch.chunks(GRAD_CHUNKS).enumerate() {
                let base_slot = chunk_idx * GRAD_CHUNKS;
                let results: Vec<Result<(f64, Vec<f64>)>> = chunk
                    .par_iter()
                    .enumerate()
                    .map(|(j, &sample_idx)| {
                        let slot = (base_slot + j) as u64;
                        let mut mask_rng = rng::stream(
                            tc.seed,
                            &[TAG_MASK, epoch as u64, batch_idx as u64, slot],
                        );
                        let masks = draw_sample_masks(config, &mut mask_rng)?;
                        let w = train_windows.get(sample_idx);
                        sample_loss_and_grad(&params, w.history, w.target, &masks)
                    })
                    .collect();
                for r in results {
                    let (l, g) = r?;
                    batch_loss += l;
                    for (a, gi) in grad_acc.iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad_acc.iter_mut() {
                *g *= inv;
            }
            check_gradient_finite(&grad_acc, &params)?;
            if let Some(max_norm) = tc.clip {
                clip_gradient(&mut grad_acc, max_norm);
            }
            opt.step(params.data_mut(), &grad_acc);
            loss_sum += batch_loss;
        }

        let train_mse = loss_sum / count as f64;
        let val_mse = validation_mse(&params, val_windows)?;
        let decision = sched.observe(val_mse);
        if decision.improved {
            best_data.copy_from_slice(params.data());
            best_epoch = epoch;
        }
        history.epochs.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
            lr: lr_in_effect,
            seconds: start.elapsed().as_secs_f64(),
        });
        if decision.stop {
            break;
        }
        if decision.halve_lr {
            opt.set_lr(opt.lr() / 2.0);
        }
    }

    history.best_epoch = best_epoch;
    history.best_val = sched.best();
    params.data_mut().copy_from_slice(&best_data);
    Ok(TrainOutcome { params, history })
}
