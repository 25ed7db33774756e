//! Pieces shared by both modeling attacks: the Adam optimizer, the
//! numerically stable binary-cross-entropy loss, batch sizing, and the
//! per-run training report.

use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Seeds that fix one training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSeeds {
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

/// Why training stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Validation loss failed to improve for `patience` consecutive epochs.
    EarlyStop,
    /// Validation accuracy reached the configured threshold.
    ValAccuracyReached,
    MaxEpochs,
    WallClock,
    /// A non-finite loss ended the run; the returned model is the last
    /// finite state.
    Diverged,
}

/// Record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Losses and accuracies of the returned model.
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: f64,
    pub best_val_loss: f64,
    pub wall_time: Duration,
    pub seeds: TrainSeeds,
    pub stop: StopReason,
    /// Validation loss after each completed epoch.
    pub val_loss_history: Vec<f64>,
}

impl TrainReport {
    pub fn converged(&self) -> bool {
        self.stop != StopReason::Diverged
    }
}

/// The experiment batch-size rule 10^(k-1), with a floor of 32 (one- and
/// ten-record batches are pathological for Adam) and clamped to the
/// training-set size.
pub fn default_batch_size(k: usize, train_len: usize) -> usize {
    let raw = 10u64.saturating_pow(k.saturating_sub(1).min(19) as u32);
    let raw = raw.max(32).min(train_len.max(1) as u64);
    raw as usize
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// BCE computed from the logit: max(z,0) − z·y + ln(1 + e^(−|z|)).
/// Stays finite for any finite z, so divergence detection only needs a
/// finiteness check.
pub(crate) fn bce_from_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// Adam over a flat parameter vector (β1 = 0.9, β2 = 0.999, ε = 1e−8).
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

pub(crate) fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}
