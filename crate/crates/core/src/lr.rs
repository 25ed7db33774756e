//! The adapted logistic-regression attack.
//!
//! One linear delay model per component, trained jointly: component l
//! scores its own sub-challenge, s_l = w_l · [Φ(c^(l)); 1], the logit is
//! the product z = Π s_l, and the response probability is σ(z). The
//! product is what lets k linear models express an XOR of thresholds;
//! gradients are analytic and training is mini-batch Adam with BCE loss
//! and patience-based early stopping on validation loss.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attack::{
    all_finite, bce_from_logit, default_batch_size, sigmoid, Adam, StopReason, TrainReport,
    TrainSeeds,
};
use crate::crp::{CrpRecord, CrpSet};
use crate::error::{Error, Result};
use crate::puf::{fill_parity_features, fill_parity_features_packed, CdcChallenge};

/// k per-component weight vectors of length n+1 (stage weights plus bias).
#[derive(Debug, Clone, PartialEq)]
pub struct LrModel {
    n: usize,
    k: usize,
    weights: Vec<f64>, // k blocks of n+1
}

/// Training schedule of the adapted LR attack.
#[derive(Debug, Clone)]
pub struct LrTrainConfig {
    pub base_learning_rate: f64,
    /// Initial per-component score deviation (weights drawn
    /// N(0, initScoreScale/√(n+1))).
    pub init_score_scale: f64,
    /// `None` uses the 10^(k−1) rule (floored at 32, clamped to the
    /// training-set size).
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub wall_clock_budget: Option<Duration>,
}

impl LrTrainConfig {
    pub fn new(init_seed: u64, shuffle_seed: u64) -> Self {
        Self {
            base_learning_rate: 0.01,
            init_score_scale: 1.0,
            batch_size: None,
            max_epochs: 500,
            patience: 5,
            init_seed,
            shuffle_seed,
            wall_clock_budget: None,
        }
    }
}

/// Training failure. Divergence carries the last finite state.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        model: Box<LrModel>,
        report: Box<TrainReport>,
    },
}

impl LrModel {
    /// Weights drawn i.i.d. N(0, 1/√(n+1)) so each initial score has unit
    /// variance and the k-fold product neither vanishes nor explodes.
    pub fn init(n: usize, k: usize, init_seed: u64) -> Result<Self> {
        Self::init_scaled(n, k, init_seed, 1.0)
    }

    /// Init with the per-weight deviation scaled by `score_scale`, so each
    /// initial component score has deviation ~`score_scale`.
    pub fn init_scaled(n: usize, k: usize, init_seed: u64, score_scale: f64) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::invalid("n and k must be >= 1"));
        }
        if !(score_scale > 0.0 && score_scale.is_finite()) {
            return Err(Error::invalid("score scale must be positive and finite"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let scale = score_scale / ((n + 1) as f64).sqrt();
        let weights = (0..k * (n + 1))
            .map(|_| {
                let w: f64 = StandardNormal.sample(&mut rng);
                scale * w
            })
            .collect();
        Ok(Self { n, k, weights })
    }

    pub fn from_components(components: Vec<Vec<f64>>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("need at least one component"));
        }
        let width = components[0].len();
        if width < 2 || components.iter().any(|c| c.len() != width) {
            return Err(Error::invalid(
                "components must share one length n+1 with n >= 1",
            ));
        }
        Ok(Self {
            n: width - 1,
            k: components.len(),
            weights: components.concat(),
        })
    }

    pub fn stage_count(&self) -> usize {
        self.n
    }

    pub fn component_count(&self) -> usize {
        self.k
    }

    fn width(&self) -> usize {
        self.n + 1
    }

    pub fn component(&self, l: usize) -> &[f64] {
        &self.weights[l * self.width()..(l + 1) * self.width()]
    }

    pub fn component_mut(&mut self, l: usize) -> &mut [f64] {
        let w = self.width();
        &mut self.weights[l * w..(l + 1) * w]
    }

    fn check_challenge(&self, cc: &CdcChallenge) -> Result<()> {
        if cc.component_count() != self.k || cc.stage_count() != self.n {
            return Err(Error::invalid(format!(
                "challenge is ({}, {}) but model is ({}, {})",
                cc.stage_count(),
                cc.component_count(),
                self.n,
                self.k
            )));
        }
        Ok(())
    }

    /// Returns (p, scores): s_l = w_l · [Φ(c^(l)); 1], z = Π s_l,
    /// p = σ(z), the modeled probability that the response is 1.
    pub fn forward(&self, cc: &CdcChallenge) -> Result<(f64, Vec<f64>)> {
        self.check_challenge(cc)?;
        let mut feat = vec![0i8; self.n];
        let mut scores = Vec::with_capacity(self.k);
        for (l, c) in cc.components().iter().enumerate() {
            fill_parity_features(c.bits(), &mut feat);
            scores.push(score(self.component(l), &feat));
        }
        let z: f64 = scores.iter().product();
        Ok((sigmoid(z), scores))
    }

    /// Predicted response: 1 iff p > 0.5 (p = 0.5 maps to 0).
    pub fn predict(&self, cc: &CdcChallenge) -> Result<u8> {
        let (p, _) = self.forward(cc)?;
        Ok((p > 0.5) as u8)
    }

    /// Fraction of records whose predicted response matches.
    pub fn accuracy(&self, set: &CrpSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::invalid("cannot score an empty CRP set"));
        }
        if set.component_count() != self.k || set.stage_count() != self.n {
            return Err(Error::invalid("CRP set dimensions do not match model"));
        }
        let comp_bytes = self.n.div_ceil(8);
        let mut feat = vec![0i8; self.n];
        let mut hits = 0usize;
        for i in 0..set.len() {
            let record = set.record_challenge_bytes(i);
            let mut z = 1.0;
            for l in 0..self.k {
                fill_parity_features_packed(
                    &record[l * comp_bytes..(l + 1) * comp_bytes],
                    self.n,
                    &mut feat,
                );
                z *= score(self.component(l), &feat);
            }
            let predicted = (z > 0.0) as u8;
            hits += (predicted == set.response(i)) as usize;
        }
        Ok(hits as f64 / set.len() as f64)
    }

    /// Checkpoint: "LRCK" magic, version, (n, k) header, then k·(n+1)
    /// little-endian f64 weights.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.n > u16::MAX as usize || self.k > u8::MAX as usize {
            return Err(Error::invalid("model dimensions exceed format limits"));
        }
        w.write_all(b"LRCK")?;
        w.write_all(&[1u8])?;
        w.write_all(&(self.n as u16).to_le_bytes())?;
        w.write_all(&[self.k as u8])?;
        for weight in &self.weights {
            w.write_all(&weight.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        use crate::puf::read_exact_at;
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact_at(&mut r, &mut magic, &mut offset)?;
        if &magic != b"LRCK" {
            return Err(Error::format(0, "bad magic, expected \"LRCK\""));
        }
        let mut byte = [0u8; 1];
        read_exact_at(&mut r, &mut byte, &mut offset)?;
        if byte[0] != 1 {
            return Err(Error::format(4, format!("unsupported version {}", byte[0])));
        }
        let mut two = [0u8; 2];
        read_exact_at(&mut r, &mut two, &mut offset)?;
        let n = u16::from_le_bytes(two) as usize;
        read_exact_at(&mut r, &mut byte, &mut offset)?;
        let k = byte[0] as usize;
        if n == 0 || k == 0 {
            return Err(Error::format(5, "model dimensions must be >= 1"));
        }
        let mut weights = Vec::with_capacity(k * (n + 1));
        let mut f = [0u8; 8];
        for _ in 0..k * (n + 1) {
            read_exact_at(&mut r, &mut f, &mut offset)?;
            weights.push(f64::from_le_bytes(f));
        }
        Ok(Self { n, k, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn score(weights: &[f64], feat: &[i8]) -> f64 {
    let n = feat.len();
    let mut s = weights[n]; // bias
    for (w, &f) in weights[..n].iter().zip(feat) {
        s += w * f as f64;
    }
    s
}

/// Parity features with the trailing constant 1, one block per component,
/// laid out contiguously per record.
struct EncodedSet {
    k: usize,
    width: usize, // n + 1
    features: Vec<i8>,
    targets: Vec<f64>,
}

impl EncodedSet {
    fn from_crpset(set: &CrpSet) -> Self {
        let n = set.stage_count();
        let k = set.component_count();
        let width = n + 1;
        let comp_bytes = n.div_ceil(8);
        let mut features = vec![0i8; set.len() * k * width];
        let mut targets = Vec::with_capacity(set.len());
        for i in 0..set.len() {
            let record = set.record_challenge_bytes(i);
            let base = i * k * width;
            for l in 0..k {
                let block = &mut features[base + l * width..base + (l + 1) * width];
                fill_parity_features_packed(
                    &record[l * comp_bytes..(l + 1) * comp_bytes],
                    n,
                    &mut block[..n],
                );
                block[n] = 1;
            }
            targets.push(set.response(i) as f64);
        }
        Self {
            k,
            width,
            features,
            targets,
        }
    }

    fn len(&self) -> usize {
        self.targets.len()
    }

    fn record_features(&self, i: usize) -> &[i8] {
        let stride = self.k * self.width;
        &self.features[i * stride..(i + 1) * stride]
    }
}

/// Accumulates the summed BCE gradient of the batch into `grad` (same flat
/// layout as the model weights) and returns the summed loss. Uses
/// prefix/suffix score products so a zero score is handled exactly.
fn accumulate_batch(
    weights: &[f64],
    enc: &EncodedSet,
    indices: &[usize],
    grad: &mut [f64],
    scores: &mut [f64],
    prefix: &mut [f64],
    suffix: &mut [f64],
) -> f64 {
    let k = enc.k;
    let width = enc.width;
    let mut loss_sum = 0.0;
    for &i in indices {
        let feats = enc.record_features(i);
        for l in 0..k {
            scores[l] = dot(&weights[l * width..(l + 1) * width], &feats[l * width..(l + 1) * width]);
        }
        let mut acc = 1.0;
        for l in 0..k {
            prefix[l] = acc;
            acc *= scores[l];
        }
        let z = acc;
        let mut acc = 1.0;
        for l in (0..k).rev() {
            suffix[l] = acc;
            acc *= scores[l];
        }
        let target = enc.targets[i];
        loss_sum += bce_from_logit(z, target);
        let g = sigmoid(z) - target;
        for l in 0..k {
            let coeff = g * prefix[l] * suffix[l];
            let block = &feats[l * width..(l + 1) * width];
            let gblock = &mut grad[l * width..(l + 1) * width];
            for (gw, &f) in gblock.iter_mut().zip(block) {
                *gw += coeff * f as f64;
            }
        }
    }
    loss_sum
}

fn dot(weights: &[f64], feat: &[i8]) -> f64 {
    weights.iter().zip(feat).map(|(w, &f)| w * f as f64).sum()
}

fn mean_loss(weights: &[f64], enc: &EncodedSet) -> f64 {
    let k = enc.k;
    let width = enc.width;
    let mut loss = 0.0;
    for i in 0..enc.len() {
        let feats = enc.record_features(i);
        let mut z = 1.0;
        for l in 0..k {
            z *= dot(&weights[l * width..(l + 1) * width], &feats[l * width..(l + 1) * width]);
        }
        loss += bce_from_logit(z, enc.targets[i]);
    }
    loss / enc.len() as f64
}

fn mean_accuracy(weights: &[f64], enc: &EncodedSet) -> f64 {
    let k = enc.k;
    let width = enc.width;
    let mut hits = 0usize;
    for i in 0..enc.len() {
        let feats = enc.record_features(i);
        let mut z = 1.0;
        for l in 0..k {
            z *= dot(&weights[l * width..(l + 1) * width], &feats[l * width..(l + 1) * width]);
        }
        hits += ((z > 0.0) as u8 as f64 == enc.targets[i]) as usize;
    }
    hits as f64 / enc.len() as f64
}

/// Mean BCE gradient over the batch, shaped like the model:
/// ∂L/∂w_l = mean of (p − r)·(Π_{m≠l} s_m)·[Φ(c^(l)); 1].
pub fn gradient(model: &LrModel, batch: &[CrpRecord]) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Err(Error::invalid("gradient of an empty batch"));
    }
    let k = model.component_count();
    let n = model.stage_count();
    let width = n + 1;
    let mut features = vec![0i8; batch.len() * k * width];
    let mut targets = Vec::with_capacity(batch.len());
    for (i, rec) in batch.iter().enumerate() {
        model.check_challenge(&rec.challenge)?;
        let base = i * k * width;
        for (l, c) in rec.challenge.components().iter().enumerate() {
            let block = &mut features[base + l * width..base + (l + 1) * width];
            fill_parity_features(c.bits(), &mut block[..n]);
            block[n] = 1;
        }
        targets.push(rec.response as f64);
    }
    let enc = EncodedSet {
        k,
        width,
        features,
        targets,
    };
    let mut grad = vec![0.0; k * width];
    let indices: Vec<usize> = (0..batch.len()).collect();
    accumulate_batch(
        &model.weights,
        &enc,
        &indices,
        &mut grad,
        &mut vec![0.0; k],
        &mut vec![0.0; k],
        &mut vec![0.0; k],
    );
    let scale = 1.0 / batch.len() as f64;
    Ok((0..k)
        .map(|l| {
            grad[l * width..(l + 1) * width]
                .iter()
                .map(|g| g * scale)
                .collect()
        })
        .collect())
}

/// Trains the adapted LR model from a seeded random init: mini-batch Adam
/// at the configured base rate, a fresh shuffle every epoch, and early
/// stopping when validation loss fails to improve for `patience`
/// consecutive epochs. Returns the best-validation-loss model.
pub fn train(
    train: &CrpSet,
    validation: &CrpSet,
    config: &LrTrainConfig,
) -> std::result::Result<(LrModel, TrainReport), TrainError> {
    let model = LrModel::init_scaled(
        train.stage_count().max(1),
        train.component_count().max(1),
        config.init_seed,
        config.init_score_scale,
    )
    .map_err(TrainError::Invalid)?;
    train_from(model, train, validation, config)
}

/// Same training loop but warm-started from an existing model; the refine
/// stage of the experiment protocol reuses this at a reduced rate.
pub fn train_from(
    initial: LrModel,
    train: &CrpSet,
    validation: &CrpSet,
    config: &LrTrainConfig,
) -> std::result::Result<(LrModel, TrainReport), TrainError> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty").into());
    }
    if train.stage_count() != validation.stage_count()
        || train.component_count() != validation.component_count()
    {
        return Err(Error::invalid("train/validation dimensions differ").into());
    }
    if initial.stage_count() != train.stage_count()
        || initial.component_count() != train.component_count()
    {
        return Err(Error::invalid("initial model dimensions do not match data").into());
    }
    if config.patience == 0 {
        return Err(Error::invalid("patience must be >= 1").into());
    }
    if config.max_epochs == 0 {
        return Err(Error::invalid("max epochs must be >= 1").into());
    }

    let k = train.component_count();
    let enc_train = EncodedSet::from_crpset(train);
    let enc_val = EncodedSet::from_crpset(validation);
    let batch_size = config
        .batch_size
        .unwrap_or_else(|| default_batch_size(k, enc_train.len()))
        .clamp(1, enc_train.len());

    let seeds = TrainSeeds {
        init_seed: config.init_seed,
        shuffle_seed: config.shuffle_seed,
    };
    let start = Instant::now();
    let mut model = initial;
    let mut adam = Adam::new(model.weights.len(), config.base_learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut indices: Vec<usize> = (0..enc_train.len()).collect();

    let mut grad = vec![0.0; model.weights.len()];
    let mut scores = vec![0.0; k];
    let mut prefix = vec![0.0; k];
    let mut suffix = vec![0.0; k];

    let mut best_weights = model.weights.clone();
    let mut best_val_loss = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut val_history = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut epochs_run = 0usize;

    let diverged = |epoch: usize,
                    model: &LrModel,
                    best_weights: &[f64],
                    best_val_loss: f64,
                    val_history: &[f64],
                    seeds: TrainSeeds,
                    start: Instant| {
        // carry the last finite state: current weights if finite, else the
        // best snapshot (finite whenever its validation loss was)
        let carried = if all_finite(&model.weights) {
            model.clone()
        } else {
            LrModel {
                n: model.n,
                k: model.k,
                weights: best_weights.to_vec(),
            }
        };
        let report = TrainReport {
            epochs: epoch,
            final_train_loss: f64::NAN,
            final_val_loss: f64::NAN,
            final_train_accuracy: f64::NAN,
            final_val_accuracy: f64::NAN,
            best_val_loss,
            wall_time: start.elapsed(),
            seeds,
            stop: StopReason::Diverged,
            val_loss_history: val_history.to_vec(),
        };
        TrainError::Diverged {
            epoch,
            model: Box::new(carried),
            report: Box::new(report),
        }
    };

    'epochs: for epoch in 1..=config.max_epochs {
        crate::crp::shuffle(&mut indices, &mut shuffle_rng);
        for batch in indices.chunks(batch_size) {
            grad.fill(0.0);
            let loss_sum = accumulate_batch(
                &model.weights,
                &enc_train,
                batch,
                &mut grad,
                &mut scores,
                &mut prefix,
                &mut suffix,
            );
            if !loss_sum.is_finite() || !all_finite(&grad) {
                return Err(diverged(
                    epoch,
                    &model,
                    &best_weights,
                    best_val_loss,
                    &val_history,
                    seeds,
                    start,
                ));
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grad.iter_mut() {
                *g *= scale;
            }
            adam.step(&mut model.weights, &grad);
        }
        epochs_run = epoch;

        let val_loss = mean_loss(&model.weights, &enc_val);
        if !val_loss.is_finite() {
            return Err(diverged(
                epoch,
                &model,
                &best_weights,
                best_val_loss,
                &val_history,
                seeds,
                start,
            ));
        }
        val_history.push(val_loss);
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_weights.copy_from_slice(&model.weights);
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                stop = StopReason::EarlyStop;
                break 'epochs;
            }
        }
        if let Some(budget) = config.wall_clock_budget {
            if start.elapsed() >= budget {
                stop = StopReason::WallClock;
                break 'epochs;
            }
        }
    }

    model.weights.copy_from_slice(&best_weights);
    let report = TrainReport {
        epochs: epochs_run,
        final_train_loss: mean_loss(&model.weights, &enc_train),
        final_val_loss: mean_loss(&model.weights, &enc_val),
        final_train_accuracy: mean_accuracy(&model.weights, &enc_train),
        final_val_accuracy: mean_accuracy(&model.weights, &enc_val),
        best_val_loss,
        wall_time: start.elapsed(),
        seeds,
        stop,
        val_loss_history: val_history,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crp::{ChallengeBatch, Provenance};
    use crate::puf::{transform_challenge, CdcXorPuf, Challenge};
    use rand::RngCore;

    fn challenge(bits: &[u8]) -> Challenge {
        Challenge::new(bits.to_vec()).unwrap()
    }

    fn random_cdc(n: usize, k: usize, rng: &mut ChaCha8Rng) -> CdcChallenge {
        let sub = (0..k)
            .map(|_| challenge(&(0..n).map(|_| (rng.next_u32() & 1) as u8).collect::<Vec<_>>()))
            .collect();
        CdcChallenge::new(sub).unwrap()
    }

    /// Every CdcChallenge of k n-bit sub-challenges, as packed bytes plus
    /// typed form, paired with the PUF response.
    fn enumerate_crpset(puf: &CdcXorPuf) -> CrpSet {
        let n = puf.stage_count();
        let k = puf.component_count();
        let comp_bytes = n.div_ceil(8);
        let total = 1u64 << (n * k);
        let mut bytes = Vec::with_capacity(total as usize * k * comp_bytes);
        let mut responses = Vec::with_capacity(total as usize);
        let mut scratch = vec![0i8; n];
        for v in 0..total {
            let start = bytes.len();
            for l in 0..k {
                let sub = (v >> (l * n)) & ((1 << n) - 1);
                let le = sub.to_le_bytes();
                bytes.extend_from_slice(&le[..comp_bytes]);
            }
            responses.push(puf.eval_packed(&bytes[start..], &mut scratch));
        }
        CrpSet::from_parts(n, k, Provenance::Uniform { seed: 0 }, bytes, responses).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = LrModel::init(64, 3, 5).unwrap();
        let b = LrModel::init(64, 3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.component_count(), 3);
        assert_eq!(a.component(0).len(), 65);
        assert_ne!(a, LrModel::init(64, 3, 6).unwrap());
    }

    #[test]
    fn init_weight_std_matches_chosen_law() {
        // ~10^5 weights at n = 64: sample std within 5% of 1/sqrt(65).
        let model = LrModel::init(64, 1600, 11).unwrap();
        let count = 1600 * 65;
        let mean: f64 = model.weights.iter().sum::<f64>() / count as f64;
        let var: f64 =
            model.weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / count as f64;
        let expected = 1.0 / 65f64.sqrt();
        assert!(
            (var.sqrt() - expected).abs() < 0.05 * expected,
            "std {} vs {}",
            var.sqrt(),
            expected
        );
    }

    #[test]
    fn forward_known_values() {
        // n = 1 components with weights [w0, bias]; c = [0] gives Φ = [1].
        let model =
            LrModel::from_components(vec![vec![2.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let cc = CdcChallenge::broadcast(challenge(&[0]), 2).unwrap();
        let (p, scores) = model.forward(&cc).unwrap();
        assert_eq!(scores, vec![2.0, -1.0]);
        assert!((p - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-15);
        assert!((p - 0.1192).abs() < 1e-4);

        // any zero score annihilates the product
        let model = LrModel::from_components(vec![vec![0.0, 0.0], vec![3.0, 1.0]]).unwrap();
        let (p, _) = model.forward(&cc).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let model = LrModel::init(4, 2, 0).unwrap();
        let cc = CdcChallenge::broadcast(challenge(&[0, 1, 0, 1]), 3).unwrap();
        assert!(model.forward(&cc).is_err());
    }

    /// With the response map 0 ↦ −1, 1 ↦ +1, the product of the true
    /// component deltas satisfies sign(z)·(−1)^(k+1) = class: the k
    /// threshold signs compose through XOR with a parity factor. For odd
    /// k the true-weight model is aligned; for even k the model with one
    /// component negated is. Verified exhaustively.
    #[test]
    fn true_weight_scores_encode_responses_exhaustively() {
        // k = 2, n = 4: all 2^(kn) = 256 challenge tuples.
        let puf = CdcXorPuf::sample(4, 2, 31, 0.0).unwrap();
        let truth =
            LrModel::from_components(puf.components().iter().map(|c| c.weights().to_vec()).collect())
                .unwrap();
        let negated = {
            let mut comps: Vec<Vec<f64>> =
                puf.components().iter().map(|c| c.weights().to_vec()).collect();
            comps[0] = comps[0].iter().map(|w| -w).collect();
            LrModel::from_components(comps).unwrap()
        };
        let set = enumerate_crpset(&puf);
        assert_eq!(set.len(), 256);
        for rec in set.iter() {
            let class = 2.0 * rec.response as f64 - 1.0;
            let (_, scores) = truth.forward(&rec.challenge).unwrap();
            let z: f64 = scores.iter().product();
            assert!(z != 0.0);
            // k = 2 (even): sign flips relative to the class
            assert_eq!(z.signum() * (-1.0), class);
            // one negated component restores alignment
            let (p_neg, _) = negated.forward(&rec.challenge).unwrap();
            assert_eq!((p_neg > 0.5) as u8, rec.response);
        }
        assert_eq!(negated.accuracy(&set).unwrap(), 1.0);

        // k = 3 (odd), n = 3: the true weights align directly.
        let puf = CdcXorPuf::sample(3, 3, 32, 0.0).unwrap();
        let truth =
            LrModel::from_components(puf.components().iter().map(|c| c.weights().to_vec()).collect())
                .unwrap();
        let set = enumerate_crpset(&puf);
        assert_eq!(set.len(), 512);
        assert_eq!(truth.accuracy(&set).unwrap(), 1.0);
    }

    #[test]
    fn gradient_reduces_to_plain_logistic_regression_for_k1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = LrModel::init(6, 1, 7).unwrap();
        for _ in 0..10 {
            let cc = random_cdc(6, 1, &mut rng);
            let r = (rng.next_u32() & 1) as u8;
            let batch = [CrpRecord {
                challenge: cc.clone(),
                response: r,
            }];
            let grad = gradient(&model, &batch).unwrap();
            let (p, _) = model.forward(&cc).unwrap();
            let phi = transform_challenge(&cc.components()[0]);
            let mut expected: Vec<f64> =
                phi.features().iter().map(|f| (p - r as f64) * f).collect();
            expected.push(p - r as f64);
            for (a, b) in grad[0].iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_batch_stationarity() {
        // Two records with the same challenge and opposite responses at
        // p = 0.5: the mean gradient is exactly zero.
        let model = LrModel::from_components(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let cc = CdcChallenge::broadcast(challenge(&[1]), 2).unwrap();
        let batch = [
            CrpRecord { challenge: cc.clone(), response: 0 },
            CrpRecord { challenge: cc, response: 1 },
        ];
        let grad = gradient(&model, &batch).unwrap();
        for block in &grad {
            assert!(block.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Central differences with h = 1e-5 through the forward path only.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for &(n, k) in &[(3usize, 2usize), (5, 3), (8, 4), (4, 1)] {
            let model = LrModel::init(n, k, rng.next_u64()).unwrap();
            let batch: Vec<CrpRecord> = (0..12)
                .map(|_| CrpRecord {
                    challenge: random_cdc(n, k, &mut rng),
                    response: (rng.next_u32() & 1) as u8,
                })
                .collect();
            let analytic = gradient(&model, &batch).unwrap();
            let loss = |m: &LrModel| -> f64 {
                batch
                    .iter()
                    .map(|rec| {
                        let (_, scores) = m.forward(&rec.challenge).unwrap();
                        let z: f64 = scores.iter().product();
                        bce_from_logit(z, rec.response as f64)
                    })
                    .sum::<f64>()
                    / batch.len() as f64
            };
            let h = 1e-5;
            for l in 0..k {
                for i in 0..n + 1 {
                    let mut plus = model.clone();
                    plus.component_mut(l)[i] += h;
                    let mut minus = model.clone();
                    minus.component_mut(l)[i] -= h;
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let a = analytic[l][i];
                    let denom = a.abs().max(numeric.abs()).max(1e-8);
                    let rel = (a - numeric).abs() / denom;
                    // 1e-9 absolute guard: the FD noise floor near zero
                    assert!(
                        rel < 1e-4 || (a - numeric).abs() < 1e-9,
                        "(n={n},k={k}) w[{l}][{i}]: analytic {a} vs numeric {numeric} (rel {rel})"
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_rejects_empty_batch() {
        let model = LrModel::init(4, 2, 0).unwrap();
        assert!(gradient(&model, &[]).is_err());
    }

    #[test]
    fn predictions_are_scale_invariant_and_parity_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let model = LrModel::init(8, 3, 9).unwrap();
        let scaled = {
            let mut m = model.clone();
            for (l, factor) in [(0usize, 3.5f64), (1, 0.25), (2, 12.0)] {
                for w in m.component_mut(l) {
                    *w *= factor;
                }
            }
            m
        };
        let neg_one = {
            let mut m = model.clone();
            for w in m.component_mut(1) {
                *w = -*w;
            }
            m
        };
        let neg_two = {
            let mut m = neg_one.clone();
            for w in m.component_mut(2) {
                *w = -*w;
            }
            m
        };
        for _ in 0..200 {
            let cc = random_cdc(8, 3, &mut rng);
            let base = model.predict(&cc).unwrap();
            assert_eq!(scaled.predict(&cc).unwrap(), base);
            assert_eq!(neg_one.predict(&cc).unwrap(), base ^ 1);
            assert_eq!(neg_two.predict(&cc).unwrap(), base);
        }
    }

    fn tiny_sets(n: usize, k: usize, puf_seed: u64) -> (CrpSet, CrpSet) {
        let puf = CdcXorPuf::sample(n, k, puf_seed, 0.0).unwrap();
        let set = enumerate_crpset(&puf);
        (set.clone(), set)
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, val_set) = tiny_sets(4, 2, 5);
        let mut config = LrTrainConfig::new(1, 2);
        config.max_epochs = 30;
        let (m1, r1) = train(&train_set, &val_set, &config).unwrap();
        let (m2, r2) = train(&train_set, &val_set, &config).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.val_loss_history, r2.val_loss_history);
        assert_eq!(r1.epochs, r2.epochs);
    }

    #[test]
    fn training_memorizes_tiny_realizable_instance() {
        // Full enumeration at n=4, k=2 is realizable by the model class;
        // one seeded run should fit it essentially perfectly.
        let (train_set, val_set) = tiny_sets(4, 2, 5);
        let mut config = LrTrainConfig::new(0, 1);
        config.max_epochs = 2000;
        let (model, report) = train(&train_set, &val_set, &config).unwrap();
        assert!(
            report.final_train_accuracy >= 0.99,
            "train accuracy {}",
            report.final_train_accuracy
        );
        // report consistency: the returned model scores its own train set
        assert_eq!(model.accuracy(&train_set).unwrap(), report.final_train_accuracy);
    }

    #[test]
    fn best_so_far_validation_loss_is_monotone() {
        let (train_set, val_set) = tiny_sets(4, 2, 9);
        let mut config = LrTrainConfig::new(3, 4);
        config.max_epochs = 60;
        let (_, report) = train(&train_set, &val_set, &config).unwrap();
        let mut best = f64::INFINITY;
        let mut bests = Vec::new();
        for &v in &report.val_loss_history {
            best = best.min(v);
            bests.push(best);
        }
        assert!(bests.windows(2).all(|w| w[1] <= w[0]));
        assert!((report.best_val_loss - best).abs() < 1e-15);
    }

    #[test]
    fn untrained_model_scores_chance_level() {
        let puf = CdcXorPuf::sample(16, 2, 3, 0.0).unwrap();
        let batch = ChallengeBatch::uniform(16, 2, 4000, 77).unwrap();
        let set = CrpSet::build(&puf, &batch).unwrap();
        let acc = LrModel::init(16, 2, 123).unwrap().accuracy(&set).unwrap();
        assert!((0.3..0.7).contains(&acc), "untrained accuracy {acc}");
    }

    #[test]
    fn divergence_carries_finite_state() {
        let (train_set, val_set) = tiny_sets(4, 2, 5);
        let mut config = LrTrainConfig::new(0, 1);
        // steps of ~1e200 overflow the two-score product past f64 range
        config.base_learning_rate = 1e200;
        config.max_epochs = 50;
        match train(&train_set, &val_set, &config) {
            Err(TrainError::Diverged { model, report, .. }) => {
                assert!(model.weights.iter().all(|w| w.is_finite()));
                assert_eq!(report.stop, StopReason::Diverged);
                assert!(!report.converged());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_splits_are_rejected() {
        let (train_set, _) = tiny_sets(3, 2, 1);
        let empty = CrpSet::from_parts(3, 2, Provenance::Uniform { seed: 0 }, vec![], vec![])
            .unwrap();
        let config = LrTrainConfig::new(0, 1);
        assert!(matches!(
            train(&empty, &train_set, &config),
            Err(TrainError::Invalid(_))
        ));
        assert!(matches!(
            train(&train_set, &empty, &config),
            Err(TrainError::Invalid(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = LrModel::init(64, 3, 8).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 1 + 2 + 1 + 3 * 65 * 8);
        let back = LrModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(model, back);
        assert!(LrModel::read_from(&buf[..10]).is_err());
    }
}
