//! The neural-network attack: a multilayer perceptron with four tanh
//! hidden layers and a sigmoid output, trained with Adam, BCE loss, a
//! reduce-on-plateau learning rate, and early stopping when validation
//! accuracy reaches a threshold.
//!
//! The input is the concatenation of the per-component parity feature
//! vectors (width k·n; the constant feature is dropped, layer biases
//! absorb it). Hidden widths are k·n, k·n/2, k·n/2, k·n.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attack::{
    all_finite, bce_from_logit, default_batch_size, sigmoid, Adam, StopReason, TrainReport,
    TrainSeeds,
};
use crate::crp::CrpSet;
use crate::error::{Error, Result};
use crate::puf::{fill_parity_features, fill_parity_features_packed, CdcChallenge};

/// Rows per internal processing chunk; bounds activation memory while the
/// configured batch size can be much larger.
const CHUNK_ROWS: usize = 4096;

/// Default weight init standard deviation; keeps tanh pre-activations out
/// of saturation at the layer widths this attack uses.
pub const DEFAULT_INIT_STD: f64 = 0.05;

/// Hidden layer widths for a (stages, components) attack target.
pub fn hidden_widths(n: usize, k: usize) -> [usize; 4] {
    let kn = k * n;
    [kn, kn / 2, kn / 2, kn]
}

/// Concatenated per-component parity features, component order preserved;
/// the MLP input encoding. Length is k·n, every value ±1.
pub fn encode(cc: &CdcChallenge) -> Vec<f64> {
    let n = cc.stage_count();
    let mut out = vec![0.0; cc.component_count() * n];
    let mut buf = vec![0i8; n];
    for (l, c) in cc.components().iter().enumerate() {
        fill_parity_features(c.bits(), &mut buf);
        for (o, &f) in out[l * n..(l + 1) * n].iter_mut().zip(&buf) {
            *o = f as f64;
        }
    }
    out
}

/// The five-layer perceptron. Parameters live in one flat vector, per
/// layer weights (in×out, row-major) followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    n: usize,
    k: usize,
    widths: Vec<usize>, // [in, h1, h2, h3, h4, 1]
    params: Vec<f64>,
}

/// Training schedule of the NN attack.
#[derive(Debug, Clone)]
pub struct NnTrainConfig {
    pub base_learning_rate: f64,
    /// `None` uses the 10^(k−1) rule (floored at 32, clamped to the
    /// training-set size).
    pub batch_size: Option<usize>,
    /// Stop as soon as validation accuracy reaches this value.
    pub early_stop_val_accuracy: f64,
    pub max_epochs: usize,
    /// Learning-rate multiplier applied when validation loss stalls for
    /// `plateau_patience` consecutive epochs.
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Weight init scale; see [`DEFAULT_INIT_STD`].
    pub init_std: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub wall_clock_budget: Option<Duration>,
}

impl NnTrainConfig {
    pub fn new(init_seed: u64, shuffle_seed: u64) -> Self {
        Self {
            base_learning_rate: 0.001,
            batch_size: None,
            early_stop_val_accuracy: 0.98,
            max_epochs: 300,
            plateau_factor: 0.5,
            plateau_patience: 3,
            init_std: DEFAULT_INIT_STD,
            init_seed,
            shuffle_seed,
            wall_clock_budget: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.early_stop_val_accuracy > 0.5 && self.early_stop_val_accuracy <= 1.0) {
            return Err(Error::invalid(
                "early-stop validation accuracy must be in (0.5, 1]",
            ));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::invalid("plateau factor must be in (0, 1]"));
        }
        if self.plateau_patience == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("plateau patience and max epochs must be >= 1"));
        }
        Ok(())
    }
}

impl MlpModel {
    /// Weights i.i.d. N(0, 0.05), biases zero, deterministic under the
    /// seed. Requires k·n ≥ 2 so the halved hidden widths are nonzero.
    pub fn init(n: usize, k: usize, seed: u64) -> Result<Self> {
        Self::init_with_std(n, k, seed, DEFAULT_INIT_STD)
    }

    /// Init with an explicit weight standard deviation. Tiny inputs (small
    /// k·n) need a larger scale than the default to push the tanh layers
    /// out of their linear regime.
    pub fn init_with_std(n: usize, k: usize, seed: u64, init_std: f64) -> Result<Self> {
        if n == 0 || k == 0 || k * n < 2 {
            return Err(Error::invalid("input width k*n must be >= 2"));
        }
        if !(init_std > 0.0 && init_std.is_finite()) {
            return Err(Error::invalid("init std must be positive and finite"));
        }
        let h = hidden_widths(n, k);
        let widths = vec![k * n, h[0], h[1], h[2], h[3], 1];
        let param_count: usize = (0..5).map(|l| widths[l] * widths[l + 1] + widths[l + 1]).sum();
        let mut params = vec![0.0; param_count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for l in 0..5 {
            let w_len = widths[l] * widths[l + 1];
            for p in &mut params[offset..offset + w_len] {
                let w: f64 = StandardNormal.sample(&mut rng);
                *p = init_std * w;
            }
            offset += w_len + widths[l + 1]; // biases stay zero
        }
        Ok(Self {
            n,
            k,
            widths,
            params,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.n
    }

    pub fn component_count(&self) -> usize {
        self.k
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut offset = 0;
        for m in 0..l {
            offset += self.widths[m] * self.widths[m + 1] + self.widths[m + 1];
        }
        let w_len = self.widths[l] * self.widths[l + 1];
        (offset, w_len, offset + w_len, self.widths[l + 1])
    }

    fn weight_view<'a>(params: &'a [f64], widths: &[usize], l: usize) -> ArrayView2<'a, f64> {
        let mut offset = 0;
        for m in 0..l {
            offset += widths[m] * widths[m + 1] + widths[m + 1];
        }
        let w_len = widths[l] * widths[l + 1];
        ArrayView2::from_shape((widths[l], widths[l + 1]), &params[offset..offset + w_len])
            .expect("parameter layout is consistent")
    }

    fn bias_slice<'a>(params: &'a [f64], widths: &[usize], l: usize) -> &'a [f64] {
        let mut offset = 0;
        for m in 0..l {
            offset += widths[m] * widths[m + 1] + widths[m + 1];
        }
        let w_len = widths[l] * widths[l + 1];
        &params[offset + w_len..offset + w_len + widths[l + 1]]
    }

    /// Forward pass over a chunk of rows. Returns the activations of every
    /// layer (index 0 is the input) and the output logits.
    fn forward_chunk(&self, x: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Array1<f64>) {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(5);
        acts.push(x.to_owned());
        for l in 0..4 {
            let w = Self::weight_view(&self.params, &self.widths, l);
            let b = Self::bias_slice(&self.params, &self.widths, l);
            let mut z = acts[l].dot(&w);
            add_bias(&mut z, b);
            z.mapv_inplace(f64::tanh);
            acts.push(z);
        }
        let w = Self::weight_view(&self.params, &self.widths, 4);
        let b = Self::bias_slice(&self.params, &self.widths, 4);
        let mut z = acts[4].dot(&w);
        add_bias(&mut z, b);
        let logits = z.index_axis_move(Axis(1), 0);
        (acts, logits)
    }

    /// Probability that the response is 1, for one encoded input row.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.input_width() {
            return Err(Error::invalid(format!(
                "input width {} does not match model width {}",
                input.len(),
                self.input_width()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input)
            .expect("shape matches length");
        let (_, logits) = self.forward_chunk(x);
        Ok(sigmoid(logits[0]))
    }

    pub fn predict(&self, cc: &CdcChallenge) -> Result<u8> {
        if cc.component_count() != self.k || cc.stage_count() != self.n {
            return Err(Error::invalid("challenge dimensions do not match model"));
        }
        let p = self.forward(&encode(cc))?;
        Ok((p > 0.5) as u8)
    }

    /// Backward pass for a chunk: accumulates parameter gradients scaled
    /// by `scale` into `grad` and returns the summed chunk loss.
    fn backward_chunk(
        &self,
        acts: &[Array2<f64>],
        logits: &Array1<f64>,
        targets: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let rows = logits.len();
        let mut loss = 0.0;
        let mut dz = Array2::zeros((rows, 1));
        for i in 0..rows {
            let z = logits[i];
            loss += bce_from_logit(z, targets[i]);
            dz[(i, 0)] = (sigmoid(z) - targets[i]) * scale;
        }
        for l in (0..5).rev() {
            let (w_off, w_len, b_off, b_len) = self.layer_offsets(l);
            {
                let mut gw = ndarray::ArrayViewMut2::from_shape(
                    (self.widths[l], self.widths[l + 1]),
                    &mut grad[w_off..w_off + w_len],
                )
                .expect("gradient layout matches parameters");
                general_mat_mul(1.0, &acts[l].t(), &dz, 1.0, &mut gw);
            }
            let db = dz.sum_axis(Axis(0));
            for (g, d) in grad[b_off..b_off + b_len].iter_mut().zip(db.iter()) {
                *g += d;
            }
            if l > 0 {
                let w = Self::weight_view(&self.params, &self.widths, l);
                let mut da = dz.dot(&w.t());
                // tanh'(z) = 1 - a^2
                da.zip_mut_with(&acts[l], |d, &a| *d *= 1.0 - a * a);
                dz = da;
            }
        }
        loss
    }

    /// Mean accuracy over a CRP set: predicted response is 1 iff p > 0.5.
    pub fn accuracy(&self, set: &CrpSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::invalid("cannot score an empty CRP set"));
        }
        if set.component_count() != self.k || set.stage_count() != self.n {
            return Err(Error::invalid("CRP set dimensions do not match model"));
        }
        let indices: Vec<usize> = (0..set.len()).collect();
        let mut x = Array2::zeros((CHUNK_ROWS.min(set.len()), self.input_width()));
        let mut y = vec![0.0; CHUNK_ROWS.min(set.len())];
        let mut scratch = vec![0i8; self.n];
        let mut hits = 0usize;
        for chunk in indices.chunks(CHUNK_ROWS) {
            encode_rows(set, chunk, &mut x, &mut y, &mut scratch);
            let (_, logits) = self.forward_chunk(x.slice(ndarray::s![..chunk.len(), ..]));
            for i in 0..chunk.len() {
                let predicted = (logits[i] > 0.0) as u8 as f64;
                hits += (predicted == y[i]) as usize;
            }
        }
        Ok(hits as f64 / set.len() as f64)
    }

    /// Checkpoint: "NNCK" magic, version, (n, k) header, the width chain,
    /// then per layer the row-major weight tensor and the bias, all
    /// little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.n > u16::MAX as usize || self.k > u8::MAX as usize {
            return Err(Error::invalid("model dimensions exceed format limits"));
        }
        w.write_all(b"NNCK")?;
        w.write_all(&[1u8])?;
        w.write_all(&(self.n as u16).to_le_bytes())?;
        w.write_all(&[self.k as u8])?;
        w.write_all(&[self.widths.len() as u8])?;
        for &width in &self.widths {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        use crate::puf::read_exact_at;
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact_at(&mut r, &mut magic, &mut offset)?;
        if &magic != b"NNCK" {
            return Err(Error::format(0, "bad magic, expected \"NNCK\""));
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
        read_exact_at(&mut r, &mut byte, &mut offset)?;
        let width_count = byte[0] as usize;
        if width_count != 6 {
            return Err(Error::format(8, "expected a 6-entry width chain"));
        }
        let mut widths = Vec::with_capacity(6);
        let mut four = [0u8; 4];
        for _ in 0..6 {
            read_exact_at(&mut r, &mut four, &mut offset)?;
            widths.push(u32::from_le_bytes(four) as usize);
        }
        let h = hidden_widths(n, k);
        if n == 0 || k == 0 || widths != vec![k * n, h[0], h[1], h[2], h[3], 1] {
            return Err(Error::format(9, "width chain does not match (n, k)"));
        }
        let param_count: usize = (0..5).map(|l| widths[l] * widths[l + 1] + widths[l + 1]).sum();
        let mut params = Vec::with_capacity(param_count);
        let mut f = [0u8; 8];
        for _ in 0..param_count {
            read_exact_at(&mut r, &mut f, &mut offset)?;
            params.push(f64::from_le_bytes(f));
        }
        Ok(Self {
            n,
            k,
            widths,
            params,
        })
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

fn add_bias(z: &mut Array2<f64>, bias: &[f64]) {
    for mut row in z.rows_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Mean BCE gradients over an encoded batch, flat in the model's
/// parameter layout. The inputs are arbitrary real vectors of the model's
/// input width.
pub fn gradient(model: &MlpModel, inputs: &[Vec<f64>], targets: &[f64]) -> Result<Vec<f64>> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::invalid("batch must be nonempty with matching targets"));
    }
    let width = model.input_width();
    if inputs.iter().any(|i| i.len() != width) {
        return Err(Error::invalid("input width does not match model"));
    }
    let mut x = Array2::zeros((inputs.len(), width));
    for (i, input) in inputs.iter().enumerate() {
        x.row_mut(i)
            .as_slice_mut()
            .expect("row of a C-order array is contiguous")
            .copy_from_slice(input);
    }
    let mut grad = vec![0.0; model.params.len()];
    let (acts, logits) = model.forward_chunk(x.view());
    model.backward_chunk(&acts, &logits, targets, 1.0 / inputs.len() as f64, &mut grad);
    Ok(grad)
}

/// Writes the encoded features and targets of the selected records into
/// the first `indices.len()` rows of `x` / entries of `y`.
fn encode_rows(
    set: &CrpSet,
    indices: &[usize],
    x: &mut Array2<f64>,
    y: &mut [f64],
    scratch: &mut [i8],
) {
    let n = set.stage_count();
    let k = set.component_count();
    let comp_bytes = n.div_ceil(8);
    for (row, &idx) in indices.iter().enumerate() {
        let record = set.record_challenge_bytes(idx);
        let row_slice = x
            .row_mut(row)
            .into_slice()
            .expect("row of a C-order array is contiguous");
        for l in 0..k {
            fill_parity_features_packed(&record[l * comp_bytes..(l + 1) * comp_bytes], n, scratch);
            for (o, &f) in row_slice[l * n..(l + 1) * n].iter_mut().zip(scratch.iter()) {
                *o = f as f64;
            }
        }
        y[row] = set.response(idx) as f64;
    }
}

struct ValData {
    x: Array2<f64>,
    y: Vec<f64>,
}

fn eval_set(model: &MlpModel, data: &ValData) -> (f64, f64) {
    let rows = data.y.len();
    let mut loss = 0.0;
    let mut hits = 0usize;
    let mut start = 0;
    while start < rows {
        let end = (start + CHUNK_ROWS).min(rows);
        let (_, logits) = model.forward_chunk(data.x.slice(ndarray::s![start..end, ..]));
        for (i, &z) in logits.iter().enumerate() {
            let y = data.y[start + i];
            loss += bce_from_logit(z, y);
            hits += (((z > 0.0) as u8 as f64) == y) as usize;
        }
        start = end;
    }
    (loss / rows as f64, hits as f64 / rows as f64)
}

/// Trains the MLP: mini-batch Adam from the base rate, the rate halved
/// (by `plateau_factor`) whenever validation loss stalls for
/// `plateau_patience` epochs, stopping at the validation-accuracy
/// threshold, the epoch cap, or the wall-clock budget. Returns the model
/// at the accuracy stop, otherwise the best-validation-loss model. A
/// non-finite loss ends the run with a non-converged report instead of an
/// error.
pub fn train(
    train: &CrpSet,
    validation: &CrpSet,
    config: &NnTrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    if train.stage_count() != validation.stage_count()
        || train.component_count() != validation.component_count()
    {
        return Err(Error::invalid("train/validation dimensions differ"));
    }

    let n = train.stage_count();
    let k = train.component_count();
    let start = Instant::now();
    let seeds = TrainSeeds {
        init_seed: config.init_seed,
        shuffle_seed: config.shuffle_seed,
    };
    let mut model = MlpModel::init_with_std(n, k, config.init_seed, config.init_std)?;
    let batch_size = config
        .batch_size
        .unwrap_or_else(|| default_batch_size(k, train.len()))
        .clamp(1, train.len());
    let mut adam = Adam::new(model.params.len(), config.base_learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut indices: Vec<usize> = (0..train.len()).collect();

    let in_width = model.input_width();
    let mut scratch = vec![0i8; n];
    let val_data = {
        let idx: Vec<usize> = (0..validation.len()).collect();
        let mut x = Array2::zeros((validation.len(), in_width));
        let mut y = vec![0.0; validation.len()];
        encode_rows(validation, &idx, &mut x, &mut y, &mut scratch);
        ValData { x, y }
    };

    let chunk_cap = CHUNK_ROWS.min(batch_size);
    let mut x = Array2::zeros((chunk_cap, in_width));
    let mut y = vec![0.0; chunk_cap];
    let mut grad = vec![0.0; model.params.len()];

    let mut best_params = model.params.clone();
    let mut best_val_loss = f64::INFINITY;
    let mut stalled = 0usize;
    let mut val_history = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut epochs_run = 0usize;
    let mut use_best = true;

    'epochs: for epoch in 1..=config.max_epochs {
        crate::crp::shuffle(&mut indices, &mut shuffle_rng);
        for batch in indices.chunks(batch_size) {
            grad.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for chunk in batch.chunks(chunk_cap) {
                encode_rows(train, chunk, &mut x, &mut y, &mut scratch);
                let (acts, logits) =
                    model.forward_chunk(x.slice(ndarray::s![..chunk.len(), ..]));
                batch_loss +=
                    model.backward_chunk(&acts, &logits, &y[..chunk.len()], scale, &mut grad);
            }
            if !batch_loss.is_finite() || !all_finite(&grad) {
                stop = StopReason::Diverged;
                epochs_run = epoch;
                break 'epochs;
            }
            adam.step(&mut model.params, &grad);
        }
        epochs_run = epoch;

        let (val_loss, val_acc) = eval_set(&model, &val_data);
        if !val_loss.is_finite() {
            stop = StopReason::Diverged;
            break 'epochs;
        }
        val_history.push(val_loss);
        if val_acc >= config.early_stop_val_accuracy {
            stop = StopReason::ValAccuracyReached;
            use_best = false; // the current model reached the threshold
            break 'epochs;
        }
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_params.copy_from_slice(&model.params);
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= config.plateau_patience {
                adam.set_learning_rate(adam.learning_rate() * config.plateau_factor);
                stalled = 0;
            }
        }
        if let Some(budget) = config.wall_clock_budget {
            if start.elapsed() >= budget {
                stop = StopReason::WallClock;
                break 'epochs;
            }
        }
    }

    if stop == StopReason::Diverged {
        if !all_finite(&model.params) {
            model.params.copy_from_slice(&best_params);
        }
        let report = TrainReport {
            epochs: epochs_run,
            final_train_loss: f64::NAN,
            final_val_loss: f64::NAN,
            final_train_accuracy: f64::NAN,
            final_val_accuracy: f64::NAN,
            best_val_loss,
            wall_time: start.elapsed(),
            seeds,
            stop,
            val_loss_history: val_history,
        };
        return Ok((model, report));
    }

    if use_best && best_val_loss.is_finite() {
        model.params.copy_from_slice(&best_params);
    }
    let (final_val_loss, final_val_acc) = eval_set(&model, &val_data);
    let train_data = {
        let idx: Vec<usize> = (0..train.len()).collect();
        let mut x = Array2::zeros((train.len(), in_width));
        let mut y = vec![0.0; train.len()];
        encode_rows(train, &idx, &mut x, &mut y, &mut scratch);
        ValData { x, y }
    };
    let (final_train_loss, final_train_acc) = eval_set(&model, &train_data);
    let report = TrainReport {
        epochs: epochs_run,
        final_train_loss,
        final_val_loss,
        final_train_accuracy: final_train_acc,
        final_val_accuracy: final_val_acc,
        best_val_loss,
        wall_time: start.elapsed(),
        seeds,
        stop,
        val_loss_history: val_history,
    };
    Ok((model, report))
}
