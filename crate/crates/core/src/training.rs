//! Normalization, losses, metrics, the optimizer and the training loop.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{make_windows, SeriesDataset, WindowSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{collect_outputs, decode, encode, GraphContext, ModelConfig, ModelParams};
use crate::params::ParamSet;
use crate::tape::{Matrix, Tape, Var};

/// Global z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    /// Population mean and standard deviation over every entry; a constant
    /// input gets `std = 1`.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for &v in values {
            n += 1;
            sum += v;
            sq += v * v;
        }
        if n == 0 {
            return Err(Error::Data("cannot fit a scaler to empty data".into()));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        let std = if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply_array<D: ndarray::Dimension>(&self, x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
        x.mapv(|v| self.apply(v))
    }

    pub fn invert_array<D: ndarray::Dimension>(&self, z: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
        z.mapv(|v| self.invert(v))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

pub fn metrics(pred: &[f64], target: &[f64]) -> Result<Metrics> {
    if pred.len() != target.len() {
        return Err(Error::Contract(format!(
            "prediction length {} differs from target length {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("metrics of empty vectors".into()));
    }
    let n = pred.len() as f64;
    let (abs, sq) = pred
        .iter()
        .zip(target)
        .fold((0.0, 0.0), |(a, s), (p, t)| (a + (p - t).abs(), s + (p - t).powi(2)));
    let mse = sq / n;
    Ok(Metrics {
        mae: abs / n,
        mse,
        rmse: mse.sqrt(),
    })
}

/// Mean squared error over every entry of every step.
pub fn mse_loss(tape: &mut Tape, preds: &[Var], target: &Array3<f64>) -> Result<Var> {
    if preds.len() != target.dim().0 {
        return Err(Error::shape(
            "mse_loss",
            (preds.len(), 0),
            (target.dim().0, 0),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Contract("loss over an empty horizon".into()));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (k, &p) in preds.iter().enumerate() {
        let t = target.index_axis(ndarray::Axis(0), k).to_owned();
        if tape.shape(p) != t.dim() {
            return Err(Error::shape("mse_loss", tape.shape(p), t.dim()));
        }
        count += t.len();
        let tv = tape.constant(t);
        let d = tape.sub(p, tv)?;
        let sq = tape.hadamard(d, d)?;
        let s = tape.sum_all(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.expect("nonempty"), 1.0 / count as f64))
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .values()
            .iter()
            .map(|p| Array2::zeros(p.dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected update. Parameters are left untouched if any gradient
/// is not finite.
pub fn adam_step(params: &mut ParamSet, grads: &[Matrix], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.dim() != params.values()[i].dim() {
            return Err(Error::shape("adam_step", g.dim(), params.values()[i].dim()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {}",
                params.names()[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);
    for ((p, g), (m, v)) in params
        .values_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Chronological train/validation/test ranges over time steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl TimeSplit {
    pub fn new(steps: usize, fractions: (f64, f64, f64)) -> Result<Self> {
        let (a, b, c) = fractions;
        if a <= 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "split fractions {fractions:?} must be nonnegative, train positive, summing to 1"
            )));
        }
        let train_end = (steps as f64 * a).round() as usize;
        let val_end = (steps as f64 * (a + b)).round() as usize;
        Ok(Self {
            train: 0..train_end,
            val: train_end..val_end.min(steps),
            test: val_end.min(steps)..steps,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub split: (f64, f64, f64),
    pub stride: usize,
    /// Epochs over which the teacher-forcing ratio decays linearly from 1 to 0.
    pub teacher_decay_epochs: usize,
    /// Worker threads for per-sample gradients; 0 uses the global pool.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            patience: 10,
            split: (0.7, 0.1, 0.2),
            stride: 1,
            teacher_decay_epochs: 10,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn teacher_ratio(&self, epoch: usize) -> f64 {
        if self.teacher_decay_epochs == 0 {
            return 0.0;
        }
        (1.0 - epoch as f64 / self.teacher_decay_epochs as f64).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
    pub seconds: f64,
    pub peak_mem_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mae,val_mse,val_rmse,seconds,peak_mem_bytes\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3},{}",
                r.epoch, r.train_loss, r.val.mae, r.val.mse, r.val.rmse, r.seconds, r.peak_mem_bytes
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// Record with the lowest validation MSE (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val.mse <= r.val.mse => Some(b),
                _ => Some(r),
            })
    }
}

/// Peak resident set size of this process, when the platform reports it.
pub fn peak_rss_bytes() -> u64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("VmHWM:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|kb| kb.parse::<u64>().ok())
        })
        .map_or(0, |kb| kb * 1024)
}

/// Windows of each split, z-scored with statistics of the training range.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub scaler: Scaler,
    pub split: TimeSplit,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl PreparedData {
    pub fn new(
        ds: &SeriesDataset,
        config: &ModelConfig,
        split: (f64, f64, f64),
        stride: usize,
    ) -> Result<Self> {
        let split = TimeSplit::new(ds.steps(), split)?;
        let train_part = ds.slice(split.train.clone());
        let scaler = Scaler::fit(train_part.values.iter())?;
        let windows = |range: &Range<usize>| -> Result<Vec<WindowSample>> {
            if range.len() < config.t_in + config.t_out {
                return Ok(Vec::new());
            }
            let mut w = make_windows(&ds.slice(range.clone()), config.t_in, config.t_out, stride)?;
            for s in &mut w {
                s.x = scaler.apply_array(&s.x);
                s.y = scaler.apply_array(&s.y);
                s.t0 += range.start;
            }
            Ok(w)
        };
        let train = windows(&split.train)?;
        if train.is_empty() {
            return Err(Error::Data("training range too short for one window".into()));
        }
        Ok(Self {
            scaler,
            val: windows(&split.val)?,
            test: windows(&split.test)?,
            train,
            split,
        })
    }
}

/// Loss and parameter gradients of one window.
pub fn sample_gradients(
    params: &ModelParams,
    ctx: &GraphContext,
    sample: &WindowSample,
    teacher_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = params.tape();
    let state = encode(&mut tape, params, ctx, &sample.x)?;
    let t_out = sample.y.dim().0;
    let teacher = (teacher_ratio > 0.0).then_some(&sample.y);
    let dec = decode(&mut tape, params, &state, t_out, teacher, teacher_ratio, rng)?;
    let loss = mse_loss(&mut tape, &dec.outputs, &sample.y)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss diverged at window t0 = {}", sample.t0)));
    }
    tape.backward(loss)?;
    Ok((value, tape.leading_grads(params.set.len())))
}

/// Normalized-space forecasts for every window, in order.
pub fn predict_windows(
    params: &ModelParams,
    ctx: &GraphContext,
    windows: &[WindowSample],
) -> Result<Vec<Array3<f64>>> {
    windows
        .par_iter()
        .map(|w| {
            let mut tape = params.tape();
            let state = encode(&mut tape, params, ctx, &w.x)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let dec = decode(&mut tape, params, &state, w.y.dim().0, None, 0.0, &mut rng)?;
            Ok(collect_outputs(&tape, &dec.outputs))
        })
        .collect()
}

/// Metrics on the original scale over all windows and horizon steps.
pub fn evaluate_windows(
    params: &ModelParams,
    ctx: &GraphContext,
    windows: &[WindowSample],
    scaler: &Scaler,
) -> Result<Metrics> {
    let preds = predict_windows(params, ctx, windows)?;
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (pred, w) in preds.iter().zip(windows) {
        p.extend(pred.iter().map(|&v| scaler.invert(v)));
        t.extend(w.y.iter().map(|&v| scaler.invert(v)));
    }
    metrics(&p, &t)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation MSE.
    pub params: ModelParams,
    pub history: TrainHistory,
    pub scaler: Scaler,
    pub best_epoch: usize,
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Mini-batch training with scheduled sampling and early stopping on the
/// validation MSE.
pub fn train_loop(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    ds: &SeriesDataset,
    graph: &Graph,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_cfg.batch_size == 0 || train_cfg.max_epochs == 0 {
        return Err(Error::Parameter("batch_size and max_epochs must be positive".into()));
    }
    if graph.len() != ds.nodes() || config.nodes != ds.nodes() {
        return Err(Error::Contract(format!(
            "graph has {} nodes, series {}, config {}",
            graph.len(),
            ds.nodes(),
            config.nodes
        )));
    }
    let data = PreparedData::new(ds, config, train_cfg.split, train_cfg.stride)?;
    let ctx = GraphContext::new(graph.clone());
    let eval_set = if data.val.is_empty() { &data.train } else { &data.val };

    let pool = if train_cfg.threads > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(train_cfg.threads)
                .build()
                .map_err(|e| Error::Parameter(e.to_string()))?,
        )
    } else {
        None
    };
    let body = || -> Result<TrainOutcome> {
        let mut params = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut optim = OptimState::new(&params.set, train_cfg.lr);
        let mut history = TrainHistory::default();
        let mut best: Option<(f64, ParamSet, usize)> = None;
        let mut since_best = 0;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        for epoch in 0..train_cfg.max_epochs {
            let started = Instant::now();
            let ratio = train_cfg.teacher_ratio(epoch);
            let mut shuffle_rng = sample_rng(seed, epoch, usize::MAX >> 32);
            order.shuffle(&mut shuffle_rng);

            let mut loss_sum = 0.0;
            for batch in order.chunks(train_cfg.batch_size) {
                let results: Vec<Result<(f64, Vec<Matrix>)>> = batch
                    .par_iter()
                    .map(|&i| {
                        let mut rng = sample_rng(seed, epoch, i);
                        sample_gradients(&params, &ctx, &data.train[i], ratio, &mut rng)
                    })
                    .collect();
                let mut grads: Option<Vec<Matrix>> = None;
                for r in results {
                    let (loss, g) = r?;
                    loss_sum += loss;
                    match &mut grads {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => grads = Some(g),
                    }
                }
                let mut grads = grads.expect("nonempty batch");
                let scale = 1.0 / batch.len() as f64;
                grads.iter_mut().for_each(|g| *g *= scale);
                adam_step(&mut params.set, &grads, &mut optim)?;
            }
            let train_loss = loss_sum / data.train.len() as f64;
            if !train_loss.is_finite() {
                return Err(Error::Numeric(format!("training loss diverged in epoch {epoch}")));
            }
            let val = evaluate_windows(&params, &ctx, eval_set, &data.scaler)?;
            history.records.push(EpochRecord {
                epoch,
                train_loss,
                val,
                seconds: started.elapsed().as_secs_f64(),
                peak_mem_bytes: peak_rss_bytes(),
            });
            if best.as_ref().is_none_or(|(mse, ..)| val.mse < *mse) {
                best = Some((val.mse, params.set.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= train_cfg.patience {
                    break;
                }
            }
        }
        let (_, best_set, best_epoch) = best.expect("at least one epoch");
        Ok(TrainOutcome {
            params: params.with_values(&best_set)?,
            history,
            scaler: data.scaler,
            best_epoch,
        })
    };
    match &pool {
        Some(p) => p.install(body),
        None => body(),
    }
}
