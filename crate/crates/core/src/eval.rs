//! Baselines, evaluation reports, cost estimates, pooling sweeps, cluster
//! inspection and benchmarks.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ring_of_cliques, SeriesDataset, WindowSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{decode, encode, GraphContext, ModelConfig, ModelParams, Pooling, STATIC_STATS};
use crate::tape::Matrix;
use crate::training::{metrics, mse_loss, predict_windows, train_loop, Metrics, Scaler, TrainConfig, TrainHistory};

/// One day of five-minute steps.
pub const DEFAULT_PERIOD: usize = 288;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-node mean of every step-of-period over `train` (`T × N`), whose row
/// `i` is absolute step `i`.
pub fn ha_profile(train: &Matrix, period: usize) -> Result<Matrix> {
    let (t, n) = train.dim();
    if t == 0 || n == 0 {
        return Err(Error::Data("historical average needs a nonempty training series".into()));
    }
    if period == 0 || period > t {
        return Err(Error::Data(format!(
            "period {period} must be between 1 and the {t} training steps"
        )));
    }
    let mut sums = Array2::<f64>::zeros((period, n));
    let mut counts = vec![0usize; period];
    for (i, row) in train.rows().into_iter().enumerate() {
        let mut acc = sums.row_mut(i % period);
        acc += &row;
        counts[i % period] += 1;
    }
    for (mut row, &c) in sums.rows_mut().into_iter().zip(&counts) {
        row /= c as f64;
    }
    Ok(sums)
}

/// Historical-average forecasts for the target steps of each window.
pub fn ha_baseline(train: &Matrix, windows: &[WindowSample], period: usize) -> Result<Vec<Array3<f64>>> {
    let profile = ha_profile(train, period)?;
    let n = train.ncols();
    windows
        .iter()
        .map(|w| {
            let (t_in, wn, f) = w.x.dim();
            if wn != n || f != 1 {
                return Err(Error::shape("ha_baseline", (wn, f), (n, 1)));
            }
            let t_out = w.y.dim().0;
            Ok(Array3::from_shape_fn((t_out, n, 1), |(k, i, _)| {
                profile[[(w.t0 + t_in + k) % period, i]]
            }))
        })
        .collect()
}

/// Source of forecasts for [`evaluate`].
pub enum Forecaster<'a> {
    /// A trained network with the scaler it was trained under.
    Model {
        params: &'a ModelParams,
        ctx: &'a GraphContext,
        scaler: Scaler,
    },
    /// Historical average over an original-scale training series.
    HistoricalAverage { train: &'a Matrix, period: usize },
    /// Returns the targets themselves.
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub overall: Metrics,
    /// Metrics of each horizon step, first step first.
    pub per_horizon: Vec<Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub horizon: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(dataset: impl Into<String>, horizon: usize) -> Self {
        Self {
            dataset: dataset.into(),
            horizon,
            rows: Vec::new(),
        }
    }

    pub fn row(&self, name: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// One line per model for all steps, then one per model and step.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,model,horizon,mae,mse,rmse\n");
        for r in &self.rows {
            let m = r.overall;
            let _ = writeln!(s, "{},{},all,{},{},{}", self.dataset, r.name, m.mae, m.mse, m.rmse);
        }
        for r in &self.rows {
            for (k, m) in r.per_horizon.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{},{}", self.dataset, r.name, k + 1, m.mae, m.mse, m.rmse);
            }
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_csv())
    }
}

/// Scores a forecaster on z-scored windows; every metric is computed after
/// inverting `scaler`.
pub fn evaluate(
    name: &str,
    forecaster: &Forecaster<'_>,
    windows: &[WindowSample],
    scaler: &Scaler,
) -> Result<EvalRow> {
    let Some(first) = windows.first() else {
        return Err(Error::Contract("no windows to evaluate".into()));
    };
    let targets: Vec<Array3<f64>> = windows.iter().map(|w| scaler.invert_array(&w.y)).collect();
    let preds: Vec<Array3<f64>> = match forecaster {
        Forecaster::Model { params, ctx, scaler: own } => {
            if own != scaler {
                return Err(Error::Contract(format!(
                    "model was trained with scaler {own:?}, evaluation uses {scaler:?}"
                )));
            }
            predict_windows(params, ctx, windows)?
                .iter()
                .map(|p| scaler.invert_array(p))
                .collect()
        }
        Forecaster::HistoricalAverage { train, period } => ha_baseline(train, windows, *period)?,
        Forecaster::Oracle => targets.clone(),
    };
    let t_out = first.y.dim().0;
    let flat = |v: &[Array3<f64>]| v.iter().flat_map(|a| a.iter().copied()).collect::<Vec<_>>();
    let overall = metrics(&flat(&preds), &flat(&targets))?;
    let per_horizon = (0..t_out)
        .map(|k| {
            let step = |v: &[Array3<f64>]| {
                v.iter()
                    .flat_map(|a| a.index_axis(Axis(0), k).iter().copied().collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            };
            metrics(&step(&preds), &step(&targets))
        })
        .collect::<Result<_>>()?;
    Ok(EvalRow {
        name: name.to_string(),
        overall,
        per_horizon,
    })
}

/// Arithmetic cost of the network, counted exactly as the tape records it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostEstimate {
    /// Multiply-accumulates of one recurrent step: an encoder step plus a
    /// decoder step fed by its own forecast.
    pub mac_count: u64,
    /// Multiply-accumulates of building the pooling hierarchy, once per
    /// forward pass.
    pub hierarchy_macs: u64,
    /// Multiply-accumulates of a full forward pass over one window.
    pub window_macs: u64,
    /// Floats of every intermediate retained for the backward sweep of one
    /// window, which is the largest footprint the forward pass reaches.
    pub peak_activation_floats: u64,
}

#[derive(Clone, Copy, Default)]
struct Cost {
    macs: u64,
    floats: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Self) {
        self.macs += o.macs;
        self.floats += o.floats;
    }
}

impl std::ops::Mul<u64> for Cost {
    type Output = Cost;
    fn mul(self, k: u64) -> Cost {
        Cost {
            macs: self.macs * k,
            floats: self.floats * k,
        }
    }
}

fn cost(macs: usize, floats: usize) -> Cost {
    Cost {
        macs: macs as u64,
        floats: floats as u64,
    }
}

/// Chebyshev convolution at `n` nodes from width `f` to `h`.
fn conv_cost(n: usize, f: usize, h: usize, k: usize) -> Cost {
    let products = k - 1;
    let recursions = k.saturating_sub(2);
    let concat = n * f * (k * (k + 1) / 2 - 1);
    cost(
        products * n * n * f + n * k * f * h,
        products * n * f + recursions * 2 * n * f + concat + n * h,
    )
}

/// Gated recurrent update at `n` nodes with input width `w`.
fn gru_cost(n: usize, w: usize, h: usize) -> Cost {
    cost(3 * n * (h + w) * h, 2 * n * (h + w) + 17 * n * h)
}

/// Assignment `softmax(relu(A X W))` from `n` nodes of width `c` to `m`
/// clusters, then `Pᵀ A P` and its normalized Laplacian.
fn level_cost(n: usize, c: usize, m: usize) -> Cost {
    cost(n * n * c + n * c * m + n * n * m + m * n * m, n * c + 2 * n * m + 2 * m * m)
}

pub fn flop_estimate(config: &ModelConfig) -> Result<CostEstimate> {
    config.validate()?;
    let c = config;
    let (n, h, k, f, fo) = (c.nodes, c.hidden, c.cheb_k, c.f_in, c.f_out);
    let (m1, m2) = c.level_sizes();
    let pooled = c.is_pooled();
    let pool = |rows: usize, width: usize, from: usize| {
        if pooled {
            cost(rows * from * width, rows * width)
        } else {
            Cost::default()
        }
    };

    let mut hierarchy = Cost::default();
    if pooled {
        let e = c.embed_width;
        hierarchy += cost(0, n * (STATIC_STATS + e));
        hierarchy += level_cost(n, STATIC_STATS + e, m1);
        hierarchy += level_cost(m1, e, m2);
    }

    let mut enc = conv_cost(n, f, h, k);
    enc += pool(m1, h, n);
    enc += gru_cost(m1, h, h);
    enc += conv_cost(m1, h, h, k);
    enc += pool(m2, h, m1);
    enc += gru_cost(m2, h, h);

    let decoder_core = |feedback: Cost| {
        let mut d = feedback;
        d += conv_cost(m2, fo, h, k);
        d += pool(m1, h, m2);
        d += gru_cost(m1, h, h);
        d += conv_cost(m1, h, h, k);
        d += pool(n, h, m1);
        d += gru_cost(n, h, h);
        d += cost(n * h * fo, n * fo);
        d
    };
    let dec_first = decoder_core(cost(m2 * h * fo, m2 * fo));
    let mut own = pool(m1, fo, n);
    own += pool(m2, fo, m1);
    let dec_next = decoder_core(own);

    let mut window = hierarchy;
    window += enc * c.t_in as u64;
    window += dec_first;
    window += dec_next * (c.t_out as u64 - 1);

    Ok(CostEstimate {
        mac_count: enc.macs + dec_next.macs,
        hierarchy_macs: hierarchy.macs,
        window_macs: window.macs,
        peak_activation_floats: window.floats,
    })
}

/// Label used for a pooling setting in tables.
pub fn pooling_label(p: Pooling) -> String {
    match p {
        Pooling::Disabled => "nopool".into(),
        Pooling::Learned { m1, m2 } => format!("{m1}-{m2}"),
    }
}

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub pooling: Pooling,
    pub history: TrainHistory,
    pub best_val_mse: f64,
}

/// Trains every pooling setting with the same seed and budget.
pub fn pool_sweep(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    ds: &SeriesDataset,
    graph: &Graph,
    settings: &[Pooling],
    seed: u64,
) -> Result<Vec<SweepRun>> {
    settings
        .iter()
        .map(|&pooling| {
            let config = ModelConfig { pooling, ..base.clone() };
            let out = train_loop(&config, train_cfg, ds, graph, seed)?;
            let best_val_mse = out.history.best().map_or(f64::NAN, |r| r.val.mse);
            Ok(SweepRun {
                pooling,
                history: out.history,
                best_val_mse,
            })
        })
        .collect()
}

pub fn sweep_csv(runs: &[SweepRun]) -> String {
    let mut s = String::from("setting,epoch,loss,val_mse\n");
    for run in runs {
        let label = pooling_label(run.pooling);
        for r in &run.history.records {
            let _ = writeln!(s, "{label},{},{},{}", r.epoch, r.train_loss, r.val.mse);
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cluster {
    pub cluster: usize,
    pub members: Vec<String>,
}

/// Hard clusters from a soft assignment: each node joins its argmax column,
/// the lowest index winning ties. Empty clusters are kept.
pub fn cluster_report(p: &Matrix, node_ids: &[String]) -> Result<Vec<Cluster>> {
    let (n, m) = p.dim();
    if n != node_ids.len() || m == 0 {
        return Err(Error::shape("cluster_report", (n, m), (node_ids.len(), m)));
    }
    let mut clusters: Vec<Cluster> = (0..m)
        .map(|cluster| Cluster {
            cluster,
            members: Vec::new(),
        })
        .collect();
    for (row, id) in p.rows().into_iter().zip(node_ids) {
        let best = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
        clusters[best].members.push(id.clone());
    }
    Ok(clusters)
}

/// One line per node, in cluster order.
pub fn clusters_csv(clusters: &[Cluster]) -> String {
    let mut s = String::from("node_id,cluster,cluster_size\n");
    for c in clusters {
        for id in &c.members {
            let _ = writeln!(s, "{id},{},{}", c.cluster, c.members.len());
        }
    }
    s
}

/// Median of a nonempty sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub label: String,
    pub config: ModelConfig,
    pub samples: Vec<f64>,
    pub median_seconds: f64,
}

/// One forward and backward pass over a random window on `ctx`.
pub fn forward_backward(params: &ModelParams, ctx: &GraphContext, rng: &mut impl Rng) -> Result<()> {
    let c = &params.config;
    let x = Array3::from_shape_simple_fn((c.t_in, c.nodes, c.f_in), || rng.random_range(-1.0..1.0));
    let y = Array3::from_shape_simple_fn((c.t_out, c.nodes, c.f_out), || rng.random_range(-1.0..1.0));
    let mut tape = params.tape();
    let state = encode(&mut tape, params, ctx, &x)?;
    let dec = decode(&mut tape, params, &state, c.t_out, None, 0.0, rng)?;
    let loss = mse_loss(&mut tape, &dec.outputs, &y)?;
    tape.backward(loss)
}

/// Graph used by the synthetic benchmarks: a ring of four cliques.
pub fn bench_graph(nodes: usize) -> Result<Graph> {
    Graph::with_index_ids(ring_of_cliques(nodes))
}

/// Median forward+backward wall time of each configuration on a single
/// thread, after one untimed warm-up pass.
pub fn wallclock_bench(
    configs: &[(String, ModelConfig)],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<TimingRow>> {
    if repetitions < 3 {
        return Err(Error::Parameter(format!("repetitions {repetitions} must be at least 3")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Parameter(e.to_string()))?;
    pool.install(|| {
        configs
            .iter()
            .map(|(label, config)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = ModelParams::init(config, &mut rng)?;
                let ctx = GraphContext::new(bench_graph(config.nodes)?);
                forward_backward(&params, &ctx, &mut rng)?;
                let samples = (0..repetitions)
                    .map(|_| {
                        let start = Instant::now();
                        forward_backward(&params, &ctx, &mut rng)?;
                        Ok(start.elapsed().as_secs_f64())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(TimingRow {
                    label: label.clone(),
                    config: config.clone(),
                    median_seconds: median(&samples),
                    samples,
                })
            })
            .collect()
    })
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from("label,nodes,pooling,hidden,repetitions,median_seconds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.label,
            r.config.nodes,
            pooling_label(r.config.pooling),
            r.config.hidden,
            r.samples.len(),
            r.median_seconds
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryRow {
    pub nodes: usize,
    pub pooled_floats: u64,
    pub nopool_floats: u64,
}

/// Estimated activation footprint with `M1 = N/2`, `M2 = N/4` against no
/// pooling, for each node count.
pub fn memory_bench(base: &ModelConfig, node_counts: &[usize]) -> Result<Vec<MemoryRow>> {
    node_counts
        .iter()
        .map(|&nodes| {
            let pooled = ModelConfig {
                nodes,
                pooling: ModelConfig::half_quarter(nodes),
                ..base.clone()
            };
            let nopool = ModelConfig {
                nodes,
                pooling: Pooling::Disabled,
                ..base.clone()
            };
            Ok(MemoryRow {
                nodes,
                pooled_floats: flop_estimate(&pooled)?.peak_activation_floats,
                nopool_floats: flop_estimate(&nopool)?.peak_activation_floats,
            })
        })
        .collect()
}

pub fn memory_csv(rows: &[MemoryRow]) -> String {
    let mut s = String::from("nodes,pooled_activation_floats,nopool_activation_floats,ratio\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.4}",
            r.nodes,
            r.pooled_floats,
            r.nopool_floats,
            r.nopool_floats as f64 / r.pooled_floats as f64
        );
    }
    s
}

pub fn write_csv(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write_text(path.as_ref(), text)
}
