//! Series and graph file formats, window extraction and the synthetic
//! diffusion benchmark.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tape::Matrix;

/// Observations of every node over time, one feature per node.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    /// `T × N`.
    pub values: Matrix,
    pub node_ids: Vec<String>,
    pub timestamps: Vec<String>,
    pub interval_minutes: f64,
}

impl SeriesDataset {
    pub fn steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SeriesDataset {
        SeriesDataset {
            values: self.values.slice(s![range.clone(), ..]).to_owned(),
            node_ids: self.node_ids.clone(),
            timestamps: self.timestamps[range].to_vec(),
            interval_minutes: self.interval_minutes,
        }
    }
}

/// One supervised example: `x` is followed immediately by `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `T_in × N × F`.
    pub x: Array3<f64>,
    /// `T_out × N × F`.
    pub y: Array3<f64>,
    /// Index of the first input step in the source series.
    pub t0: usize,
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_number(path: &Path, line: usize, cell: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_error(path, line, format!("not a number: {cell:?}")))
}

/// Reads `timestamp,<id1>,<id2>,…` with one row per interval. Empty cells
/// are forward-filled; gaps before a column's first observation take the
/// column mean.
pub fn load_series_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let mut reader = open(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 {
        return Err(parse_error(path, 1, "header needs a timestamp column and at least one node"));
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut seen = HashSet::new();
    for id in &node_ids {
        if !seen.insert(id) {
            return Err(parse_error(path, 1, format!("duplicate node id {id:?}")));
        }
    }
    let n = node_ids.len();

    let mut timestamps = Vec::new();
    let mut cells: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != n + 1 {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", n + 1, record.len()),
            ));
        }
        timestamps.push(record[0].to_string());
        for cell in record.iter().skip(1) {
            cells.push(if cell.is_empty() {
                f64::NAN
            } else {
                parse_number(path, line, cell)?
            });
        }
    }
    let t = timestamps.len();
    let mut values = Array2::from_shape_vec((t, n), cells).expect("rows checked");
    impute(&mut values).map_err(|col| {
        Error::Data(format!(
            "{}: column {:?} has no observations",
            path.display(),
            node_ids[col]
        ))
    })?;
    Ok(SeriesDataset {
        values,
        node_ids,
        timestamps,
        interval_minutes: 5.0,
    })
}

/// Forward fill, then column mean for leading gaps. Returns the index of a
/// column without any observation.
fn impute(values: &mut Matrix) -> std::result::Result<(), usize> {
    for (j, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
        let observed: Vec<f64> = col.iter().copied().filter(|v| !v.is_nan()).collect();
        if observed.is_empty() {
            if col.is_empty() {
                continue;
            }
            return Err(j);
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let mut last = None;
        for v in col.iter_mut() {
            if v.is_nan() {
                *v = last.unwrap_or(mean);
            } else {
                last = Some(*v);
            }
        }
    }
    Ok(())
}

pub fn save_series_csv(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "timestamp").map_err(io)?;
    for id in &ds.node_ids {
        write!(w, ",{id}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (ts, row) in ds.timestamps.iter().zip(ds.values.rows()) {
        write!(w, "{ts}").map_err(io)?;
        for v in row {
            // `{}` prints the shortest representation that round-trips.
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn index_of(node_ids: &[String]) -> HashMap<&str, usize> {
    node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect()
}

/// Reads `(src, dst, value)` triples, resolving ids against `node_ids`.
fn read_triples(path: &Path, node_ids: &[String]) -> Result<Vec<(usize, usize, f64, usize)>> {
    let index = index_of(node_ids);
    let mut reader = open(path)?;
    reader.headers().map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(parse_error(
                path,
                line,
                format!("expected 3 fields, found {}", record.len()),
            ));
        }
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| parse_error(path, line, format!("unknown node id {id:?}")))
        };
        let (i, j) = (lookup(&record[0])?, lookup(&record[1])?);
        let v = parse_number(path, line, &record[2])?;
        if v < 0.0 {
            return Err(parse_error(path, line, format!("negative value {v}")));
        }
        out.push((i, j, v, line));
    }
    Ok(out)
}

/// Reads an undirected `src,dst,weight` edge list; each edge is mirrored.
pub fn load_edges_csv(path: impl AsRef<Path>, node_ids: &[String]) -> Result<Graph> {
    let path = path.as_ref();
    let n = node_ids.len();
    let mut a = Array2::zeros((n, n));
    let mut set = Array2::from_elem((n, n), false);
    for (i, j, w, line) in read_triples(path, node_ids)? {
        if i == j {
            return Err(parse_error(path, line, format!("self-loop on {:?}", node_ids[i])));
        }
        if set[[i, j]] && a[[i, j]] != w {
            return Err(parse_error(
                path,
                line,
                format!(
                    "conflicting weights for {:?}–{:?}",
                    node_ids[i], node_ids[j]
                ),
            ));
        }
        a[[i, j]] = w;
        a[[j, i]] = w;
        set[[i, j]] = true;
        set[[j, i]] = true;
    }
    Graph::new(node_ids.to_vec(), a)
}

pub fn save_edges_csv(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "src,dst,weight").map_err(io)?;
    for (i, j, weight) in g.edges() {
        writeln!(w, "{},{},{weight}", g.node_ids()[i], g.node_ids()[j]).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads `src,dst,meters` into a dense symmetric distance matrix. Pairs
/// listed in one direction only are mirrored; pairs listed both ways keep
/// the shorter distance; unlisted pairs are unreachable (`+∞`).
pub fn load_dist_csv(path: impl AsRef<Path>, node_ids: &[String]) -> Result<Matrix> {
    let path = path.as_ref();
    let n = node_ids.len();
    let mut d = Array2::from_elem((n, n), f64::INFINITY);
    d.diag_mut().fill(0.0);
    for (i, j, meters, line) in read_triples(path, node_ids)? {
        if i == j && meters != 0.0 {
            return Err(parse_error(path, line, "nonzero self-distance"));
        }
        let v = d[[i, j]].min(meters);
        d[[i, j]] = v;
        d[[j, i]] = v;
    }
    Ok(d)
}

/// Sliding `(input, target)` windows with contiguous horizons.
pub fn make_windows(
    ds: &SeriesDataset,
    t_in: usize,
    t_out: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if t_in == 0 || stride == 0 {
        return Err(Error::Parameter("t_in and stride must be positive".into()));
    }
    let t = ds.steps();
    if t < t_in + t_out {
        return Err(Error::Data(format!(
            "series of {t} steps is shorter than one window ({t_in} + {t_out})"
        )));
    }
    let n = ds.nodes();
    let count = (t - t_in - t_out) / stride + 1;
    let block = |start: usize, len: usize| {
        ds.values
            .slice(s![start..start + len, ..])
            .to_owned()
            .into_shape_with_order((len, n, 1))
            .expect("contiguous slice")
    };
    Ok((0..count)
        .map(|k| {
            let t0 = k * stride;
            WindowSample {
                x: block(t0, t_in),
                y: block(t0 + t_in, t_out),
                t0,
            }
        })
        .collect())
}

/// Parameters of the synthetic diffusion benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    /// Nominal diurnal amplitude.
    pub amplitude: f64,
    /// Noise standard deviation as a fraction of the amplitude.
    pub noise: f64,
    /// Decay applied to the diffused previous deviation.
    pub persistence: f64,
    /// Steps per diurnal cycle.
    pub period: usize,
    pub level: f64,
}

impl SynthConfig {
    pub fn new(nodes: usize, steps: usize, seed: u64) -> Self {
        Self {
            nodes,
            steps,
            seed,
            amplitude: 1.0,
            noise: 0.05,
            persistence: 0.98,
            period: 288,
            level: 2.0,
        }
    }
}

/// Four cliques joined in a ring; sizes differ by at most one.
pub fn ring_of_cliques(n: usize) -> Matrix {
    let groups = clique_groups(n);
    let mut a = Array2::zeros((n, n));
    for g in &groups {
        for &i in g {
            for &j in g {
                if i != j {
                    a[[i, j]] = 1.0;
                }
            }
        }
    }
    for c in 0..groups.len() {
        let next = &groups[(c + 1) % groups.len()];
        let (i, j) = (*groups[c].last().expect("nonempty"), next[0]);
        if i != j {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
    }
    a
}

/// Node indices of each of the four cliques.
pub fn clique_groups(n: usize) -> Vec<Vec<usize>> {
    let base = n / 4;
    let extra = n % 4;
    let mut start = 0;
    (0..4)
        .map(|c| {
            let len = base + usize::from(c < extra);
            let g = (start..start + len).collect();
            start += len;
            g
        })
        .collect()
}

/// Deterministic pieces of the synthetic generator, exposed so the series
/// can be recomputed independently.
#[derive(Clone, Debug)]
pub struct SynthComponents {
    pub adjacency: Matrix,
    /// Row-normalized `A + I`.
    pub diffusion: Matrix,
    /// `T × N` diurnal component.
    pub seasonal: Matrix,
    /// Deviation at step 0.
    pub initial: ndarray::Array1<f64>,
    /// `T × N` innovations (zero at step 0).
    pub innovations: Matrix,
}

pub fn synth_components(cfg: &SynthConfig) -> Result<SynthComponents> {
    if cfg.nodes < 4 || cfg.steps < 100 {
        return Err(Error::Parameter(format!(
            "synthetic series needs N ≥ 4 and T ≥ 100, got N = {}, T = {}",
            cfg.nodes, cfg.steps
        )));
    }
    if !(0.0..1.0).contains(&cfg.persistence) || cfg.noise < 0.0 || cfg.period == 0 {
        return Err(Error::Parameter(
            "persistence must lie in [0, 1), noise ≥ 0, period > 0".into(),
        ));
    }
    let (n, t) = (cfg.nodes, cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adjacency = ring_of_cliques(n);

    let mut diffusion = &adjacency + &Array2::<f64>::eye(n);
    for mut row in diffusion.rows_mut() {
        let total = row.sum();
        row /= total;
    }

    let mut phase = vec![0.0; n];
    let mut amp = vec![0.0; n];
    for (c, group) in clique_groups(n).iter().enumerate() {
        for &i in group {
            phase[i] = c as f64 * PI / 2.0 + rng.random_range(-0.15..0.15);
            amp[i] = cfg.amplitude * rng.random_range(0.8..1.2);
        }
    }
    let omega = 2.0 * PI / cfg.period as f64;
    let seasonal = Array2::from_shape_fn((t, n), |(step, i)| {
        cfg.level + amp[i] * (omega * step as f64 + phase[i]).sin()
    });

    let initial = ndarray::Array1::from_shape_fn(n, |_| rng.random_range(-0.5..0.5) * cfg.amplitude);
    let sd = cfg.noise * cfg.amplitude;
    let mut innovations = Array2::zeros((t, n));
    if sd > 0.0 {
        let normal = Normal::new(0.0, sd).expect("positive sd");
        for step in 1..t {
            for i in 0..n {
                innovations[[step, i]] = normal.sample(&mut rng);
            }
        }
    }
    Ok(SynthComponents {
        adjacency,
        diffusion,
        seasonal,
        initial,
        innovations,
    })
}

/// Diurnal signal plus a persistent deviation that diffuses one hop per step:
///
/// ```text
/// x_t = s_t + d_t,   d_t = β · D d_{t−1} + ε_t
/// ```
///
/// where `D` is the row-normalized ring-of-cliques adjacency with self
/// loops. Clique members share a phase up to a small jitter.
pub fn synth_diffusion_with(cfg: &SynthConfig) -> Result<(SeriesDataset, Graph)> {
    let c = synth_components(cfg)?;
    let (t, n) = (cfg.steps, cfg.nodes);
    let mut values = Array2::zeros((t, n));
    let mut dev = c.initial.clone();
    for step in 0..t {
        if step > 0 {
            dev = c.diffusion.dot(&dev) * cfg.persistence + c.innovations.row(step);
        }
        let row = &c.seasonal.row(step) + &dev;
        values.row_mut(step).assign(&row);
    }
    let node_ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
    let graph = Graph::new(node_ids.clone(), c.adjacency)?;
    let timestamps = (0..t).map(|i| (i * 300).to_string()).collect();
    Ok((
        SeriesDataset {
            values,
            node_ids,
            timestamps,
            interval_minutes: 5.0,
        },
        graph,
    ))
}

pub fn synth_diffusion(nodes: usize, steps: usize, seed: u64) -> Result<(SeriesDataset, Graph)> {
    synth_diffusion_with(&SynthConfig::new(nodes, steps, seed))
}
