//! Graph construction, Laplacian scaling and the Chebyshev basis.

use std::collections::HashSet;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::tape::{Matrix, Tape, Var};

/// Weighted undirected graph over named nodes.
///
/// The adjacency is dense, symmetric, nonnegative and has a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    node_ids: Vec<String>,
    adjacency: Matrix,
}

impl Graph {
    pub fn new(node_ids: Vec<String>, adjacency: Matrix) -> Result<Self> {
        let n = node_ids.len();
        if adjacency.dim() != (n, n) {
            return Err(Error::shape("graph", adjacency.dim(), (n, n)));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &node_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate node id {id:?}")));
            }
        }
        for i in 0..n {
            if adjacency[[i, i]] != 0.0 {
                return Err(Error::Contract(format!(
                    "self-loop on node {:?}",
                    node_ids[i]
                )));
            }
            for j in 0..n {
                let w = adjacency[[i, j]];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Contract(format!(
                        "weight {w} between {:?} and {:?} must be finite and nonnegative",
                        node_ids[i], node_ids[j]
                    )));
                }
                if w != adjacency[[j, i]] {
                    return Err(Error::Contract(format!(
                        "adjacency not symmetric at ({:?}, {:?})",
                        node_ids[i], node_ids[j]
                    )));
                }
            }
        }
        Ok(Self {
            node_ids,
            adjacency,
        })
    }

    /// Graph with ids `"0"`, `"1"`, ….
    pub fn with_index_ids(adjacency: Matrix) -> Result<Self> {
        let ids = (0..adjacency.nrows()).map(|i| i.to_string()).collect();
        Self::new(ids, adjacency)
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    /// Undirected edges `(i, j, w)` with `i < j` and `w > 0`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.len();
        (0..n).flat_map(move |i| {
            (i + 1..n).filter_map(move |j| {
                let w = self.adjacency[[i, j]];
                (w > 0.0).then_some((i, j, w))
            })
        })
    }

    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }
}

/// Standard deviation of the off-diagonal entries of a distance matrix.
pub fn distance_std(dist: &Matrix) -> f64 {
    let n = dist.nrows();
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| dist[[i, j]])
        .filter(|d| d.is_finite())
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

/// Gaussian-kernel weights `exp(-dist² / σ²)` with entries below `kappa`
/// dropped. Infinite distances (unreachable pairs) give weight 0.
pub fn gaussian_weights(
    node_ids: Vec<String>,
    dist: &Matrix,
    sigma_dist: f64,
    kappa: f64,
) -> Result<Graph> {
    if !(sigma_dist > 0.0) || !sigma_dist.is_finite() {
        return Err(Error::Parameter(format!(
            "sigma_dist must be positive, got {sigma_dist}"
        )));
    }
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::Parameter(format!(
            "kappa must lie in [0, 1), got {kappa}"
        )));
    }
    let n = dist.nrows();
    if dist.dim() != (n, n) {
        return Err(Error::shape("gaussian_weights", dist.dim(), (n, n)));
    }
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (dist[[i, j]], dist[[j, i]]);
            if a.is_nan() || a < 0.0 {
                return Err(Error::Contract(format!(
                    "distance ({i}, {j}) = {a} is not a nonnegative number"
                )));
            }
            if a != b {
                return Err(Error::Contract(format!(
                    "distance matrix asymmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }
    let s2 = sigma_dist * sigma_dist;
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist[[i, j]];
            let v = (-(d * d) / s2).exp();
            w[[i, j]] = if v < kappa { 0.0 } else { v };
        }
    }
    Graph::new(node_ids, w)
}

/// Edge weights of a road dual graph from per-node flow shares.
///
/// Each node splits its share of the average total flow evenly over its
/// incident edges; an edge collects the contributions of both endpoints.
pub fn dual_graph_weights(node_ids: Vec<String>, flows: &Matrix, adj01: &Matrix) -> Result<Graph> {
    let (t, n) = flows.dim();
    if adj01.dim() != (n, n) {
        return Err(Error::shape("dual_graph_weights", adj01.dim(), (n, n)));
    }
    if node_ids.len() != n {
        return Err(Error::shape(
            "dual_graph_weights",
            (node_ids.len(), 1),
            (n, 1),
        ));
    }
    if t == 0 {
        return Err(Error::Data("flow series is empty".into()));
    }
    if flows.iter().any(|&f| !f.is_finite() || f < 0.0) {
        return Err(Error::Data("flows must be finite and nonnegative".into()));
    }
    for i in 0..n {
        for j in 0..n {
            let a = adj01[[i, j]];
            if (a != 0.0 && a != 1.0) || a != adj01[[j, i]] || (i == j && a != 0.0) {
                return Err(Error::Contract(format!(
                    "adjacency must be binary, symmetric and loop-free at ({i}, {j})"
                )));
            }
        }
    }

    let f_avg = flows.mean_axis(Axis(0)).expect("t > 0");
    let f_sum = f_avg.sum();
    if !(f_sum > 0.0) {
        return Err(Error::Data("total flow is zero".into()));
    }
    let f_div = &f_avg / f_sum;
    let degree = adj01.sum_axis(Axis(1));
    if let Some(i) = degree.iter().position(|&d| d == 0.0) {
        return Err(Error::Data(format!(
            "node {:?} has no incident edge",
            node_ids[i]
        )));
    }
    let share: Array1<f64> = &f_div / &degree;

    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if adj01[[i, j]] == 1.0 {
                w[[i, j]] = share[i] + share[j];
            }
        }
    }
    Graph::new(node_ids, w)
}

/// How the Laplacian spectrum bound used for scaling is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMax {
    /// The normalized Laplacian's spectrum always lies in `[0, 2]`.
    Fixed,
    /// Largest eigenvalue estimated by power iteration.
    PowerIteration { iterations: usize },
}

/// Scaled Laplacian `2L/λ_max − I` of the symmetric normalized Laplacian.
#[derive(Clone, Debug)]
pub struct SpectralCache {
    pub scaled_laplacian: Matrix,
    pub lambda_max: f64,
    pub degree: Array1<f64>,
}

impl SpectralCache {
    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }

    /// Records the scaled Laplacian as a constant on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.constant(self.scaled_laplacian.clone())
    }
}

/// `I − D^{-1/2} A D^{-1/2}`, with zero degrees treated as one.
pub fn normalized_laplacian(adjacency: &Matrix) -> (Matrix, Array1<f64>) {
    let n = adjacency.nrows();
    let degree = adjacency.sum_axis(Axis(1));
    let inv_sqrt = degree.mapv(|d| if d > 0.0 { d.sqrt().recip() } else { 1.0 });
    let mut l = Array2::eye(n);
    for i in 0..n {
        for j in 0..n {
            l[[i, j]] -= inv_sqrt[i] * adjacency[[i, j]] * inv_sqrt[j];
        }
    }
    (l, degree)
}

pub fn scaled_laplacian(g: &Graph) -> SpectralCache {
    scaled_laplacian_with(g.adjacency(), LambdaMax::Fixed)
}

pub fn scaled_laplacian_with(adjacency: &Matrix, mode: LambdaMax) -> SpectralCache {
    let (l, degree) = normalized_laplacian(adjacency);
    let lambda_max = match mode {
        LambdaMax::Fixed => 2.0,
        LambdaMax::PowerIteration { iterations } => {
            let est = largest_eigenvalue(&l, iterations);
            if est > 0.0 {
                est
            } else {
                2.0
            }
        }
    };
    let n = l.nrows();
    let mut scaled = l * (2.0 / lambda_max);
    for i in 0..n {
        scaled[[i, i]] -= 1.0;
    }
    // Exact symmetry; the loop above is symmetric up to rounding of the
    // products only.
    let scaled = (&scaled + &scaled.t()) * 0.5;
    SpectralCache {
        scaled_laplacian: scaled,
        lambda_max,
        degree,
    }
}

/// Power iteration on a symmetric positive semidefinite matrix.
fn largest_eigenvalue(m: &Matrix, iterations: usize) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    // Deterministic start vector with no special symmetry.
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + (i as f64 * 0.618_033_988_7).fract());
    let mut lambda = 0.0;
    for _ in 0..iterations.max(1) {
        let w = m.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w) / v.dot(&v);
        v = w / norm;
    }
    lambda
}

/// Differentiable scaled Laplacian with `λ_max = 2`: `−D^{-1/2} A D^{-1/2}`.
///
/// Used for pooled adjacencies, which depend on trainable assignments.
pub fn scaled_laplacian_var(tape: &mut Tape, adjacency: Var) -> Result<Var> {
    tape.neg_normalized(adjacency)
}

/// `[T_0(L̃)x, …, T_{K−1}(L̃)x]` by the three-term Chebyshev recursion.
pub fn cheb_polynomials(tape: &mut Tape, laplacian: Var, x: Var, k: usize) -> Result<Vec<Var>> {
    if k < 1 {
        return Err(Error::Parameter("Chebyshev order must be at least 1".into()));
    }
    let (n, n2) = tape.shape(laplacian);
    if n != n2 || tape.shape(x).0 != n {
        return Err(Error::shape("cheb_polynomials", (n, n2), tape.shape(x)));
    }
    let mut terms = Vec::with_capacity(k);
    terms.push(x);
    if k > 1 {
        terms.push(tape.matmul(laplacian, x)?);
    }
    for i in 2..k {
        let lx = tape.matmul(laplacian, terms[i - 1])?;
        let twice = tape.scale(lx, 2.0);
        terms.push(tape.sub(twice, terms[i - 2])?);
    }
    Ok(terms)
}
