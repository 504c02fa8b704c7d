//! Graph convolution, learned pooling/unpooling and the gated recurrent cell.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::cheb_polynomials;
use crate::params::ParamSet;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Chebyshev graph convolution weights: one `F_in × F_out` block per order,
/// stacked vertically.
#[derive(Clone, Debug)]
pub struct GraphConvParams {
    pub theta: Var,
    pub k: usize,
    pub activation: Activation,
}

impl GraphConvParams {
    pub fn init(
        set: &mut ParamSet,
        name: &str,
        k: usize,
        f_in: usize,
        f_out: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let theta = set.add_uniform(format!("{name}.theta"), k * f_in, f_out, rng);
        Self {
            theta,
            k,
            activation,
        }
    }
}

/// `activation([T_0 x | T_1 x | … | T_{K−1} x] · θ)`.
pub fn graph_conv(tape: &mut Tape, x: Var, laplacian: Var, p: &GraphConvParams) -> Result<Var> {
    let (n, f_in) = tape.shape(x);
    let (rows, _) = tape.shape(p.theta);
    if rows != p.k * f_in {
        return Err(Error::shape("graph_conv", (n, p.k * f_in), tape.shape(p.theta)));
    }
    let terms = cheb_polynomials(tape, laplacian, x, p.k)?;
    let stacked = tape.concat_cols_all(&terms)?;
    let out = tape.matmul(stacked, p.theta)?;
    Ok(p.activation.apply(tape, out))
}

/// Single-hop aggregation over a raw adjacency: `activation(A · x · θ)`.
pub fn graph_conv_dense(
    tape: &mut Tape,
    x: Var,
    adjacency: Var,
    theta: Var,
    activation: Activation,
) -> Result<Var> {
    let ax = tape.matmul(adjacency, x)?;
    let out = tape.matmul(ax, theta)?;
    Ok(activation.apply(tape, out))
}

/// Weights of the network that produces a soft node-to-cluster assignment.
#[derive(Clone, Debug)]
pub struct PoolParams {
    pub assign_logit_weights: Var,
    pub clusters: usize,
}

/// Assignment matrix computed during the current forward pass.
#[derive(Clone, Debug, Default)]
pub struct PoolCache {
    p: Option<Var>,
}

impl PoolCache {
    pub fn p(&self) -> Result<Var> {
        self.p
            .ok_or_else(|| Error::State("assignment requested before pooling ran".into()))
    }

    pub fn is_populated(&self) -> bool {
        self.p.is_some()
    }
}

/// `P = row_softmax(relu(A · x_static · W))`, cached for the unpooling side.
pub fn compute_assignment(
    tape: &mut Tape,
    x_static: Var,
    adjacency: Var,
    params: &PoolParams,
    cache: &mut PoolCache,
) -> Result<Var> {
    let (n, _) = tape.shape(x_static);
    let (_, m) = tape.shape(params.assign_logit_weights);
    if m != params.clusters || m == 0 || m > n {
        return Err(Error::Contract(format!(
            "cluster count {} invalid for {n} nodes (weights have {m} columns)",
            params.clusters
        )));
    }
    let logits = graph_conv_dense(
        tape,
        x_static,
        adjacency,
        params.assign_logit_weights,
        Activation::Linear,
    )?;
    let p = tape.relu_row_softmax(logits)?;
    cache.p = Some(p);
    Ok(p)
}

/// Coarsened adjacency `Pᵀ A P`.
pub fn pool_adjacency(tape: &mut Tape, a: Var, p: Var) -> Result<Var> {
    let (n, m) = tape.shape(p);
    let sa = tape.shape(a);
    if sa != (n, n) {
        return Err(Error::shape("pool", sa, (n, m)));
    }
    tape.congruence(p, a)
}

/// Coarsened features `Pᵀ X`.
pub fn pool_features(tape: &mut Tape, x: Var, p: Var) -> Result<Var> {
    tape.matmul_tn(p, x)
}

/// `(Pᵀ A P, Pᵀ X)`.
pub fn pool(tape: &mut Tape, a: Var, x: Var, p: Var) -> Result<(Var, Var)> {
    let (n, m) = tape.shape(p);
    if tape.shape(x).0 != n {
        return Err(Error::shape("pool", tape.shape(x), (n, m)));
    }
    let a_pool = pool_adjacency(tape, a, p)?;
    let x_pool = pool_features(tape, x, p)?;
    Ok((a_pool, x_pool))
}

/// `P · X_pool` with the assignment of the matching pooling level.
pub fn unpool(tape: &mut Tape, x_pool: Var, cache: &PoolCache) -> Result<Var> {
    let p = cache.p()?;
    unpool_with(tape, x_pool, p)
}

pub fn unpool_with(tape: &mut Tape, x_pool: Var, p: Var) -> Result<Var> {
    tape.matmul(p, x_pool)
}

/// Gate matrices over the concatenation `[h, x]`, biases, and the optional
/// output projection used by the last decoder cell.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
    pub w_o: Option<Var>,
    pub hidden: usize,
}

impl GruParams {
    pub fn init(
        set: &mut ParamSet,
        name: &str,
        f_in: usize,
        hidden: usize,
        f_out: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let rows = hidden + f_in;
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_z = set.add_uniform(format!("{name}.w_z"), rows, hidden, rng);
        let w_r = set.add_uniform(format!("{name}.w_r"), rows, hidden, rng);
        let w_h = set.add_uniform(format!("{name}.w_h"), rows, hidden, rng);
        let b_z = set.add_scaled(format!("{name}.b_z"), 1, hidden, bound, rng);
        let b_r = set.add_scaled(format!("{name}.b_r"), 1, hidden, bound, rng);
        let b_h = set.add_scaled(format!("{name}.b_h"), 1, hidden, bound, rng);
        let w_o = f_out.map(|f| set.add_uniform(format!("{name}.w_o"), hidden, f, rng));
        Self {
            w_z,
            w_r,
            w_h,
            b_z,
            b_r,
            b_h,
            w_o,
            hidden,
        }
    }
}

fn gate(tape: &mut Tape, input: Var, w: Var, b: Var, rows: usize) -> Result<Var> {
    let lin = tape.matmul(input, w)?;
    let bias = tape.broadcast_rows(b, rows)?;
    tape.add(lin, bias)
}

/// One gated recurrent update:
///
/// ```text
/// z  = σ([h, x] W_z + b_z)
/// r  = σ([h, x] W_r + b_r)
/// h̃  = tanh([r ⊙ h, x] W_h + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
pub fn gru_step(tape: &mut Tape, h_prev: Var, x_in: Var, p: &GruParams) -> Result<Var> {
    let (n, hidden) = tape.shape(h_prev);
    if hidden != p.hidden || tape.shape(x_in).0 != n {
        return Err(Error::shape("gru_step", tape.shape(h_prev), tape.shape(x_in)));
    }
    let hx = tape.concat_cols(h_prev, x_in)?;
    let z = gate(tape, hx, p.w_z, p.b_z, n)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, hx, p.w_r, p.b_r, n)?;
    let r = tape.sigmoid(r);
    let rh = tape.hadamard(r, h_prev)?;
    let rhx = tape.concat_cols(rh, x_in)?;
    let cand = gate(tape, rhx, p.w_h, p.b_h, n)?;
    let cand = tape.tanh(cand);
    let keep = tape.one_minus(z);
    let kept = tape.hadamard(keep, h_prev)?;
    let fresh = tape.hadamard(z, cand)?;
    tape.add(kept, fresh)
}

/// Linear read-out `h · W_o`.
pub fn output_proj(tape: &mut Tape, h: Var, p: &GruParams) -> Result<Var> {
    let w_o = p
        .w_o
        .ok_or_else(|| Error::State("recurrent cell has no output projection".into()))?;
    tape.matmul(h, w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{scaled_laplacian, Graph};
    use crate::tape::Matrix;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn gru_from(tape: &mut Tape, mats: &[Matrix], hidden: usize) -> GruParams {
        let v: Vec<Var> = mats.iter().map(|m| tape.param(m.clone())).collect();
        GruParams {
            w_z: v[0],
            w_r: v[1],
            w_h: v[2],
            b_z: v[3],
            b_r: v[4],
            b_h: v[5],
            w_o: v.get(6).copied(),
            hidden,
        }
    }

    fn zero_gru(hidden: usize, f_in: usize) -> Vec<Matrix> {
        let rows = hidden + f_in;
        vec![
            Array2::zeros((rows, hidden)),
            Array2::zeros((rows, hidden)),
            Array2::zeros((rows, hidden)),
            Array2::zeros((1, hidden)),
            Array2::zeros((1, hidden)),
            Array2::zeros((1, hidden)),
            Array2::zeros((hidden, 2)),
        ]
    }

    fn path_laplacian(n: usize) -> Matrix {
        let mut a = Array2::zeros((n, n));
        for i in 0..n - 1 {
            a[[i, i + 1]] = 1.0;
            a[[i + 1, i]] = 1.0;
        }
        scaled_laplacian(&Graph::with_index_ids(a).unwrap()).scaled_laplacian
    }

    #[test]
    fn conv_identity_and_zero_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 4, 3);
        let mut t = Tape::new();
        let lap = t.constant(path_laplacian(4));
        let xv = t.constant(x.clone());
        let theta = t.param(Array2::eye(3));
        let p = GraphConvParams {
            theta,
            k: 1,
            activation: Activation::Linear,
        };
        let out = graph_conv(&mut t, xv, lap, &p).unwrap();
        assert_eq!(t.value(out), &x);

        let theta = t.param(Array2::zeros((6, 2)));
        let p = GraphConvParams {
            theta,
            k: 2,
            activation: Activation::Relu,
        };
        let out = graph_conv(&mut t, xv, lap, &p).unwrap();
        assert!(t.value(out).iter().all(|&v| v == 0.0));

        let bad = GraphConvParams {
            theta,
            k: 3,
            activation: Activation::Linear,
        };
        assert!(matches!(
            graph_conv(&mut t, xv, lap, &bad),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn dense_conv_aggregates_weighted_neighbours() {
        // Five nodes with three features each; the first output entry is the
        // weighted neighbour sum of the first feature.
        let a = array![
            [0.0, 0.5, 1.0, 0.0, 2.0],
            [0.5, 0.0, 0.0, 1.5, 0.0],
            [1.0, 0.0, 0.0, 0.3, 0.0],
            [0.0, 1.5, 0.3, 0.0, 0.7],
            [2.0, 0.0, 0.0, 0.7, 0.0]
        ];
        let x = array![
            [1.0, 2.0, 3.0],
            [4.0, 5.0, 6.0],
            [7.0, 8.0, 9.0],
            [1.5, 2.5, 3.5],
            [-1.0, 0.0, 1.0]
        ];
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let xv = t.constant(x.clone());
        let theta = t.constant(Array2::eye(3));
        let out = graph_conv_dense(&mut t, xv, av, theta, Activation::Linear).unwrap();
        let mut expected = 0.0;
        for j in 0..5 {
            expected += a[[0, j]] * x[[j, 0]];
        }
        assert!((t.value(out)[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x1, x2) = (random(&mut rng, 6, 2), random(&mut rng, 6, 2));
        let theta = random(&mut rng, 6, 4);
        let (alpha, beta) = (0.7, -1.3);
        let run = |x: &Matrix| {
            let mut t = Tape::new();
            let lap = t.constant(path_laplacian(6));
            let xv = t.constant(x.clone());
            let th = t.constant(theta.clone());
            let p = GraphConvParams {
                theta: th,
                k: 3,
                activation: Activation::Linear,
            };
            let out = graph_conv(&mut t, xv, lap, &p).unwrap();
            t.value(out).clone()
        };
        let combined = run(&(&x1 * alpha + &x2 * beta));
        let separate = run(&x1) * alpha + run(&x2) * beta;
        assert!((combined - separate).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn assignment_uniform_at_zero_weights_and_saturates() {
        let mut t = Tape::new();
        let a = t.constant(array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        let xs = t.constant(Array2::ones((3, 2)));
        let w = t.param(Array2::zeros((2, 3)));
        let params = PoolParams {
            assign_logit_weights: w,
            clusters: 3,
        };
        let mut cache = PoolCache::default();
        assert!(!cache.is_populated());
        let p = compute_assignment(&mut t, xs, a, &params, &mut cache).unwrap();
        assert!(cache.is_populated());
        assert!(t.value(p).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        // Identity adjacency and features: logits equal the weights, so
        // ±20-magnitude rows pick one cluster each.
        let mut t = Tape::new();
        let eye = t.constant(Array2::eye(3));
        let xs = t.constant(Array2::eye(3));
        let w = t.param(array![[20.0, -20.0], [-20.0, 20.0], [20.0, -20.0]]);
        let params = PoolParams {
            assign_logit_weights: w,
            clusters: 2,
        };
        let p = compute_assignment(&mut t, xs, eye, &params, &mut PoolCache::default()).unwrap();
        let hard = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert!((t.value(p) - &hard).iter().all(|d| d.abs() < 1e-8));
    }

    #[test]
    fn pool_identity_and_hard_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 2.0], [0.0, 2.0, 0.0]];
        let x = random(&mut rng, 3, 2);
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let xv = t.constant(x.clone());
        let eye = t.constant(Array2::eye(3));
        let (ap, xp) = pool(&mut t, av, xv, eye).unwrap();
        assert_eq!(t.value(ap), &a);
        assert_eq!(t.value(xp), &x);

        let part = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let clusters = [0usize, 0, 1];
        let pv = t.constant(part);
        let (ap, xp) = pool(&mut t, av, xv, pv).unwrap();
        for c in 0..2 {
            for d in 0..2 {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        if clusters[i] == c && clusters[j] == d {
                            s += a[[i, j]];
                        }
                    }
                }
                assert_eq!(t.value(ap)[[c, d]], s);
            }
            for f in 0..2 {
                let s: f64 = (0..3).filter(|&i| clusters[i] == c).map(|i| x[[i, f]]).sum();
                assert!((t.value(xp)[[c, f]] - s).abs() < 1e-15);
            }
        }

        let mut cache = PoolCache::default();
        assert!(matches!(unpool(&mut t, xp, &cache), Err(Error::State(_))));
        cache.p = Some(pv);
        let back = unpool(&mut t, xp, &cache).unwrap();
        for i in 0..3 {
            for f in 0..2 {
                assert_eq!(t.value(back)[[i, f]], t.value(xp)[[clusters[i], f]]);
            }
        }
    }

    #[test]
    fn permutation_pool_then_unpool_recovers_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 4, 3);
        let perm = [2usize, 0, 3, 1];
        let mut pm = Array2::zeros((4, 4));
        for (i, &j) in perm.iter().enumerate() {
            pm[[i, j]] = 1.0;
        }
        let mut t = Tape::new();
        let a = t.constant(path_laplacian(4).mapv(f64::abs));
        let xv = t.constant(x.clone());
        let pv = t.constant(pm);
        let (_, xp) = pool(&mut t, a, xv, pv).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(t.value(xp).row(j), x.row(i));
        }
        let back = unpool_with(&mut t, xp, pv).unwrap();
        assert_eq!(t.value(back), &x);
    }

    #[test]
    fn uniform_unpool_gives_equal_rows() {
        let x_pool = array![[1.0, 2.0], [3.0, 5.0], [-1.0, 0.5]];
        let mut t = Tape::new();
        let xp = t.constant(x_pool.clone());
        let p = t.constant(Array2::from_elem((5, 3), 1.0 / 3.0));
        let out = unpool_with(&mut t, xp, p).unwrap();
        let col_sums = x_pool.sum_axis(ndarray::Axis(0)) / 3.0;
        for row in t.value(out).rows() {
            assert!((&row - &col_sums).iter().all(|d| d.abs() < 1e-15));
        }
    }

    #[test]
    fn gru_zero_parameters_halve_state() {
        let mut t = Tape::new();
        let p = gru_from(&mut t, &zero_gru(3, 2), 3);
        let h = t.constant(array![[1.0, -2.0, 0.5], [0.0, 4.0, -1.0]]);
        let x = t.constant(array![[3.0, 1.0], [-1.0, 2.0]]);
        let out = gru_step(&mut t, h, x, &p).unwrap();
        assert_eq!(t.value(out), &(t.value(h) * 0.5));
    }

    #[test]
    fn gru_closed_update_gate_keeps_state() {
        let mut mats = zero_gru(3, 2);
        mats[3].fill(-40.0);
        let mut t = Tape::new();
        let p = gru_from(&mut t, &mats, 3);
        let h = t.constant(array![[1.0, -2.0, 0.5]]);
        let x = t.constant(array![[3.0, 1.0]]);
        let out = gru_step(&mut t, h, x, &p).unwrap();
        assert!((t.value(out) - t.value(h)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn output_projection_examples() {
        let mut mats = zero_gru(2, 1);
        let mut t = Tape::new();
        let p = gru_from(&mut t, &mats, 2);
        let h = t.constant(array![[1.0, 2.0]]);
        let y = output_proj(&mut t, h, &p).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));

        mats[6] = Array2::eye(2);
        let p = gru_from(&mut t, &mats, 2);
        let y = output_proj(&mut t, h, &p).unwrap();
        assert_eq!(t.value(y), t.value(h));

        let no_head = GruParams { w_o: None, ..p };
        assert!(matches!(output_proj(&mut t, h, &no_head), Err(Error::State(_))));
    }

    #[test]
    fn gru_and_output_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (hidden, f_in, n) = (3, 2, 4);
        let mut mats: Vec<Matrix> = zero_gru(hidden, f_in)
            .iter()
            .map(|m| random(&mut rng, m.nrows(), m.ncols()))
            .collect();
        mats.push(random(&mut rng, n, hidden));
        mats.push(random(&mut rng, n, f_in));

        let eval = |mats: &[Matrix], grads: bool| {
            let mut t = Tape::new();
            let p = gru_from(&mut t, &mats[..7], hidden);
            let h = t.param(mats[7].clone());
            let x = t.param(mats[8].clone());
            let h1 = gru_step(&mut t, h, x, &p).unwrap();
            let y = output_proj(&mut t, h1, &p).unwrap();
            let sq = t.hadamard(y, y).unwrap();
            let a = t.sum_all(h1);
            let b = t.sum_all(sq);
            let loss = t.add(a, b).unwrap();
            if grads {
                t.backward(loss).unwrap();
            }
            let g: Vec<Matrix> = (0..9).map(|i| t.leading_grads(9)[i].clone()).collect();
            (t.scalar(loss), g)
        };
        let (_, analytic) = eval(&mats, true);
        let eps = 1e-5;
        for (k, m) in mats.iter().enumerate() {
            for idx in 0..m.len() {
                let (r, c) = (idx / m.ncols(), idx % m.ncols());
                let mut plus = mats.clone();
                plus[k][[r, c]] += eps;
                let mut minus = mats.clone();
                minus[k][[r, c]] -= eps;
                let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * eps);
                let an = analytic[k][[r, c]];
                assert!(
                    (an - fd).abs() / fd.abs().max(1.0) <= 1e-4,
                    "block {k} ({r},{c}): {an} vs {fd}"
                );
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gru_state_stays_in_unit_box(
                seed in any::<u64>(),
                h in proptest::collection::vec(-1.0f64..=1.0, 6),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mats: Vec<Matrix> = zero_gru(3, 2)
                    .iter()
                    .map(|m| random(&mut rng, m.nrows(), m.ncols()) * 5.0)
                    .collect();
                let mut t = Tape::new();
                let p = gru_from(&mut t, &mats, 3);
                let hv = t.constant(Array2::from_shape_vec((2, 3), h).unwrap());
                let x = t.constant(random(&mut rng, 2, 2) * 10.0);
                let out = gru_step(&mut t, hv, x, &p).unwrap();
                prop_assert!(t.value(out).iter().all(|v| v.abs() <= 1.0));
            }

            #[test]
            fn argmax_invariant_under_row_shift(
                seed in any::<u64>(),
                shift in -30.0f64..30.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let logits = random(&mut rng, 5, 3) * 4.0;
                let mut shifted = logits.clone();
                for (i, mut row) in shifted.rows_mut().into_iter().enumerate() {
                    row += shift * (i as f64 - 2.0);
                }
                let mut t = Tape::new();
                let a = t.constant(logits);
                let b = t.constant(shifted);
                let pa = t.row_softmax(a).unwrap();
                let pb = t.row_softmax(b).unwrap();
                let argmax = |m: &Matrix, r: usize| {
                    (0..m.ncols()).fold(0, |best, c| if m[[r, c]] > m[[r, best]] { c } else { best })
                };
                for r in 0..5 {
                    prop_assert_eq!(argmax(t.value(pa), r), argmax(t.value(pb), r));
                }
            }
        }
    }
}
