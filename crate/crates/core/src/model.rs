//! Two-level encoder and mirrored decoder.
//!
//! Encoder step `t` (pooled configuration):
//!
//! ```text
//! u  = P0ᵀ · conv(X_t over A)            N → M1
//! h0 = gru(h0, u)
//! v  = P1ᵀ · conv(h0 over Pool(A))       M1 → M2
//! h1 = gru(h1, v)
//! ```
//!
//! The decoder starts its coarse cell from the encoder's layer-0 state and
//! its fine cell from zeros. Its first input is the layer-1 state projected
//! to feature width; later inputs are the previous forecast (or the teacher
//! value) coarsened through `P0ᵀ` then `P1ᵀ`:
//!
//! ```text
//! d0  = P1 · conv(c_k over Pool(Pool(A)))  M2 → M1
//! hd0 = gru(hd0, d0)
//! d1  = P0 · conv(hd0 over Pool(A))        M1 → N
//! hd1 = gru(hd1, d1)
//! ŷ_k = hd1 · W_o
//! ```
//!
//! Assignments are computed once per forward pass from static node features,
//! so the same `P` is used at every step. With pooling disabled every `P` is
//! the identity and the pooling products are skipped.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{scaled_laplacian, scaled_laplacian_var, Graph, SpectralCache};
use crate::layers::{
    compute_assignment, graph_conv, gru_step, output_proj, pool_adjacency, pool_features,
    unpool_with, Activation, GraphConvParams, GruParams, PoolCache, PoolParams,
};
use crate::params::ParamSet;
use crate::tape::{Matrix, Tape, Var};

/// Number of structural statistics in the static assignment features.
pub const STATIC_STATS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Identity assignments at both levels.
    Disabled,
    Learned { m1: usize, m2: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub pooling: Pooling,
    pub f_in: usize,
    pub f_out: usize,
    pub hidden: usize,
    pub cheb_k: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// Width of the learned per-node embedding fed to the assignment network.
    pub embed_width: usize,
}

impl ModelConfig {
    pub fn new(nodes: usize, pooling: Pooling) -> Self {
        Self {
            nodes,
            pooling,
            f_in: 1,
            f_out: 1,
            hidden: 16,
            cheb_k: 2,
            t_in: 12,
            t_out: 3,
            embed_width: 8,
        }
    }

    /// Pooling with `m1 = N/2`, `m2 = N/4` (rounded up).
    pub fn half_quarter(nodes: usize) -> Pooling {
        Pooling::Learned {
            m1: nodes.div_ceil(2),
            m2: nodes.div_ceil(4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Parameter(format!("{field}: {why}")));
        if self.nodes == 0 {
            return bad("nodes", "must be positive");
        }
        if let Pooling::Learned { m1, m2 } = self.pooling {
            if !(self.nodes > m1 && m1 > m2 && m2 >= 1) {
                return bad("pool_sizes", "need N > M1 > M2 ≥ 1");
            }
            if self.embed_width == 0 {
                return bad("embed_width", "must be positive");
            }
        }
        if self.f_in == 0 || self.f_out == 0 {
            return bad("features", "must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        if self.cheb_k == 0 {
            return bad("cheb_k", "must be at least 1");
        }
        if self.t_in == 0 || self.t_out == 0 {
            return bad("horizon", "t_in and t_out must be at least 1");
        }
        Ok(())
    }

    /// Node counts `(M1, M2)` of the two recurrent levels.
    pub fn level_sizes(&self) -> (usize, usize) {
        match self.pooling {
            Pooling::Disabled => (self.nodes, self.nodes),
            Pooling::Learned { m1, m2 } => (m1, m2),
        }
    }

    pub fn is_pooled(&self) -> bool {
        matches!(self.pooling, Pooling::Learned { .. })
    }
}

/// A graph together with everything derived from it that the model reads.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub graph: Graph,
    pub spectral: SpectralCache,
    /// `N × 3`: degree, mean incident weight, max incident weight, each
    /// divided by its column maximum.
    pub static_features: Matrix,
}

impl GraphContext {
    pub fn new(graph: Graph) -> Self {
        let spectral = scaled_laplacian(&graph);
        let static_features = structural_features(graph.adjacency());
        Self {
            graph,
            spectral,
            static_features,
        }
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }
}

fn structural_features(a: &Matrix) -> Matrix {
    let n = a.nrows();
    let mut f = Array2::zeros((n, STATIC_STATS));
    for (i, row) in a.rows().into_iter().enumerate() {
        let degree = row.sum();
        let count = row.iter().filter(|&&w| w > 0.0).count();
        let max = row.fold(0.0f64, |m, &w| m.max(w));
        f[[i, 0]] = degree;
        f[[i, 1]] = if count > 0 { degree / count as f64 } else { 0.0 };
        f[[i, 2]] = max;
    }
    for mut col in f.columns_mut() {
        let max = col.fold(0.0f64, |m, &v| m.max(v));
        if max > 0.0 {
            col /= max;
        }
    }
    f
}

/// Learned assignment for one pooling level: a free per-node embedding and
/// the logit weights applied after one hop of aggregation.
#[derive(Clone, Debug)]
pub struct AssignmentNet {
    pub embedding: Var,
    pub pool: PoolParams,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
    pub enc_conv0: GraphConvParams,
    pub enc_conv1: GraphConvParams,
    pub dec_conv0: GraphConvParams,
    pub dec_conv1: GraphConvParams,
    pub pool0: Option<AssignmentNet>,
    pub pool1: Option<AssignmentNet>,
    pub enc_gru0: GruParams,
    pub enc_gru1: GruParams,
    pub dec_gru0: GruParams,
    pub dec_gru1: GruParams,
    pub feedback_proj: Var,
}

impl ModelParams {
    /// Fresh parameters, uniform in `±1/√fan_in`.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (k, h) = (c.cheb_k, c.hidden);
        let lin = Activation::Linear;
        let mut set = ParamSet::new();
        let enc_conv0 = GraphConvParams::init(&mut set, "enc_conv0", k, c.f_in, h, lin, rng);
        let enc_conv1 = GraphConvParams::init(&mut set, "enc_conv1", k, h, h, lin, rng);
        let dec_conv0 = GraphConvParams::init(&mut set, "dec_conv0", k, c.f_out, h, lin, rng);
        let dec_conv1 = GraphConvParams::init(&mut set, "dec_conv1", k, h, h, lin, rng);
        let (pool0, pool1) = match c.pooling {
            Pooling::Disabled => (None, None),
            Pooling::Learned { m1, m2 } => {
                let e = c.embed_width;
                let emb0 = set.add_scaled("pool0.embedding", c.nodes, e, 1.0, rng);
                let w0 = set.add_uniform("pool0.weights", STATIC_STATS + e, m1, rng);
                let emb1 = set.add_scaled("pool1.embedding", m1, e, 1.0, rng);
                let w1 = set.add_uniform("pool1.weights", e, m2, rng);
                (
                    Some(AssignmentNet {
                        embedding: emb0,
                        pool: PoolParams {
                            assign_logit_weights: w0,
                            clusters: m1,
                        },
                    }),
                    Some(AssignmentNet {
                        embedding: emb1,
                        pool: PoolParams {
                            assign_logit_weights: w1,
                            clusters: m2,
                        },
                    }),
                )
            }
        };
        let enc_gru0 = GruParams::init(&mut set, "enc_gru0", h, h, None, rng);
        let enc_gru1 = GruParams::init(&mut set, "enc_gru1", h, h, None, rng);
        let dec_gru0 = GruParams::init(&mut set, "dec_gru0", h, h, None, rng);
        let dec_gru1 = GruParams::init(&mut set, "dec_gru1", h, h, Some(c.f_out), rng);
        let feedback_proj = set.add_uniform("feedback_proj", h, c.f_out, rng);
        Ok(Self {
            config: config.clone(),
            set,
            enc_conv0,
            enc_conv1,
            dec_conv0,
            dec_conv1,
            pool0,
            pool1,
            enc_gru0,
            enc_gru1,
            dec_gru0,
            dec_gru1,
            feedback_proj,
        })
    }

    /// Parameters with the given values, which must match this layout.
    pub fn with_values(&self, set: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        out.set.load_from(set)?;
        Ok(out)
    }

    /// Tape whose leading leaves are these parameters.
    pub fn tape(&self) -> Tape {
        Tape::with_params(&self.set)
    }

    /// Assignment matrices `(P0, P1)` for the current parameters; identities
    /// when pooling is disabled.
    pub fn assignments(&self, ctx: &GraphContext) -> Result<(Matrix, Matrix)> {
        let mut tape = self.tape();
        let levels = Levels::build(&mut tape, self, ctx)?;
        let n = self.config.nodes;
        let p0 = levels
            .p0
            .map_or_else(|| Array2::eye(n), |v| tape.value(v).clone());
        let p1 = levels
            .p1
            .map_or_else(|| Array2::eye(n), |v| tape.value(v).clone());
        Ok((p0, p1))
    }
}

/// Per-forward graph hierarchy: assignments, pooled adjacencies and the
/// scaled Laplacian at each level.
#[derive(Clone, Debug)]
struct Levels {
    p0: Option<Var>,
    p1: Option<Var>,
    a_pool0: Var,
    a_pool1: Var,
    lap0: Var,
    lap_pool0: Var,
    lap_pool1: Var,
    cache0: PoolCache,
    cache1: PoolCache,
}

impl Levels {
    fn build(tape: &mut Tape, params: &ModelParams, ctx: &GraphContext) -> Result<Self> {
        let n = params.config.nodes;
        if ctx.len() != n {
            return Err(Error::shape("graph", (ctx.len(), ctx.len()), (n, n)));
        }
        let lap0 = ctx.spectral.bind(tape);
        let a = tape.constant(ctx.graph.adjacency().clone());
        match (&params.pool0, &params.pool1) {
            (Some(net0), Some(net1)) => {
                let mut cache0 = PoolCache::default();
                let mut cache1 = PoolCache::default();
                let stats = tape.constant(ctx.static_features.clone());
                let xs0 = tape.concat_cols(stats, net0.embedding)?;
                let p0 = compute_assignment(tape, xs0, a, &net0.pool, &mut cache0)?;
                let a_pool0 = pool_adjacency(tape, a, p0)?;
                let lap_pool0 = scaled_laplacian_var(tape, a_pool0)?;
                let p1 = compute_assignment(tape, net1.embedding, a_pool0, &net1.pool, &mut cache1)?;
                let a_pool1 = pool_adjacency(tape, a_pool0, p1)?;
                let lap_pool1 = scaled_laplacian_var(tape, a_pool1)?;
                Ok(Self {
                    p0: Some(p0),
                    p1: Some(p1),
                    a_pool0,
                    a_pool1,
                    lap0,
                    lap_pool0,
                    lap_pool1,
                    cache0,
                    cache1,
                })
            }
            _ => Ok(Self {
                p0: None,
                p1: None,
                a_pool0: a,
                a_pool1: a,
                lap0,
                lap_pool0: lap0,
                lap_pool1: lap0,
                cache0: PoolCache::default(),
                cache1: PoolCache::default(),
            }),
        }
    }
}

fn coarsen(tape: &mut Tape, x: Var, p: Option<Var>) -> Result<Var> {
    match p {
        Some(p) => pool_features(tape, x, p),
        None => Ok(x),
    }
}

fn refine(tape: &mut Tape, x: Var, cache: &PoolCache, pooled: bool) -> Result<Var> {
    if pooled {
        unpool_with(tape, x, cache.p()?)
    } else {
        Ok(x)
    }
}

/// Final encoder states and the graph hierarchy the decoder reuses.
#[derive(Clone, Debug)]
pub struct EncoderState {
    /// `M1 × H`.
    pub s0: Var,
    /// `M2 × H`.
    pub s1: Var,
    levels: Levels,
}

impl EncoderState {
    /// `N × M1` assignment, if pooling is enabled.
    pub fn p0(&self) -> Option<Var> {
        self.levels.p0
    }

    /// `M1 × M2` assignment, if pooling is enabled.
    pub fn p1(&self) -> Option<Var> {
        self.levels.p1
    }

    pub fn a_pool0(&self) -> Var {
        self.levels.a_pool0
    }

    pub fn a_pool1(&self) -> Var {
        self.levels.a_pool1
    }
}

fn step_matrix(seq: &Array3<f64>, t: usize) -> Matrix {
    seq.index_axis(Axis(0), t).to_owned()
}

pub fn encode(
    tape: &mut Tape,
    params: &ModelParams,
    ctx: &GraphContext,
    x_seq: &Array3<f64>,
) -> Result<EncoderState> {
    let c = &params.config;
    let (t_in, n, f) = x_seq.dim();
    if t_in == 0 || n != c.nodes || f != c.f_in {
        return Err(Error::Shape {
            op: "encode",
            left: (n, f),
            right: (c.nodes, c.f_in),
        });
    }
    let levels = Levels::build(tape, params, ctx)?;
    let (m1, m2) = c.level_sizes();
    let mut h0 = tape.constant(Array2::zeros((m1, c.hidden)));
    let mut h1 = tape.constant(Array2::zeros((m2, c.hidden)));
    for t in 0..t_in {
        let x = tape.constant(step_matrix(x_seq, t));
        let conv = graph_conv(tape, x, levels.lap0, &params.enc_conv0)?;
        let u = coarsen(tape, conv, levels.p0)?;
        h0 = gru_step(tape, h0, u, &params.enc_gru0)?;
        let conv = graph_conv(tape, h0, levels.lap_pool0, &params.enc_conv1)?;
        let v = coarsen(tape, conv, levels.p1)?;
        h1 = gru_step(tape, h1, v, &params.enc_gru1)?;
    }
    Ok(EncoderState {
        s0: h0,
        s1: h1,
        levels,
    })
}

/// Decoder outputs plus a record of where each step's feedback came from.
#[derive(Clone, Debug, Default)]
pub struct Decoded {
    /// One `N × F_out` node per horizon step.
    pub outputs: Vec<Var>,
    /// Steps whose input was the decoder's own previous forecast.
    pub own_feedback_steps: usize,
    /// Steps whose input was the teacher value.
    pub teacher_steps: usize,
}

/// Runs the decoder for `t_out` steps. With `teacher_ratio > 0` each step
/// after the first feeds back the previous ground-truth value with that
/// probability.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    tape: &mut Tape,
    params: &ModelParams,
    state: &EncoderState,
    t_out: usize,
    teacher: Option<&Array3<f64>>,
    teacher_ratio: f64,
    rng: &mut impl Rng,
) -> Result<Decoded> {
    let c = &params.config;
    if !(0.0..=1.0).contains(&teacher_ratio) {
        return Err(Error::Parameter(format!(
            "teacher_ratio {teacher_ratio} outside [0, 1]"
        )));
    }
    if teacher_ratio > 0.0 {
        let y = teacher.ok_or_else(|| {
            Error::Contract("teacher_ratio > 0 requires teacher values".into())
        })?;
        if y.dim().0 < t_out || y.dim().1 != c.nodes || y.dim().2 != c.f_out {
            return Err(Error::Shape {
                op: "decode",
                left: (y.dim().1, y.dim().2),
                right: (c.nodes, c.f_out),
            });
        }
    }
    let lv = &state.levels;
    let pooled = c.is_pooled();
    let mut out = Decoded::default();
    let mut hd0 = state.s0;
    let mut hd1 = tape.constant(Array2::zeros((c.nodes, c.hidden)));
    let mut prev: Option<Var> = None;
    for k in 0..t_out {
        let input = match prev {
            None => tape.matmul(state.s1, params.feedback_proj)?,
            Some(own) => {
                let feedback = match teacher {
                    Some(y) if teacher_ratio > 0.0 && rng.random_bool(teacher_ratio) => {
                        out.teacher_steps += 1;
                        tape.constant(step_matrix(y, k - 1))
                    }
                    _ => {
                        out.own_feedback_steps += 1;
                        own
                    }
                };
                let fine = coarsen(tape, feedback, lv.p0)?;
                coarsen(tape, fine, lv.p1)?
            }
        };
        let conv = graph_conv(tape, input, lv.lap_pool1, &params.dec_conv0)?;
        let d0 = refine(tape, conv, &lv.cache1, pooled)?;
        hd0 = gru_step(tape, hd0, d0, &params.dec_gru0)?;
        let conv = graph_conv(tape, hd0, lv.lap_pool0, &params.dec_conv1)?;
        let d1 = refine(tape, conv, &lv.cache0, pooled)?;
        hd1 = gru_step(tape, hd1, d1, &params.dec_gru1)?;
        let y = output_proj(tape, hd1, &params.dec_gru1)?;
        out.outputs.push(y);
        prev = Some(y);
    }
    Ok(out)
}

/// Stacks per-step `N × F` outputs into a `T × N × F` array.
pub fn collect_outputs(tape: &Tape, outputs: &[Var]) -> Array3<f64> {
    let (n, f) = outputs.first().map_or((0, 0), |&v| tape.shape(v));
    let mut arr = Array3::zeros((outputs.len(), n, f));
    for (k, &v) in outputs.iter().enumerate() {
        arr.index_axis_mut(Axis(0), k).assign(tape.value(v));
    }
    arr
}

/// Forecast of `config.t_out` steps without teacher forcing.
pub fn forward(params: &ModelParams, ctx: &GraphContext, x_seq: &Array3<f64>) -> Result<Array3<f64>> {
    let mut tape = params.tape();
    let state = encode(&mut tape, params, ctx, x_seq)?;
    // The generator is never drawn from without teacher forcing.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let dec = decode(&mut tape, params, &state, params.config.t_out, None, 0.0, &mut rng)?;
    Ok(collect_outputs(&tape, &dec.outputs))
}
