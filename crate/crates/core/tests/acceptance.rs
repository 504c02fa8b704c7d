//! Acceptance criteria, one line of output each.
//!
//! Runs as a plain binary so every line is printed even when all pass.
//! A criterion listed in `KNOWN_FAILURES` may fail without failing the run.

use std::process::ExitCode;
use std::time::Instant;

use ghcrnn::data::{synth_diffusion, SeriesDataset};
use ghcrnn::eval::{
    cluster_report, evaluate, memory_bench, wallclock_bench, Forecaster, DEFAULT_PERIOD,
};
use ghcrnn::graph::{cheb_polynomials, dual_graph_weights, scaled_laplacian_with, Graph, LambdaMax};
use ghcrnn::layers::{pool, unpool_with};
use ghcrnn::model::{decode, encode, forward, GraphContext, ModelConfig, ModelParams, Pooling};
use ghcrnn::training::{metrics, mse_loss, train_loop, PreparedData, TrainConfig, TrainOutcome};
use ghcrnn::{Matrix, Result, Tape};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_FAILURES: &[u32] = &[7];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn random_adjacency(n: usize, density: f64, rng: &mut impl Rng) -> Matrix {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        // A path keeps every node connected.
        if i + 1 < n {
            let w = rng.random_range(0.2..1.0);
            a[[i, i + 1]] = w;
            a[[i + 1, i]] = w;
        }
        for j in i + 2..n {
            if rng.random_bool(density) {
                let w = rng.random_range(0.2..1.0);
                a[[i, j]] = w;
                a[[j, i]] = w;
            }
        }
    }
    a
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn random_stochastic(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let mut p = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(0.0..1.0));
    for mut row in p.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

// 1

fn window_loss(params: &ModelParams, ctx: &GraphContext, x: &Array3<f64>, y: &Array3<f64>) -> Result<(Tape, ghcrnn::Var)> {
    let mut tape = params.tape();
    let state = encode(&mut tape, params, ctx, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dec = decode(&mut tape, params, &state, params.config.t_out, None, 0.0, &mut rng)?;
    let loss = mse_loss(&mut tape, &dec.outputs, y)?;
    Ok((tape, loss))
}

fn gradient_suite() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let config = ModelConfig {
        hidden: 4,
        cheb_k: 2,
        t_in: 3,
        t_out: 2,
        ..ModelConfig::new(5, Pooling::Learned { m1: 3, m2: 2 })
    };
    let params = ModelParams::init(&config, &mut rng)?;
    let ctx = GraphContext::new(Graph::with_index_ids(random_adjacency(5, 0.5, &mut rng))?);
    let x = Array3::from_shape_simple_fn((3, 5, 1), || rng.random_range(-1.0..1.0));
    let y = Array3::from_shape_simple_fn((2, 5, 1), || rng.random_range(-1.0..1.0));

    let (mut tape, loss) = window_loss(&params, &ctx, &x, &y)?;
    tape.backward(loss)?;
    let analytic = tape.leading_grads(params.set.len());

    let eps = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut entries = 0;
    let mut set = params.set.clone();
    for (idx, name) in params.set.names().iter().enumerate() {
        let (rows, cols) = params.set.values()[idx].dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = set.values()[idx][[r, c]];
                let mut eval_at = |v: f64| -> Result<f64> {
                    set.values_mut()[idx][[r, c]] = v;
                    let (tape, loss) = window_loss(&params.with_values(&set)?, &ctx, &x, &y)?;
                    Ok(tape.scalar(loss))
                };
                let fd = (eval_at(orig + eps)? - eval_at(orig - eps)?) / (2.0 * eps);
                set.values_mut()[idx][[r, c]] = orig;
                let an = analytic[idx][[r, c]];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                if rel > worst.0 {
                    worst = (rel, format!("{name}[{r},{c}]"));
                }
                entries += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 <= 1e-4 && secs < 30.0,
        format!(
            "{} parameters, {entries} entries; worst relative error {:.2e} at {}; {secs:.1}s",
            params.set.len(),
            worst.0,
            worst.1
        ),
    )
}

// 2

fn pooling_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let instances = 200;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(1..=n.min(4));
        let f = rng.random_range(1..=3);
        let a = random_adjacency(n, 0.4, &mut rng);
        let p = random_stochastic(n, m, &mut rng);
        let x = random_matrix(n, f, &mut rng);
        let xp_in = random_matrix(m, f, &mut rng);

        let mut tape = Tape::new();
        let (av, xv, pv, xpv) = (
            tape.constant(a.clone()),
            tape.param(x.clone()),
            tape.param(p.clone()),
            tape.constant(xp_in.clone()),
        );
        let (a_pool, x_pool) = pool(&mut tape, av, xv, pv)?;
        let x_back = unpool_with(&mut tape, xpv, pv)?;

        let mut a_ref = Array2::<f64>::zeros((m, m));
        let mut x_ref = Array2::<f64>::zeros((m, f));
        let mut back_ref = Array2::<f64>::zeros((n, f));
        for k in 0..m {
            for l in 0..m {
                for i in 0..n {
                    for j in 0..n {
                        a_ref[[k, l]] += p[[i, k]] * a[[i, j]] * p[[j, l]];
                    }
                }
            }
            for c in 0..f {
                for i in 0..n {
                    x_ref[[k, c]] += p[[i, k]] * x[[i, c]];
                }
            }
        }
        for i in 0..n {
            for c in 0..f {
                for k in 0..m {
                    back_ref[[i, c]] += p[[i, k]] * xp_in[[k, c]];
                }
            }
        }
        worst = worst
            .max(max_abs_diff(tape.value(a_pool), &a_ref))
            .max(max_abs_diff(tape.value(x_pool), &x_ref))
            .max(max_abs_diff(tape.value(x_back), &back_ref));
    }
    verdict(worst <= 1e-12, format!("{instances} instances; max deviation {worst:.2e}"))
}

// 3

/// Edge weights computed one step at a time with explicit loops.
fn literal_dual_weights(flows: &Matrix, adj: &Matrix) -> Matrix {
    let (t, n) = flows.dim();
    let mut f_avg = vec![0.0; n];
    for (i, avg) in f_avg.iter_mut().enumerate() {
        let mut total = 0.0;
        for step in 0..t {
            total += flows[[step, i]];
        }
        *avg = total / t as f64;
    }
    let mut f_sum = 0.0;
    for v in &f_avg {
        f_sum += v;
    }
    let f_div: Vec<f64> = f_avg.iter().map(|v| v / f_sum).collect();
    let mut d = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            d[i] += adj[[i, j]];
        }
    }
    let p_e: Vec<f64> = d.iter().map(|di| 1.0 / di).collect();
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if adj[[i, j]] == 1.0 {
                w[[i, j]] = p_e[i] * f_div[i] + p_e[j] * f_div[j];
            }
        }
    }
    w
}

fn dual_graph_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let instances = 200;
    let (mut worst, mut worst_total) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let n = rng.random_range(2..=9);
        let t = rng.random_range(1..=20);
        let adj = random_adjacency(n, 0.35, &mut rng).mapv(|w| if w > 0.0 { 1.0 } else { 0.0 });
        let flows = Array2::from_shape_simple_fn((t, n), || rng.random_range(0.0..50.0));
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let g = dual_graph_weights(ids, &flows, &adj)?;
        worst = worst.max(max_abs_diff(g.adjacency(), &literal_dual_weights(&flows, &adj)));
        let total: f64 = g.edges().map(|(_, _, w)| w).sum();
        worst_total = worst_total.max((total - 1.0).abs());
    }
    verdict(
        worst <= 1e-12 && worst_total <= 1e-12,
        format!("{instances} instances; max deviation {worst:.2e}; max |total weight - 1| {worst_total:.2e}"),
    )
}

// 4

/// Coefficients of T_0 .. T_{k-1} in the monomial basis.
fn chebyshev_coefficients(k: usize) -> Vec<Vec<f64>> {
    let mut c: Vec<Vec<f64>> = vec![vec![1.0], vec![0.0, 1.0]];
    for i in 2..k {
        let mut next = vec![0.0; i + 1];
        for (j, v) in c[i - 1].iter().enumerate() {
            next[j + 1] += 2.0 * v;
        }
        for (j, v) in c[i - 2].iter().enumerate() {
            next[j] -= v;
        }
        c.push(next);
    }
    c.truncate(k);
    c
}

fn chebyshev_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 1..=6 {
        for k in 1..=5 {
            for _ in 0..4 {
                let lap = scaled_laplacian_with(&random_adjacency(n, 0.5, &mut rng), LambdaMax::Fixed).scaled_laplacian;
                let x = random_matrix(n, rng.random_range(1..=3), &mut rng);
                let mut tape = Tape::new();
                let (lv, xv) = (tape.constant(lap.clone()), tape.constant(x.clone()));
                let terms = cheb_polynomials(&mut tape, lv, xv, k)?;
                let mut powers = vec![x.clone()];
                for j in 1..k {
                    powers.push(lap.dot(&powers[j - 1]));
                }
                for (term, coef) in terms.iter().zip(chebyshev_coefficients(k)) {
                    let mut expected = Array2::zeros(x.dim());
                    for (j, c) in coef.iter().enumerate() {
                        expected.scaled_add(*c, &powers[j]);
                    }
                    worst = worst.max(max_abs_diff(tape.value(*term), &expected));
                }
                cases += 1;
            }
        }
    }
    verdict(worst <= 1e-10, format!("{cases} cases, N ≤ 6, K ≤ 5; max deviation {worst:.2e}"))
}

// 5 and 6

const SYNTH_SEED: u64 = 2024;
const TRAIN_SEED: u64 = 1;

fn train_cfg() -> TrainConfig {
    TrainConfig { max_epochs: 30, lr: 3e-3, ..TrainConfig::default() }
}

struct Trained {
    outcome: TrainOutcome,
    seconds: f64,
}

fn train(ds: &SeriesDataset, graph: &Graph, pooling: Pooling) -> Result<Trained> {
    let start = Instant::now();
    let outcome = train_loop(&ModelConfig::new(ds.nodes(), pooling), &train_cfg(), ds, graph, TRAIN_SEED)?;
    Ok(Trained { outcome, seconds: start.elapsed().as_secs_f64() })
}

fn end_to_end(ds: &SeriesDataset, graph: &Graph, pooled: &Trained) -> Result<Verdict> {
    let start = Instant::now();
    let config = &pooled.outcome.params.config;
    let data = PreparedData::new(ds, config, train_cfg().split, 1)?;
    let ctx = GraphContext::new(graph.clone());
    let scaler = pooled.outcome.scaler;
    let model = evaluate(
        "ghcrnn",
        &Forecaster::Model { params: &pooled.outcome.params, ctx: &ctx, scaler },
        &data.test,
        &scaler,
    )?;
    let train_values = ds.slice(data.split.train.clone()).values;
    let ha = evaluate(
        "ha",
        &Forecaster::HistoricalAverage { train: &train_values, period: DEFAULT_PERIOD },
        &data.test,
        &scaler,
    )?;
    let secs = pooled.seconds + start.elapsed().as_secs_f64();
    let gain = 1.0 - model.overall.mae / ha.overall.mae;
    verdict(
        gain >= 0.2 && secs <= 300.0,
        format!(
            "test MAE {:.4} vs HA {:.4} ({:.1}% lower); {} epochs; {secs:.0}s",
            model.overall.mae,
            ha.overall.mae,
            100.0 * gain,
            pooled.outcome.history.records.len()
        ),
    )
}

fn ablation_parity(pooled: &Trained, nopool: &Trained) -> Result<Verdict> {
    let val = |t: &Trained| t.outcome.history.best().map(|r| r.val.mse).unwrap_or(f64::NAN);
    let (p, q) = (val(pooled), val(nopool));
    let gap = (p - q).abs() / q;
    verdict(
        gap <= 0.15,
        format!("validation MSE pooled (15, 8) {p:.5} vs no pooling {q:.5}; gap {:.1}%", 100.0 * gap),
    )
}

// 7

fn table_consistency() -> Result<Verdict> {
    let rows = [
        ("HA", 13.12, 172.19),
        ("ARIMA", 10.008, 100.96),
        ("SVR", 10.095, 101.91),
        ("LSTM", 7.680, 58.98),
        ("GHCRNN-nopool", 7.569, 57.29),
        ("GHCRNN", 7.59, 57.60),
    ];
    let mut failed = Vec::new();
    for (name, loss, mse) in rows {
        // Residuals ±√MSE have exactly this mean squared error.
        let e: f64 = f64::sqrt(mse);
        let m = metrics(&[e, -e, e, -e], &[0.0; 4])?;
        let gap = (loss - m.rmse).abs();
        if gap > 0.02 {
            failed.push(format!("{name}: |{loss} - {:.4}| = {gap:.4}", m.rmse));
        }
    }
    if failed.is_empty() {
        verdict(true, "all six rows within 0.02")
    } else {
        verdict(false, format!("{} of 6 rows exceed 0.02 ({})", failed.len(), failed.join("; ")))
    }
}

// 8

fn efficiency() -> Result<Verdict> {
    let base = ModelConfig { hidden: 64, ..ModelConfig::new(500, Pooling::Disabled) };
    let configs = [
        ("pooled".to_string(), ModelConfig { pooling: Pooling::Learned { m1: 250, m2: 125 }, ..base.clone() }),
        ("nopool".to_string(), base.clone()),
    ];
    let rows = wallclock_bench(&configs, 5, 8)?;
    let speedup = rows[1].median_seconds / rows[0].median_seconds;
    let nodes: Vec<usize> = (1..=10).map(|k| k * 1000).collect();
    let memory = memory_bench(&base, &nodes)?;
    let smaller = memory.iter().all(|r| r.pooled_floats < r.nopool_floats);
    let min_ratio = memory
        .iter()
        .map(|r| r.nopool_floats as f64 / r.pooled_floats as f64)
        .fold(f64::INFINITY, f64::min);
    verdict(
        speedup >= 1.2 && smaller,
        format!(
            "N=500: pooled {:.3}s vs no pooling {:.3}s ({speedup:.2}x); activations smaller at all 10 sizes: {smaller} (min ratio {min_ratio:.2})",
            rows[0].median_seconds, rows[1].median_seconds
        ),
    )
}

// 9

fn seq2seq_contract() -> Result<Verdict> {
    let config = ModelConfig {
        hidden: 8,
        t_in: 12,
        t_out: 6,
        ..ModelConfig::new(10, Pooling::Learned { m1: 5, m2: 3 })
    };
    let run = |seed: u64| -> Result<Array3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng)?;
        let ctx = GraphContext::new(Graph::with_index_ids(random_adjacency(10, 0.3, &mut rng))?);
        let x = Array3::from_shape_simple_fn((12, 10, 1), || rng.random_range(-1.0..1.0));
        forward(&params, &ctx, &x)
    };
    let (a, b, c) = (run(9)?, run(9)?, run(10)?);
    let shape_ok = a.dim() == (6, 10, 1);

    let (ds, graph) = synth_diffusion(8, 300, 4)?;
    let small = ModelConfig { hidden: 4, t_in: 12, t_out: 6, ..ModelConfig::new(8, Pooling::Learned { m1: 4, m2: 2 }) };
    let tc = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let t1 = train_loop(&small, &tc, &ds, &graph, 3)?;
    let t2 = train_loop(&small, &tc, &ds, &graph, 3)?;
    let trained_same = t1.params.set == t2.params.set && t1.history.train_losses() == t2.history.train_losses();

    verdict(
        shape_ok && a == b && a != c && trained_same && a.iter().all(|v| v.is_finite()),
        format!(
            "output {:?}; repeat run identical: {}; other seed differs: {}; training reproducible: {trained_same}",
            a.dim(),
            a == b,
            a != c
        ),
    )
}

// 10

fn assignment_properties() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst_row = 0.0f64;
    let mut argmax_stable = true;
    let mut covered = true;
    for case in 0..30 {
        let n = rng.random_range(4..=20);
        let m1 = rng.random_range(2..n);
        let m2 = rng.random_range(1..m1);
        let config = ModelConfig { hidden: 3, ..ModelConfig::new(n, Pooling::Learned { m1, m2 }) };
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(case))?;
        let graph = Graph::with_index_ids(random_adjacency(n, 0.3, &mut rng))?;
        let (p0, p1) = params.assignments(&GraphContext::new(graph.clone()))?;
        for p in [&p0, &p1] {
            for row in p.rows() {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
            }
        }

        let ids = graph.node_ids().to_vec();
        let logits = random_matrix(n, m1, &mut rng);
        let mut shifted = logits.clone();
        for mut row in shifted.rows_mut() {
            row += rng.random_range(-5.0..5.0);
        }
        let mut tape = Tape::new();
        let (lv, sv) = (tape.constant(logits.clone()), tape.constant(shifted.clone()));
        let (pl, ps) = (tape.row_softmax(lv)?, tape.row_softmax(sv)?);
        let reference = cluster_report(&logits, &ids)?;
        for other in [&shifted, tape.value(pl), tape.value(ps)] {
            argmax_stable &= cluster_report(other, &ids)? == reference;
        }

        let clusters = cluster_report(&p0, &ids)?;
        let mut members: Vec<String> = clusters.into_iter().flat_map(|c| c.members).collect();
        members.sort();
        let mut expected = ids.clone();
        expected.sort();
        covered &= members == expected;
    }
    verdict(
        worst_row <= 1e-10 && argmax_stable && covered,
        format!(
            "30 assignment pairs; max |row sum - 1| {worst_row:.1e}; argmax shift-invariant: {argmax_stable}; every node in exactly one cluster: {covered}"
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Result<Verdict>)> = vec![
        (1, "gradient suite", gradient_suite()),
        (2, "pooling oracle", pooling_oracle()),
        (3, "dual graph oracle", dual_graph_oracle()),
        (4, "chebyshev oracle", chebyshev_oracle()),
    ];

    let synth = synth_diffusion(30, 2000, SYNTH_SEED);
    match synth.and_then(|(ds, graph)| {
        let pooled = train(&ds, &graph, Pooling::Learned { m1: 15, m2: 8 })?;
        let nopool = train(&ds, &graph, Pooling::Disabled)?;
        Ok((end_to_end(&ds, &graph, &pooled), ablation_parity(&pooled, &nopool)))
    }) {
        Ok((five, six)) => {
            results.push((5, "end-to-end learning", five));
            results.push((6, "ablation parity", six));
        }
        Err(e) => {
            results.push((5, "end-to-end learning", Err(e)));
            results.push((6, "ablation parity", verdict(false, "training failed")));
        }
    }

    results.push((7, "table consistency", table_consistency()));
    results.push((8, "efficiency trends", efficiency()));
    results.push((9, "seq2seq contract", seq2seq_contract()));
    results.push((10, "assignment properties", assignment_properties()));
    results.sort_by_key(|r| r.0);

    let mut unexpected = 0;
    for (id, name, outcome) in results {
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let known = KNOWN_FAILURES.contains(&id);
        let tag = match (pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2} {name:<22} {tag}: {detail}");
        if !pass && !known {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        println!("{unexpected} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
