use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Axis;

use ghcrnn::checkpoint;
use ghcrnn::data::{
    load_dist_csv, load_edges_csv, load_series_csv, save_edges_csv, save_series_csv,
    synth_diffusion_with, SeriesDataset, SynthConfig,
};
use ghcrnn::eval::{
    cluster_report, clusters_csv, evaluate, memory_bench, memory_csv, pool_sweep, pooling_label,
    sweep_csv, timing_csv, wallclock_bench, write_csv, EvalReport, Forecaster,
};
use ghcrnn::graph::{distance_std, dual_graph_weights, gaussian_weights, Graph};
use ghcrnn::model::{forward, GraphContext, ModelConfig, Pooling};
use ghcrnn::training::{train_loop, PreparedData};

use crate::settings::{parse_pooling, Settings};
use crate::{Command, Common, Failure, ModelArgs, TrainArgs};

type Flags = Vec<(&'static str, Option<String>)>;

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn common_flags(c: &Common) -> Flags {
    vec![("seed", text(&c.seed)), ("out", path(&c.out))]
}

fn model_flags(m: &ModelArgs) -> Flags {
    vec![
        ("pooling", m.pooling.clone()),
        ("hidden", text(&m.hidden)),
        ("cheb_k", text(&m.cheb_k)),
        ("t_in", text(&m.t_in)),
        ("t_out", text(&m.t_out)),
    ]
}

fn train_flags(t: &TrainArgs) -> Flags {
    vec![
        ("epochs", text(&t.epochs)),
        ("batch_size", text(&t.batch_size)),
        ("lr", text(&t.lr)),
        ("patience", text(&t.patience)),
        ("teacher_decay", text(&t.teacher_decay)),
        ("split", t.split.clone()),
        ("threads", text(&t.threads)),
    ]
}

/// Resolves settings, makes the output directory and records the resolved
/// configuration there.
fn prepare(common: &Common, mut flags: Flags) -> Result<(Settings, PathBuf), Failure> {
    flags.extend(common_flags(common));
    let settings = Settings::resolve(common.config.as_deref(), &flags)?;
    settings.seed()?;
    let out = settings.out_dir()?;
    settings.write_beside(&out)?;
    Ok((settings, out))
}

fn load_series_and_graph(s: &Settings) -> Result<(SeriesDataset, Graph), Failure> {
    let ds = load_series_csv(s.input("series")?)?;
    let graph = load_edges_csv(s.input("graph")?, &ds.node_ids)?;
    Ok((ds, graph))
}

fn check_nodes(config: &ModelConfig, ds: &SeriesDataset) -> Result<(), Failure> {
    if config.nodes != ds.nodes() {
        return Err(Failure::usage(format!(
            "checkpoint was trained on {} nodes, series has {}",
            config.nodes,
            ds.nodes()
        )));
    }
    Ok(())
}

fn written(p: &Path) {
    eprintln!("wrote {}", p.display());
}

pub(crate) fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth { common, nodes, steps } => {
            let (s, out) = prepare(&common, vec![("nodes", text(&nodes)), ("steps", text(&steps))])?;
            let nodes = s.raw("nodes").map_or(Ok(30), |_| s.get("nodes"))?;
            let steps = s.raw("steps").map_or(Ok(2000), |_| s.get("steps"))?;
            let (ds, graph) = synth_diffusion_with(&SynthConfig::new(nodes, steps, s.seed()?))?;
            let series = out.join("series.csv");
            save_series_csv(&ds, &series)?;
            let edges = out.join("edges.csv");
            save_edges_csv(&graph, &edges)?;
            written(&series);
            written(&edges);
        }
        Command::BuildGraph { common, series, edges, distances, mode, kappa, sigma } => {
            let flags = vec![
                ("series", path(&series)),
                ("edges", path(&edges)),
                ("distances", path(&distances)),
                ("mode", mode),
                ("kappa", text(&kappa)),
                ("sigma", text(&sigma)),
            ];
            let (s, out) = prepare(&common, flags)?;
            let ds = load_series_csv(s.input("series")?)?;
            let ids = ds.node_ids.clone();
            let graph = match s.raw("mode").unwrap_or("gaussian") {
                "gaussian" => {
                    let dist = load_dist_csv(s.input("distances")?, &ids)?;
                    let sigma = match s.raw("sigma") {
                        Some(_) => s.get("sigma")?,
                        None => distance_std(&dist),
                    };
                    gaussian_weights(ids, &dist, sigma, s.get("kappa")?)?
                }
                "dual_flow" => {
                    let links = load_edges_csv(s.input("edges")?, &ids)?;
                    let adj01 = links.adjacency().mapv(|w| if w > 0.0 { 1.0 } else { 0.0 });
                    dual_graph_weights(ids, &ds.values, &adj01)?
                }
                other => return Err(Failure::usage(format!("mode: unknown value '{other}'"))),
            };
            let file = out.join("graph.csv");
            save_edges_csv(&graph, &file)?;
            let weights: Vec<f64> = graph.edges().map(|(_, _, w)| w).collect();
            let (lo, hi) = weights
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
            let mean = weights.iter().sum::<f64>() / weights.len().max(1) as f64;
            println!("nodes {} edges {}", graph.len(), graph.edge_count());
            if !weights.is_empty() {
                println!("weight min {lo} mean {mean} max {hi} total {}", weights.iter().sum::<f64>());
            }
            written(&file);
        }
        Command::Train { common, series, graph, model, train } => {
            let mut flags = vec![("series", path(&series)), ("graph", path(&graph))];
            flags.extend(model_flags(&model));
            flags.extend(train_flags(&train));
            let (s, out) = prepare(&common, flags)?;
            let (ds, graph) = load_series_and_graph(&s)?;
            let config = s.model_config(ds.nodes())?;
            let tc = s.train_config()?;
            let outcome = train_loop(&config, &tc, &ds, &graph, s.seed()?)?;
            for r in &outcome.history.records {
                eprintln!(
                    "epoch {:>3} loss {:.6} val mae {:.6} rmse {:.6}",
                    r.epoch, r.train_loss, r.val.mae, r.val.rmse
                );
            }
            let ck = out.join("checkpoint.txt");
            checkpoint::save(&ck, &outcome.params, &outcome.scaler)?;
            let hist = out.join("history.csv");
            outcome.history.write_csv(&hist)?;
            eprintln!("best epoch {}", outcome.best_epoch);
            written(&ck);
            written(&hist);
        }
        Command::Predict { common, checkpoint: ck, series, graph } => {
            let flags = vec![("checkpoint", path(&ck)), ("series", path(&series)), ("graph", path(&graph))];
            let (s, out) = prepare(&common, flags)?;
            let (params, scaler) = checkpoint::load(s.input("checkpoint")?)?;
            let (ds, graph) = load_series_and_graph(&s)?;
            check_nodes(&params.config, &ds)?;
            let t_in = params.config.t_in;
            if ds.steps() < t_in {
                return Err(Failure::usage(format!("series has {} steps, model reads {t_in}", ds.steps())));
            }
            let recent = ds.values.slice(ndarray::s![ds.steps() - t_in.., ..]).to_owned();
            let x = scaler.apply_array(&recent).insert_axis(Axis(2));
            let ctx = GraphContext::new(graph);
            let y = scaler.invert_array(&forward(&params, &ctx, &x)?);
            let mut csv = format!("horizon,{}\n", ds.node_ids.join(","));
            for (k, step) in y.outer_iter().enumerate() {
                let row: Vec<String> = step.iter().map(f64::to_string).collect();
                let _ = writeln!(csv, "{},{}", k + 1, row.join(","));
            }
            let file = out.join("predictions.csv");
            write_csv(&file, &csv)?;
            written(&file);
        }
        Command::Evaluate { common, checkpoint: ck, series, graph, baseline, period, split } => {
            let flags = vec![
                ("checkpoint", path(&ck)),
                ("series", path(&series)),
                ("graph", path(&graph)),
                ("baseline", baseline),
                ("period", text(&period)),
                ("split", split),
            ];
            let (s, out) = prepare(&common, flags)?;
            let (params, scaler) = checkpoint::load(s.input("checkpoint")?)?;
            let (ds, graph) = load_series_and_graph(&s)?;
            check_nodes(&params.config, &ds)?;
            let tc = s.train_config()?;
            let data = PreparedData::new(&ds, &params.config, tc.split, 1)?;
            if data.test.is_empty() {
                return Err(Failure::usage("split: the test range holds no complete window"));
            }
            let ctx = GraphContext::new(graph);
            let tag = s.raw("series").unwrap_or("").to_string();
            let mut report = EvalReport::new(tag, params.config.t_out);
            let model = Forecaster::Model { params: &params, ctx: &ctx, scaler };
            let label = format!("ghcrnn-{}", pooling_label(params.config.pooling));
            report.rows.push(evaluate(&label, &model, &data.test, &data.scaler)?);
            match s.raw("baseline") {
                None | Some("none") => {}
                Some("ha") => {
                    let train = ds.slice(data.split.train.clone()).values;
                    let ha = Forecaster::HistoricalAverage { train: &train, period: s.get("period")? };
                    report.rows.push(evaluate("ha", &ha, &data.test, &data.scaler)?);
                }
                Some(other) => return Err(Failure::usage(format!("baseline: unknown value '{other}'"))),
            }
            for r in &report.rows {
                println!(
                    "{:<16} mae {:.6} mse {:.6} rmse {:.6}",
                    r.name, r.overall.mae, r.overall.mse, r.overall.rmse
                );
            }
            let file = out.join("eval_report.csv");
            report.write_csv(&file)?;
            written(&file);
        }
        Command::Sweep { common, series, graph, settings, model, train } => {
            let mut flags = vec![("series", path(&series)), ("graph", path(&graph)), ("settings", settings)];
            flags.extend(model_flags(&model));
            flags.extend(train_flags(&train));
            let (s, out) = prepare(&common, flags)?;
            let list = s.raw("settings").ok_or_else(|| Failure::usage("settings: required"))?;
            let poolings: Vec<Pooling> = list
                .split(';')
                .map(|p| parse_pooling(p).ok_or_else(|| Failure::usage(format!("settings: invalid entry '{p}'"))))
                .collect::<Result<_, _>>()?;
            let (ds, graph) = load_series_and_graph(&s)?;
            let base = s.model_config(ds.nodes())?;
            for &p in &poolings {
                ModelConfig { pooling: p, ..base.clone() }
                    .validate()
                    .map_err(|e| Failure::usage(format!("settings: {}: {e}", pooling_label(p))))?;
            }
            let runs = pool_sweep(&base, &s.train_config()?, &ds, &graph, &poolings, s.seed()?)?;
            for r in &runs {
                println!("{:<10} best val mse {:.6}", pooling_label(r.pooling), r.best_val_mse);
            }
            let file = out.join("pool_sweep.csv");
            write_csv(&file, &sweep_csv(&runs))?;
            written(&file);
        }
        Command::Bench { common, nodes, bench_hidden, repetitions, memory_nodes } => {
            let flags = vec![
                ("nodes", text(&nodes)),
                ("bench_hidden", text(&bench_hidden)),
                ("repetitions", text(&repetitions)),
                ("memory_nodes", memory_nodes),
            ];
            let (s, out) = prepare(&common, flags)?;
            let or = |key: &str, default: usize| s.raw(key).map_or(Ok(default), |_| s.get::<usize>(key));
            let n = or("nodes", 500)?;
            let hidden = or("bench_hidden", 64)?;
            let reps = or("repetitions", 5)?;
            let counts: Vec<usize> = s
                .raw("memory_nodes")
                .unwrap_or("1000,2000,3000,4000,5000,6000,7000,8000,9000,10000")
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| Failure::usage("memory_nodes: expected comma-separated counts"))?;
            let base = ModelConfig { hidden, ..ModelConfig::new(n, Pooling::Disabled) };
            let pooled = ModelConfig { pooling: ModelConfig::half_quarter(n), ..base.clone() };
            pooled.validate().map_err(|e| Failure::usage(format!("nodes: {e}")))?;
            let rows = wallclock_bench(
                &[("nopool".into(), base.clone()), ("pooled".into(), pooled)],
                reps,
                s.seed()?,
            )?;
            for r in &rows {
                println!("{:<8} N={} median {:.4}s", r.label, r.config.nodes, r.median_seconds);
            }
            let time_file = out.join("bench_time.csv");
            write_csv(&time_file, &timing_csv(&rows))?;
            let mem = memory_bench(&base, &counts)?;
            let mem_file = out.join("bench_memory.csv");
            write_csv(&mem_file, &memory_csv(&mem))?;
            written(&time_file);
            written(&mem_file);
        }
        Command::InspectPool { common, checkpoint: ck, series, graph } => {
            let flags = vec![("checkpoint", path(&ck)), ("series", path(&series)), ("graph", path(&graph))];
            let (s, out) = prepare(&common, flags)?;
            let (params, _) = checkpoint::load(s.input("checkpoint")?)?;
            let (ds, graph) = load_series_and_graph(&s)?;
            check_nodes(&params.config, &ds)?;
            if !params.config.is_pooled() {
                return Err(Failure::usage("checkpoint: model has no pooling to inspect"));
            }
            let (p0, _) = params.assignments(&GraphContext::new(graph))?;
            let clusters = cluster_report(&p0, &ds.node_ids)?;
            let empty = clusters.iter().filter(|c| c.members.is_empty()).count();
            println!("{} nodes in {} clusters ({empty} empty)", ds.nodes(), clusters.len());
            let file = out.join("clusters.csv");
            write_csv(&file, &clusters_csv(&clusters))?;
            written(&file);
        }
    }
    Ok(())
}
