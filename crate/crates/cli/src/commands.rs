use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lteode::data::{
    events_to_csv, generate_shock_series, load_external_csv, read_events_csv, write_series_csv, ForecastDataset,
    SeriesMetadata, Split, SYNTHETIC_RING_K,
};
use lteode::dynamics::{topology_witness, MaskMode, NfeCounter};
use lteode::graph::SpatialGraph;
use lteode::model::{flop_report, forward, ModelParams, NUM_STREAMS};
use lteode::stats::Summary;
use lteode::tensor::{Tape, Tensor};
use lteode::training::{
    ablate_variant, ablation_header, collapse_experiment, evaluate as evaluate_split, history_to_csv,
    histogram_to_csv, train as train_model, MetricReport, Variant,
};

use crate::config::RunConfig;
use crate::{DataError, InvariantError};

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(cfg: &RunConfig) -> Result<ForecastDataset> {
    let mut ds = load_external_csv(&cfg.series_path(), &cfg.meta_path(), cfg.layout())
        .with_context(|| format!("loading dataset from {}", cfg.data.display()))?;
    let events = cfg.events_path();
    if events.exists() {
        ds.events = Some(read_events_csv(&events)?);
    }
    Ok(ds)
}

fn metrics_csv(rows: &[(&str, MetricReport)]) -> String {
    let mut out = String::from("split,mae,rmse,mape\n");
    for (name, m) in rows {
        let _ = writeln!(out, "{name},{},{},{}", m.mae, m.rmse, m.mape);
    }
    out
}

fn summary_csv(rows: &[(&str, &Summary)]) -> String {
    let mut out = String::from("group,count,mean,std,p95\n");
    for (name, s) in rows {
        let _ = writeln!(out, "{name},{},{},{},{}", s.count, s.mean, s.std, s.p95);
    }
    out
}

pub fn generate_data(cfg: &RunConfig) -> Result<()> {
    let scenario = cfg.scenario();
    let graph = SpatialGraph::ring_lattice(scenario.n_nodes, SYNTHETIC_RING_K)?;
    let series = generate_shock_series(&scenario, &graph)?;
    cfg.write_resolved()?;
    let out = &cfg.out;
    write_series_csv(&series.series, &out.join("series.csv"))?;
    graph.save(&out.join("edges.csv"))?;
    write(out, "events.csv", &events_to_csv(&series.events))?;
    SeriesMetadata {
        n_nodes: scenario.n_nodes,
        in_dim: 1,
        tick_seconds: cfg.tick_seconds,
        edge_list_path: "edges.csv".into(),
    }
    .save(&out.join("meta.json"))?;
    println!(
        "generated nodes={} ticks={} shocks={} -> {}",
        scenario.n_nodes,
        scenario.total_t,
        series.events.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let base = cfg.model(ds.n_nodes(), ds.in_dim());
    let tc = cfg.train();
    cfg.write_resolved()?;
    let outcome = train_model(&ds, &base, &tc)?;
    let out = &cfg.out;
    outcome.params.save(&outcome.config, &out.join("model.ckpt"))?;
    write(out, "history.csv", &history_to_csv(&outcome.history))?;
    let val = evaluate_split(&outcome.params, &outcome.config, &ds, Split::Val, tc.batch_size)?;
    let test = evaluate_split(&outcome.params, &outcome.config, &ds, Split::Test, tc.batch_size)?;
    write(out, "metrics.csv", &metrics_csv(&[("val", val.metrics), ("test", test.metrics)]))?;
    let flops = flop_report(&outcome.config, ds.n_nodes());
    println!(
        "variant={} steps={} params={} epochs={} best_epoch={} val_mae={} test_rmse={} flops={}",
        tc.variant.as_str(),
        tc.steps,
        outcome.params.param_count(),
        outcome.history.len(),
        outcome.best_epoch,
        val.metrics.mae,
        test.metrics.rmse,
        flops.total()
    );
    Ok(())
}

fn load_checkpoint(cfg: &mut RunConfig) -> Result<(lteode::model::ModelConfig, ModelParams)> {
    let path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| DataError("no checkpoint given (use --checkpoint)".into()))?;
    let (model_cfg, params) =
        ModelParams::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    // window the data the way the checkpoint was trained
    cfg.window = model_cfg.window;
    cfg.horizon = model_cfg.horizon;
    Ok((model_cfg, params))
}

pub fn evaluate(cfg: &RunConfig, split: &str) -> Result<()> {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(DataError(format!("unknown split `{other}`")).into()),
    };
    let mut cfg = cfg.clone();
    let (model_cfg, params) = load_checkpoint(&mut cfg)?;
    let ds = load_dataset(&cfg)?;
    cfg.write_resolved()?;
    let eval = evaluate_split(&params, &model_cfg, &ds, split, cfg.batch_size)?;
    let name = format!("{split:?}").to_lowercase();
    write(&cfg.out, "metrics.csv", &metrics_csv(&[(&name, eval.metrics)]))?;
    println!(
        "split={name} mae={} rmse={} mape={}",
        eval.metrics.mae, eval.metrics.rmse, eval.metrics.mape
    );
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let base = cfg.model(ds.n_nodes(), ds.in_dim());
    let tc = cfg.train();
    cfg.write_resolved()?;
    let mut table = String::from(ablation_header());
    for variant in Variant::ALL {
        let (row, _) = ablate_variant(&ds, &base, &tc, variant, cfg.lambda)
            .with_context(|| format!("variant {}", variant.as_str()))?;
        table.push_str(&row.to_csv_line());
        // flush after every variant so partial results survive a failure
        write(&cfg.out, "ablation.csv", &table)?;
        println!(
            "variant={} params={} mae={} mape={} rmse={}",
            variant.as_str(),
            row.params,
            row.test.mae,
            row.test.mape,
            row.test.rmse
        );
    }
    Ok(())
}

pub fn mask_stats(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    let (model_cfg, params) = load_checkpoint(&mut cfg)?;
    let ds = load_dataset(&cfg)?;
    if ds.events.is_none() {
        eprintln!(
            "lteode: warning: no event log at {}; skipping the shock cross-reference",
            cfg.events_path().display()
        );
    }
    cfg.write_resolved()?;
    let eval = evaluate_split(&params, &model_cfg, &ds, Split::Test, cfg.batch_size)?;
    let m = &eval.masks;
    write(&cfg.out, "mask_histogram.csv", &histogram_to_csv(&m.all))?;
    let mut rows = vec![("all", &m.all)];
    if let (Some(s), Some(c)) = (&m.shock, &m.non_shock) {
        rows.push(("shock", s));
        rows.push(("non_shock", c));
    }
    write(&cfg.out, "mask_summary.csv", &summary_csv(&rows))?;
    for (name, s) in rows {
        println!("{name} count={} mean={} std={} p95={}", s.count, s.mean, s.std, s.p95);
    }
    Ok(())
}

pub fn nfe_report(cfg: &RunConfig, mode: Option<MaskMode>) -> Result<()> {
    let modes: Vec<MaskMode> = mode.map_or_else(|| MaskMode::ALL.to_vec(), |m| vec![m]);
    if cfg.steps_list.is_empty() {
        return Err(DataError("nfe-report needs at least one step count".into()).into());
    }
    cfg.write_resolved()?;
    let graph = SpatialGraph::ring_lattice(cfg.n_nodes, SYNTHETIC_RING_K)?;
    let mut out = String::from(
        "mask_mode,steps,streams,measured_nfe,expected_nfe,flops_solver,flops_mask_compensation,flops_fixed,flops_total\n",
    );
    let mut mismatches = Vec::new();
    for &mask_mode in &modes {
        for &steps in &cfg.steps_list {
            let mcfg = lteode::model::ModelConfig {
                steps,
                mask_mode,
                ..cfg.model(cfg.n_nodes, 1)
            };
            let params = ModelParams::init(&mcfg, cfg.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let n = cfg.n_nodes * cfg.window;
            let x = Tensor::new(
                &[1, cfg.n_nodes, cfg.window, 1],
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )?;
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let xv = tape.constant(x);
            let av = tape.constant(graph.normalize_adjacency());
            let nfe = NfeCounter::new();
            let fwd = forward(&mut tape, xv, av, &vars, &mcfg, &nfe)?;
            let expected = 2 * steps * NUM_STREAMS;
            let per_stream_ok = fwd
                .evolutions()
                .iter()
                .all(|e| e.traces.iter().map(|t| t.nfe).sum::<usize>() == 2 * steps);
            if nfe.get() != expected || !per_stream_ok {
                mismatches.push(format!("{} S={steps}: measured {} expected {expected}", mask_mode.as_str(), nfe.get()));
            }
            let f = flop_report(&mcfg, cfg.n_nodes);
            let _ = writeln!(
                out,
                "{},{steps},{NUM_STREAMS},{},{expected},{},{},{},{}",
                mask_mode.as_str(),
                nfe.get(),
                f.solver,
                f.mask_compensation,
                f.fixed,
                f.total()
            );
        }
    }
    write(&cfg.out, "nfe_report.csv", &out)?;
    print!("{out}");
    if !mismatches.is_empty() {
        return Err(InvariantError(format!("NFE mismatch: {}", mismatches.join("; "))).into());
    }
    Ok(())
}

pub fn intersect_demo(cfg: &RunConfig) -> Result<()> {
    let w = topology_witness(cfg.steps)?;
    cfg.write_resolved()?;
    write(&cfg.out, "trajectory_off_identical.csv", &w.off_identical.to_csv())?;
    write(&cfg.out, "trajectory_off_ordered.csv", &w.off_ordered.to_csv())?;
    write(&cfg.out, "trajectory_on.csv", &w.on_ordered.to_csv())?;
    println!("off identical max_gap={}", w.off_identical.max_gap());
    println!("off ordered crosses={}", w.off_ordered.crosses());
    println!("on ordered crosses={}", w.on_ordered.crosses());
    if w.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(InvariantError("topology witness failed".into()).into())
    }
}

pub fn collapse(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    if ds.events.is_none() {
        return Err(DataError(format!("collapse needs an event log at {}", cfg.events_path().display())).into());
    }
    let base = cfg.model(ds.n_nodes(), ds.in_dim());
    let mut tc = cfg.train();
    tc.variant = Variant::Full;
    tc.lambda = 0.0;
    cfg.write_resolved()?;
    let report = collapse_experiment(&ds, &base, &tc, &cfg.lambdas)?;
    let out = &cfg.out;
    write(out, "mask_histogram_full.csv", &histogram_to_csv(&report.full.masks.all))?;
    write(out, "history_full.csv", &history_to_csv(&report.full.history))?;
    for arm in &report.penalty {
        write(out, &format!("mask_histogram_penalty_{}.csv", arm.lambda), &histogram_to_csv(&arm.masks.all))?;
        write(out, &format!("history_penalty_{}.csv", arm.lambda), &history_to_csv(&arm.history))?;
    }
    let summary = report.summary();
    write(out, "collapse_summary.txt", &summary)?;
    print!("{summary}");
    if report.collapsed_arm().is_none() {
        return Err(InvariantError("no penalty weight collapsed the mask".into()).into());
    }
    Ok(())
}
