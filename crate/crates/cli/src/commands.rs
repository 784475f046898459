//! Implementations behind each CLI subcommand. Every command returns the
//! JSON value it prints so tests can call them in process.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use gtsnt_core::checkpoint::{load_checkpoint, save_checkpoint};
use gtsnt_core::graph::Graph;
use gtsnt_core::model::{finite_difference_check, ModelConfig, ModelParams};
use gtsnt_core::sparse::{build_propagation_operator, CsrMatrix};
use gtsnt_core::tokenizer::{codebook_usage, latent_space_size, UNASSIGNED};
use gtsnt_core::train::{evaluate, train, TrainConfig};

use crate::bench::{bench_latency, run_scaling_suite, scaling_csv, ScaleSettings};
use crate::config::{load_config, pin_threads, FileConfig};
use crate::efficiency::{count_ops, estimate_energy, peak_bytes_estimate, CountInputs};

fn prepare(config_path: &Path) -> Result<(FileConfig, Graph, ModelConfig)> {
    let cfg = load_config(config_path)?;
    pin_threads(cfg.bench.threads.unwrap_or(0));
    let graph = cfg.dataset.load()?;
    let model_cfg = cfg.model.to_model_config(&graph)?;
    Ok((cfg, graph, model_cfg))
}

fn write_out(path: Option<&Path>, contents: &str) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, contents).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn run_train(
    config_path: &Path,
    out: Option<&Path>,
    history_path: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<Value> {
    let (cfg, graph, model_cfg) = prepare(config_path)?;
    let mut tcfg: TrainConfig = cfg.train.to_train_config();
    if let Some(s) = seed_override {
        tcfg.seed = s;
    }
    let outcome = train(&graph, &model_cfg, &tcfg)?;

    if let Some(p) = history_path {
        let mut csv =
            String::from("epoch,train_loss,train_acc,val_acc,test_acc,codebook_sizes\n");
        for e in &outcome.history {
            let sizes = e
                .codebook_sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join("|");
            csv.push_str(&format!(
                "{},{:.6},{:.4},{:.4},{:.4},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_acc, e.test_acc, sizes
            ));
        }
        write_out(Some(p), &csv)?;
    }
    if let Some(p) = out {
        save_checkpoint(p, &model_cfg, &outcome.params)?;
    }

    Ok(json!({
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_acc": outcome.best_val_acc,
        "test_acc": outcome.test_acc,
        "codebook_sizes": outcome.history[outcome.best_epoch].codebook_sizes,
        "num_params": outcome.params.num_params(),
    }))
}

pub fn run_eval(config_path: &Path, checkpoint_path: &Path) -> Result<Value> {
    let cfg = load_config(config_path)?;
    pin_threads(cfg.bench.threads.unwrap_or(0));
    let graph = cfg.dataset.load()?;
    let (model_cfg, params) = load_checkpoint(checkpoint_path)?;
    let report = evaluate(&graph, &params, &model_cfg)?;
    Ok(serde_json::to_value(report)?)
}

pub fn run_tokenize(config_path: &Path, checkpoint: Option<&Path>) -> Result<Value> {
    let (cfg, graph, model_cfg) = prepare(config_path)?;
    let params = match checkpoint {
        Some(p) => load_checkpoint(p)?.1,
        None => ModelParams::init(&model_cfg, graph.num_nodes(), cfg.train.to_train_config().seed),
    };
    let p = build_propagation_operator(&graph.adjacency);
    let x = CsrMatrix::from_dense(&graph.features.view());
    let fwd = gtsnt_core::model::model_forward(
        &p,
        &x,
        &params,
        &model_cfg,
        gtsnt_core::neuron::SpikeMode::Hard,
        None,
    )?;
    let capacity = latent_space_size(&model_cfg.tokenizer)?;
    let layers: Vec<Value> = fwd
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut histogram: BTreeMap<u32, u32> = BTreeMap::new();
            for &pop in &l.codebook.populations {
                *histogram.entry(pop).or_insert(0) += 1;
            }
            let unassigned = l
                .codebook
                .assignment
                .iter()
                .filter(|&&a| a == UNASSIGNED)
                .count();
            json!({
                "layer": i,
                "codebook_size": l.codebook.size(),
                "capacity": capacity,
                "usage": codebook_usage(&l.codebook, capacity),
                "unassigned_nodes": unassigned,
                "population_histogram": histogram,
            })
        })
        .collect();
    Ok(json!({
        "num_nodes": graph.num_nodes(),
        "t_steps": model_cfg.tokenizer.t_steps,
        "descriptor_dim": model_cfg.tokenizer.descriptor_dim,
        "b_max": model_cfg.tokenizer.b_max,
        "layers": layers,
    }))
}

pub fn run_bench(config_path: &Path, checkpoint: Option<&Path>) -> Result<Value> {
    let (cfg, graph, model_cfg) = prepare(config_path)?;
    let params = match checkpoint {
        Some(p) => load_checkpoint(p)?.1,
        None => ModelParams::init(&model_cfg, graph.num_nodes(), cfg.train.to_train_config().seed),
    };
    let p = build_propagation_operator(&graph.adjacency);
    let x = CsrMatrix::from_dense(&graph.features.view());
    let latency = bench_latency(&p, &x, &params, &model_cfg, cfg.bench.repeats())?;

    let inputs = CountInputs {
        num_nodes: graph.num_nodes(),
        nnz_operator: p.matrix.nnz(),
        nnz_features: x.nnz(),
    };
    let ops = count_ops(&model_cfg, inputs, &latency.codebook_sizes);
    let mac_pj = cfg.bench.energy_mac_pj.unwrap_or(4.6);
    let ac_pj = cfg.bench.energy_ac_pj.unwrap_or(0.9);
    let energy = estimate_energy(&ops, mac_pj, ac_pj);
    let max_b = latency.codebook_sizes.iter().copied().max().unwrap_or(1);
    let peak = peak_bytes_estimate(&model_cfg, graph.num_nodes(), p.matrix.nnz(), max_b);

    Ok(json!({
        "num_nodes": graph.num_nodes(),
        "num_directed_edges": graph.num_directed_edges(),
        "latency": latency,
        "ops": ops,
        "energy": {
            "mac_pj": mac_pj,
            "ac_pj": ac_pj,
            "total_joules": energy,
        },
        "peak_bytes_estimate": peak,
    }))
}

pub fn run_scale(config_path: &Path, csv_out: Option<&Path>) -> Result<Value> {
    let cfg = load_config(config_path)?;
    pin_threads(cfg.bench.threads.unwrap_or(0));
    let defaults = ScaleSettings::default();
    let settings = ScaleSettings {
        factored_exponents: cfg.bench.scale_exponents(),
        dense_exponents: cfg.bench.dense_exponents(),
        codebook_size: cfg.bench.scale_codebook.unwrap_or(defaults.codebook_size),
        hidden_dim: cfg.bench.scale_hidden.unwrap_or(defaults.hidden_dim),
        descriptor_dim: defaults.descriptor_dim,
        repeats: cfg.bench.repeats(),
        seed: cfg.bench.seed.unwrap_or(0),
    };
    let report = run_scaling_suite(&settings)?;
    write_out(csv_out, &scaling_csv(&report))?;
    Ok(serde_json::to_value(report)?)
}

/// Returns `(json, all_passed)`; the caller maps failure to exit code 3.
pub fn run_gradcheck(
    config_path: &Path,
    num_graphs: usize,
    probes: usize,
    tol: f64,
) -> Result<(Value, bool)> {
    let cfg = load_config(config_path)?;
    pin_threads(cfg.bench.threads.unwrap_or(0));
    let base_seed = cfg.dataset.seed.unwrap_or(0);
    let mut reports = Vec::new();
    let mut all_passed = true;
    for g in 0..num_graphs {
        let graph = gtsnt_core::graph::synthesize_graph(
            cfg.dataset.nodes.unwrap_or(12),
            cfg.dataset.avg_degree.unwrap_or(4.0),
            cfg.dataset.features.unwrap_or(6),
            cfg.dataset.classes.unwrap_or(3),
            base_seed + g as u64,
        );
        let model_cfg = cfg.model.to_model_config(&graph)?;
        let params = ModelParams::init(&model_cfg, graph.num_nodes(), base_seed + 100 + g as u64);
        let p = build_propagation_operator(&graph.adjacency);
        let x = CsrMatrix::from_dense(&graph.features.view());
        let mask: Vec<u32> = (0..graph.num_nodes() as u32).collect();
        let report = finite_difference_check(
            &p,
            &x,
            &params,
            &model_cfg,
            &graph.labels,
            &mask,
            probes,
            1e-5,
            tol,
            base_seed + 200 + g as u64,
        )?;
        all_passed &= report.passed;
        reports.push(json!({
            "graph_seed": base_seed + g as u64,
            "num_nodes": graph.num_nodes(),
            "report": report,
        }));
    }
    Ok((
        json!({
            "tolerance": tol,
            "probes_per_graph": probes,
            "graphs": reports,
            "passed": all_passed,
        }),
        all_passed,
    ))
}
