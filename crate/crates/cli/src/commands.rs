//! Subcommand implementations.

use crate::config::ExperimentConfig;
use crate::runner::{self, aggregate, execute_run, format_aggregate, load_dataset, RunResult};
use anyhow::{Context, Result};
use hetsim_core::graph::{homogeneity_score, metapath_graph, target_subgraph, MetapathSpec};
use hetsim_core::synthesizer::KnnSelection;
use hetsim_core::tape::Tape;
use hetsim_core::tensor::Tensor;
use hetsim_core::training::{Ablation, ModelParams, TrainContext};
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn ensure_out_dir(dir: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(dir.clone())
}

fn write_loss_curves(dir: &Path, results: &[RunResult]) -> Result<()> {
    for r in results {
        let name = format!("loss_{}_{}.csv", ablation_slug(r.ablation), r.seed);
        let mut out = String::from("epoch,l_o,l_s,l_g,total,val_macro_f1,val_micro_f1\n");
        for rec in &r.history {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                rec.epoch,
                rec.l_o,
                rec.l_s.map_or(String::new(), |v| v.to_string()),
                rec.l_g.map_or(String::new(), |v| v.to_string()),
                rec.total,
                rec.val_macro_f1,
                rec.val_micro_f1,
            ));
        }
        std::fs::write(dir.join(&name), out)?;
    }
    Ok(())
}

pub fn ablation_slug(a: Ablation) -> &'static str {
    match a {
        Ablation::Full => "full",
        Ablation::NoSynthesizer => "no_synthesizer",
        Ablation::NoMetaTarget => "no_meta_target",
    }
}

#[derive(Serialize)]
struct TrainDoc<'c> {
    config: &'c ExperimentConfig,
    runs: Vec<RunResult>,
    test_macro_f1: runner::Aggregate,
    test_micro_f1: runner::Aggregate,
    wall_time_s: f64,
}

/// `train`: corruption -> synthesis -> training -> evaluation over all seeds.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> Result<()> {
    let started = std::time::Instant::now();
    let clean = load_dataset(cfg)?;
    let results: Vec<RunResult> = cfg
        .run
        .seeds
        .par_iter()
        .map(|&seed| execute_run(&clean, cfg, cfg.noise.ratio, cfg.train.ablation, seed))
        .collect::<Result<_>>()?;

    let macro_agg = aggregate(&results.iter().map(|r| r.test_macro_f1).collect::<Vec<_>>());
    let micro_agg = aggregate(&results.iter().map(|r| r.test_micro_f1).collect::<Vec<_>>());

    println!("seed  best_epoch  val_macro  test_macro  test_micro  time_s");
    for r in &results {
        println!(
            "{:<4}  {:<10}  {:<9.4}  {:<10.4}  {:<10.4}  {:.1}",
            r.seed, r.best_epoch, r.val_macro_f1, r.test_macro_f1, r.test_micro_f1, r.wall_time_s
        );
    }
    println!(
        "test Macro-F1 {}   Micro-F1 {}",
        format_aggregate(&macro_agg),
        format_aggregate(&micro_agg)
    );

    if let Some(dir) = ensure_out_dir(out)? {
        let doc = TrainDoc {
            config: cfg,
            runs: results.clone(),
            test_macro_f1: macro_agg,
            test_micro_f1: micro_agg,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        write_json(&dir.join("report.json"), &doc)?;
        write_loss_curves(&dir, &results)?;
        println!("report written to {}", dir.join("report.json").display());
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    ratio: f64,
    ablation: Ablation,
    test_macro_f1: runner::Aggregate,
    test_micro_f1: runner::Aggregate,
}

#[derive(Serialize)]
struct SweepDoc<'c> {
    config: &'c ExperimentConfig,
    ratios: Vec<f64>,
    rows: Vec<SweepRow>,
    runs: Vec<RunResult>,
}

/// `sweep`: one train per (ratio, seed, ablation); corruption is shared per
/// seed across arms, never resampled between them.
pub fn cmd_sweep(cfg: &ExperimentConfig, ratios: &[f64], out: &Option<PathBuf>) -> Result<()> {
    for r in ratios {
        if !(0.0..1.0).contains(r) {
            anyhow::bail!("sweep ratio {r} outside [0, 1)");
        }
    }
    let clean = load_dataset(cfg)?;
    let ablations = if cfg.run.sweep_ablations.is_empty() {
        vec![cfg.train.ablation]
    } else {
        cfg.run.sweep_ablations.clone()
    };

    let mut jobs = Vec::new();
    for &ratio in ratios {
        for &ablation in &ablations {
            for &seed in &cfg.run.seeds {
                jobs.push((ratio, ablation, seed));
            }
        }
    }
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(ratio, ablation, seed)| execute_run(&clean, cfg, ratio, ablation, seed))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    println!("ratio  ablation         test_macro           test_micro");
    for &ratio in ratios {
        for &ablation in &ablations {
            let macros: Vec<f64> = runs
                .iter()
                .filter(|r| r.noise.ratio == ratio && r.ablation == ablation)
                .map(|r| r.test_macro_f1)
                .collect();
            let micros: Vec<f64> = runs
                .iter()
                .filter(|r| r.noise.ratio == ratio && r.ablation == ablation)
                .map(|r| r.test_micro_f1)
                .collect();
            let row = SweepRow {
                ratio,
                ablation,
                test_macro_f1: aggregate(&macros),
                test_micro_f1: aggregate(&micros),
            };
            println!(
                "{:<5.2}  {:<15}  {:<19}  {}",
                ratio,
                ablation_slug(ablation),
                format_aggregate(&row.test_macro_f1),
                format_aggregate(&row.test_micro_f1)
            );
            rows.push(row);
        }
    }

    if let Some(dir) = ensure_out_dir(out)? {
        // CSV for external plotting.
        let mut csv = String::from("ratio,ablation,seed,test_macro_f1,test_micro_f1\n");
        for r in &runs {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.noise.ratio,
                ablation_slug(r.ablation),
                r.seed,
                r.test_macro_f1,
                r.test_micro_f1
            ));
        }
        std::fs::write(dir.join("sweep.csv"), csv)?;
        let doc = SweepDoc { config: cfg, ratios: ratios.to_vec(), rows, runs };
        write_json(&dir.join("sweep.json"), &doc)?;
        println!("sweep written to {}", dir.join("sweep.json").display());
    }
    Ok(())
}

#[derive(Serialize)]
struct AblateDoc<'c> {
    config: &'c ExperimentConfig,
    rows: Vec<SweepRow>,
    paired_macro_delta_vs_full: Vec<(Ablation, f64)>,
    runs: Vec<RunResult>,
}

/// `ablate`: the three arms with shared seeds and shared corruption.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> Result<()> {
    let clean = load_dataset(cfg)?;
    let arms = [Ablation::Full, Ablation::NoSynthesizer, Ablation::NoMetaTarget];

    let mut jobs = Vec::new();
    for &ablation in &arms {
        for &seed in &cfg.run.seeds {
            jobs.push((ablation, seed));
        }
    }
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(ablation, seed)| execute_run(&clean, cfg, cfg.noise.ratio, ablation, seed))
        .collect::<Result<_>>()?;

    let arm_values = |ablation: Ablation| -> Vec<f64> {
        cfg.run
            .seeds
            .iter()
            .map(|&s| {
                runs.iter()
                    .find(|r| r.ablation == ablation && r.seed == s)
                    .map(|r| r.test_macro_f1)
                    .expect("run present")
            })
            .collect()
    };
    let full = arm_values(Ablation::Full);

    let mut rows = Vec::new();
    let mut deltas = Vec::new();
    println!("ablation         test_macro           test_micro           paired_delta_vs_full");
    for &ablation in &arms {
        let macros = arm_values(ablation);
        let micros: Vec<f64> = cfg
            .run
            .seeds
            .iter()
            .map(|&s| {
                runs.iter()
                    .find(|r| r.ablation == ablation && r.seed == s)
                    .map(|r| r.test_micro_f1)
                    .expect("run present")
            })
            .collect();
        let paired: Vec<f64> = full.iter().zip(&macros).map(|(f, a)| f - a).collect();
        let delta = aggregate(&paired);
        println!(
            "{:<15}  {:<19}  {:<19}  {}",
            ablation_slug(ablation),
            format_aggregate(&aggregate(&macros)),
            format_aggregate(&aggregate(&micros)),
            format_aggregate(&delta),
        );
        deltas.push((ablation, delta.mean));
        rows.push(SweepRow {
            ratio: cfg.noise.ratio,
            ablation,
            test_macro_f1: aggregate(&macros),
            test_micro_f1: aggregate(&micros),
        });
    }

    if let Some(dir) = ensure_out_dir(out)? {
        let doc = AblateDoc { config: cfg, rows, paired_macro_delta_vs_full: deltas, runs };
        write_json(&dir.join("ablate.json"), &doc)?;
        println!("ablation report written to {}", dir.join("ablate.json").display());
    }
    Ok(())
}

#[derive(Serialize)]
struct HomogeneityRow {
    graph: String,
    beta: f64,
}

#[derive(Serialize)]
struct HomogeneityDoc<'c> {
    config: &'c ExperimentConfig,
    seed: u64,
    rows: Vec<HomogeneityRow>,
}

/// `homogeneity`: beta for each configured metapath graph of the corrupted
/// structure, side by side with beta of the trained synthesizer's target
/// graph. Uses the first run seed.
pub fn cmd_homogeneity(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> Result<()> {
    let clean = load_dataset(cfg)?;
    let seed = cfg.run.seeds[0];
    let (noised, _) = runner::corrupt(&clean, cfg, cfg.noise.ratio, seed)?;

    let labels: Vec<usize> = labeled_target_classes(&noised)?;
    let labeled: Vec<usize> = labeled_target_indices(&noised);

    let mut rows = Vec::new();
    for (i, steps) in cfg.train.metapaths.iter().enumerate() {
        let spec = MetapathSpec::new(steps.clone());
        let m = metapath_graph(&noised, &spec)?;
        let restricted = restrict(&m, &labeled);
        let beta = homogeneity_score(&restricted, &labels)?;
        rows.push(HomogeneityRow { graph: format!("metapath_{i} {steps:?}"), beta });
    }

    // Train per config, then synthesize once with the trained weights.
    let kind = cfg.synthesizer_kind(&clean);
    let mut model = ModelParams::init(
        &noised,
        cfg.synthesizer.feature_size,
        kind,
        cfg.synthesizer.k,
        cfg.encoder_config(),
        cfg.run.init_seed.wrapping_add(seed),
    )?;
    let train_cfg = cfg.to_train_config(cfg.train.ablation, seed);
    hetsim_core::training::train(&noised, &train_cfg, &mut model)?;

    let ctx = TrainContext::new(&noised, &train_cfg, kind)?;
    let mut tape = Tape::<f64>::new();
    let proj_ids = model.projection.register(&mut tape);
    let synth_ids = model.synthesizer.register(&mut tape);
    let synthesized = hetsim_core::synthesizer::synthesize(
        &mut tape,
        &noised,
        &model.projection,
        &proj_ids,
        &model.synthesizer,
        &synth_ids,
        ctx.propagation.as_ref(),
        model.encoder.config.slope,
        match cfg.selection(seed) {
            KnnSelection::Exact => KnnSelection::Exact,
            b => b,
        },
        None,
    )?;
    let a_theta = tape.value(synthesized.a_theta).clone();
    let target_block = target_subgraph(&a_theta, &noised)?;
    let binary = target_block.map(|v| if v != 0.0 { 1.0 } else { 0.0 });
    let restricted = restrict(&binary, &labeled);
    let beta = homogeneity_score(&restricted, &labels)?;
    rows.push(HomogeneityRow { graph: "target_graph".into(), beta });

    println!("graph                     beta");
    for row in &rows {
        println!("{:<25} {:.4}", row.graph, row.beta);
    }

    if let Some(dir) = ensure_out_dir(out)? {
        let doc = HomogeneityDoc { config: cfg, seed, rows };
        write_json(&dir.join("homogeneity.json"), &doc)?;
        println!("homogeneity report written to {}", dir.join("homogeneity.json").display());
    }
    Ok(())
}

fn labeled_target_indices(g: &hetsim_core::graph::HeteroGraph<f64>) -> Vec<usize> {
    (0..g.n_target()).filter(|&i| g.labels.is_labeled(i)).collect()
}

fn labeled_target_classes(g: &hetsim_core::graph::HeteroGraph<f64>) -> Result<Vec<usize>> {
    let single = g.labels.single()?;
    Ok(single.iter().filter_map(|l| *l).collect())
}

/// Restriction of a target-sized matrix to the given (labeled) rows/cols.
fn restrict(m: &Tensor<f64>, keep: &[usize]) -> Tensor<f64> {
    let mut out = Tensor::zeros(keep.len(), keep.len());
    for (ro, &ri) in keep.iter().enumerate() {
        for (co, &ci) in keep.iter().enumerate() {
            out.set(ro, co, m.get(ri, ci));
        }
    }
    out
}

/// `gen-synthetic`: generate the configured synthetic graph and write it as
/// a JSON manifest.
pub fn cmd_gen_synthetic(cfg: &ExperimentConfig, out_file: &Path) -> Result<()> {
    let spec = cfg
        .dataset
        .synthetic
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("config has no dataset.synthetic section"))?;
    let g: hetsim_core::graph::HeteroGraph<f64> = hetsim_core::synthetic::generate(spec);
    hetsim_core::manifest::save_manifest(&g, out_file)?;
    println!(
        "wrote {} ({} nodes, {} edges, {} classes)",
        out_file.display(),
        g.n_nodes(),
        g.n_edges(),
        g.labels.classes()
    );
    Ok(())
}

/// `validate-data`: load, validate, and describe the configured dataset.
pub fn cmd_validate_data(cfg: &ExperimentConfig) -> Result<()> {
    let g = load_dataset(cfg)?;
    g.validate()?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "nodes: {}", g.n_nodes())?;
    writeln!(out, "node types: {}", g.n_types())?;
    for t in 0..g.n_types() {
        writeln!(
            out,
            "  {} ({}): {} nodes, feature dim {}",
            t,
            g.node_type_names[t],
            g.type_counts[t],
            g.features[t].cols()
        )?;
    }
    writeln!(out, "edges: {}", g.n_edges())?;
    writeln!(out, "edge types: {}", g.edge_signatures.len())?;
    writeln!(out, "target type: {} ({})", g.target_type, g.node_type_names[g.target_type])?;
    writeln!(out, "classes: {} ({})", g.labels.classes(), if g.labels.is_multi() { "multi-label" } else { "single-label" })?;
    writeln!(
        out,
        "splits: train {} / val {} / test {}",
        g.splits.train.len(),
        g.splits.val.len(),
        g.splits.test.len()
    )?;
    writeln!(out, "feature regime: {}", g.feature_regime.as_u8())?;
    writeln!(out, "ok")?;
    Ok(())
}
