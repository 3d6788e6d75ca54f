//! The subcommands, as library functions.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use trax_core::linkers::Solver;
use trax_core::metrics::{write_error_tree, AogmReport, Evaluation};
use trax_core::sim::{generate, plan_dataset, Manifest, Split};
use trax_core::transformer::checkpoint;
use trax_core::transformer::train::StepLog;
use trax_core::{Detection, LineageGraph, Model32};

use crate::config::{RunConfig, SimulateConfig};
use crate::error::CliError;
use crate::io;
use crate::pipeline::{self, Scorer, Video};

pub const MANIFEST: &str = "manifest.json";

pub fn detections_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.detections.csv"))
}

pub fn lineage_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.lineage.csv"))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut w = io::create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Generates a dataset: per-video detection and lineage CSVs plus the
/// manifest.
pub fn simulate(cfg: &SimulateConfig, out: &Path) -> Result<Manifest, CliError> {
    let base = cfg.sim_config()?;
    let manifest = plan_dataset(&vec![base; cfg.videos], cfg.ratios, cfg.seed)?;
    write_dataset(&manifest, out)?;
    Ok(manifest)
}

/// Regenerates the dataset a manifest describes.
pub fn regenerate(manifest_path: &Path, out: &Path) -> Result<Manifest, CliError> {
    let manifest: Manifest = crate::config::load_json(manifest_path)?;
    write_dataset(&manifest, out)?;
    Ok(manifest)
}

pub fn write_dataset(manifest: &Manifest, out: &Path) -> Result<(), CliError> {
    let videos = generate(manifest)?;
    fs::create_dir_all(out)?;
    for (entry, v) in manifest.videos.iter().zip(&videos) {
        io::write_detections(&v.detections, &detections_path(out, &entry.name))?;
        io::write_lineage(&v.gt, &lineage_path(out, &entry.name))?;
    }
    write_json(manifest, &out.join(MANIFEST))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, CliError> {
    crate::config::load_json(&dir.join(MANIFEST))
}

pub fn load_video(dir: &Path, name: &str) -> Result<Video, CliError> {
    let detections = io::read_detections(&detections_path(dir, name))?.detections;
    let gt = io::read_lineage(&lineage_path(dir, name))?;
    Ok(Video {
        name: name.to_string(),
        detections,
        gt,
    })
}

pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Video>, CliError> {
    manifest.split(split).map(|(_, e)| load_video(dir, &e.name)).collect()
}

/// `dist_max` from the config, else from the dataset manifest.
pub fn resolve_dist_max(run: &RunConfig, manifest: Option<&Manifest>) -> Result<f64, CliError> {
    if let Some(d) = run.data.dist_max {
        return Ok(d);
    }
    manifest
        .and_then(|m| m.videos.first())
        .map(|e| e.config.dist_max)
        .ok_or_else(|| CliError::usage("data.dist_max is required (set it in the run config or pass --dist-max)"))
}

pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

fn write_loss_log(log: &[StepLog], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(io::create(path)?);
    w.write_record(["step", "train_loss", "val_loss"])?;
    for l in log {
        let val = l.val_loss.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([l.step.to_string(), l.loss.to_string(), val])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains on the train split (validating on val) and writes the checkpoint
/// and its loss log.
pub fn train(run: &RunConfig, data: &Path, out: &Path) -> Result<(Model32, Vec<StepLog>), CliError> {
    let manifest = load_manifest(data)?;
    let train_set = load_split(data, &manifest, Split::Train)?;
    if train_set.is_empty() {
        return Err(CliError::usage("dataset has no training videos"));
    }
    let val_set = load_split(data, &manifest, Split::Val)?;
    let (model, log) = pipeline::train_model(run, &train_set, &val_set)?;
    let meta = serde_json::json!({ "train": run.train, "dataset_seed": manifest.seed });
    checkpoint::save(&model, meta, out)?;
    write_loss_log(&log, &loss_log_path(out))?;
    Ok((model, log))
}

pub struct TrackOutput {
    pub graph: LineageGraph,
    pub solver: Solver,
}

/// `solution.json`: which linker produced the edges.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SolutionSummary {
    pub solver: Solver,
    pub objective: Option<f64>,
    pub nodes: usize,
    pub edges: usize,
}

/// Scores, links and writes `edges.csv`, `tracks.csv`, `solution.json` and
/// optionally `scores.csv` into `out`.
pub fn track(
    run: &RunConfig,
    scorer: &Scorer<'_>,
    dets: &[Detection],
    dist_max: f64,
    out: &Path,
    write_scores: bool,
) -> Result<TrackOutput, CliError> {
    fs::create_dir_all(out)?;
    let solver = run.linker.algorithm;
    let table = pipeline::score(scorer, dets, run, dist_max)?;
    if write_scores {
        table.write_csv(io::create(&out.join("scores.csv"))?)?;
    }
    let cand = pipeline::candidates(&table, dets, run, dist_max);
    let sol = pipeline::link(&cand, run, solver)?;
    io::write_edges(&sol.graph, &out.join("edges.csv"))?;
    io::write_tracks(&sol.tracks(&io::frames_of(dets)), &out.join("tracks.csv"))?;
    let summary = SolutionSummary {
        solver,
        objective: sol.objective,
        nodes: sol.graph.num_nodes(),
        edges: sol.graph.num_edges(),
    };
    write_json(&summary, &out.join("solution.json"))?;
    Ok(TrackOutput {
        graph: sol.graph,
        solver,
    })
}

/// Reads a predicted solution back: the detections are its nodes.
pub fn read_prediction(edges: &Path, dets: &[Detection]) -> Result<LineageGraph, CliError> {
    io::read_edges(edges, dets.iter().map(|d| d.id))
}

/// Evaluates one prediction and writes the JSON report and error tree.
pub fn eval(
    run: &RunConfig,
    pred: &LineageGraph,
    pred_dets: &[Detection],
    gt: &Video,
    report: Option<&Path>,
    error_tree: Option<&Path>,
) -> Result<Evaluation, CliError> {
    let ev = pipeline::evaluate_video(pred, pred_dets, gt, run)?;
    if ev.report.empty_gt {
        log::warn!("ground truth of {} is empty; TRA reported as 1", gt.name);
    }
    if let Some(p) = report {
        write_json(&ev.report, p)?;
    }
    if let Some(p) = error_tree {
        let mut w = io::create(p)?;
        write_error_tree(&ev.edges, &mut w)?;
        w.flush()?;
    }
    Ok(ev)
}

/// Per-video rows, then their sum and mean. The TRA and F1 columns of the
/// sum row are sums of per-video values.
pub fn write_table<W: Write>(rows: &[(String, AogmReport)], w: W) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["video", "aogm", "tra", "aogm_plus", "fp_edges", "fn_edges", "fp_divs", "fn_divs", "div_f1"])?;
    let row = |name: &str, r: [f64; 8]| {
        let mut v = vec![name.to_string()];
        v.extend(r.iter().map(|x| x.to_string()));
        v
    };
    let fields = |r: &AogmReport| {
        [
            r.aogm,
            r.tra,
            r.aogm_plus,
            r.fp_edges as f64,
            r.fn_edges as f64,
            r.fp_divs as f64,
            r.fn_divs as f64,
            r.div_f1,
        ]
    };
    let mut sum = [0.0; 8];
    for (name, r) in rows {
        let f = fields(r);
        for (s, x) in sum.iter_mut().zip(f) {
            *s += x;
        }
        wtr.write_record(row(name, f))?;
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        wtr.write_record(row("total", sum))?;
        wtr.write_record(row("mean", sum.map(|s| s / n)))?;
    }
    wtr.flush()?;
    Ok(())
}

pub const SUITES: [&str; 3] = ["softmax", "window", "layers"];

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub suite: String,
    pub variant: String,
    pub seed: u64,
    pub linker: Solver,
    pub mean_aogm: f64,
    pub mean_tra: f64,
}

fn variants(suite: &str, base: &RunConfig) -> Result<Vec<(String, RunConfig)>, CliError> {
    let mut out = Vec::new();
    match suite {
        "softmax" => {
            for (name, off) in [("parental", false), ("sigmoid", true)] {
                let mut r = base.clone();
                pipeline::apply_flags(&mut r, false, off);
                out.push((name.to_string(), r));
            }
        }
        "window" => {
            for s in [2, 3, 4, 6] {
                let mut r = base.clone();
                r.model.window = s;
                out.push((format!("s={s}"), r));
            }
        }
        "layers" => {
            for l in [0, 1, 3, 6] {
                let mut r = base.clone();
                r.model.n_layers = l;
                out.push((format!("L={l}"), r));
            }
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown suite {other:?}; available suites: {}",
                SUITES.join(", ")
            )))
        }
    }
    Ok(out)
}

/// Trains every variant of `suite` for each seed and evaluates on the test
/// split with greedy and ILP linking.
pub fn ablate(suite: &str, base: &RunConfig, data: &Path, seeds: &[u64]) -> Result<Vec<AblationRow>, CliError> {
    let runs = variants(suite, base)?;
    let manifest = load_manifest(data)?;
    let train_set = load_split(data, &manifest, Split::Train)?;
    let val_set = load_split(data, &manifest, Split::Val)?;
    let test_set = load_split(data, &manifest, Split::Test)?;
    let dist_max = resolve_dist_max(base, Some(&manifest))?;
    let mut rows = Vec::new();
    for (variant, run) in runs {
        for &seed in seeds {
            let mut run = run.clone();
            run.train.seed = seed;
            let (model, _) = pipeline::train_model(&run, &train_set, &val_set)?;
            let scores = pipeline::mean_scores(&Scorer::Model(&model), &test_set, &run, dist_max, &[Solver::Greedy, Solver::Ilp])?;
            for (linker, mean_aogm, mean_tra) in scores {
                log::info!("{suite} {variant} seed {seed} {linker}: AOGM {mean_aogm:.2}");
                rows.push(AblationRow {
                    suite: suite.to_string(),
                    variant: variant.clone(),
                    seed,
                    linker,
                    mean_aogm,
                    mean_tra,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation<W: Write>(rows: &[AblationRow], w: W) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
