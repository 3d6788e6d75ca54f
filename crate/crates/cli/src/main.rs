use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trax_cli::commands::{self, TrackOutput};
use trax_cli::config::{load_json, seed_override, SimulateConfig};
use trax_cli::pipeline::{apply_flags, Scorer};
use trax_cli::{io, CliError, RunConfig};
use trax_core::linkers::Solver;
use trax_core::sim::Split;
use trax_core::transformer::checkpoint;
use trax_core::Model32;

#[derive(Parser)]
#[command(name = "trax", version, about = "Tracking of dividing objects by learned association")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        /// JSON simulate config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Regenerate the dataset described by an existing manifest.
        #[arg(long, conflicts_with_all = ["config", "preset", "videos", "seed", "ratios"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train, val and test fractions, e.g. `0.8,0.1,0.1`.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset's train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score and link detections.
    Track {
        #[arg(long, conflicts_with = "distance")]
        checkpoint: Option<PathBuf>,
        /// Score by Euclidean distance instead of a model.
        #[arg(long)]
        distance: bool,
        /// A single detections CSV.
        #[arg(long, conflicts_with = "data")]
        detections: Option<PathBuf>,
        /// A dataset directory; every video of `--split` is tracked.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        linker: Option<Solver>,
        #[arg(long)]
        dist_max: Option<f64>,
        /// Also write the aggregated score table.
        #[arg(long)]
        scores: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare predictions with ground truth.
    Eval {
        #[arg(long)]
        pred_edges: Option<PathBuf>,
        #[arg(long)]
        pred_detections: Option<PathBuf>,
        #[arg(long)]
        gt_lineage: Option<PathBuf>,
        #[arg(long)]
        gt_detections: Option<PathBuf>,
        /// JSON report path (single-video mode).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        error_tree: Option<PathBuf>,
        /// Directory written by `track --data` (table mode).
        #[arg(long, requires = "data")]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Table output path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and evaluate an ablation sweep.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Convert labeled 16-bit PGM frames into a detections CSV.
    Regionprops {
        /// One label image per frame, in frame order.
        #[arg(long, num_args = 1.., required = true)]
        labels: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        raw: Option<Vec<PathBuf>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    points_only: bool,
    #[arg(long)]
    no_parental_softmax: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut run = match &self.config {
            Some(p) => load_json(p)?,
            None => RunConfig::default(),
        };
        apply_flags(&mut run, self.points_only, self.no_parental_softmax);
        if let Some(seed) = seed_override()? {
            run.train.seed = seed;
        }
        run.validate()?;
        Ok(run)
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(CliError::usage(format!("unknown split {s:?} (train, val, test)"))),
    }
}

fn load_model(path: &Path) -> Result<Model32, CliError> {
    Ok(checkpoint::load::<f32>(path)?.0)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            manifest: Some(manifest),
            out,
            ..
        } => {
            let m = commands::regenerate(&manifest, &out)?;
            log::info!("regenerated {} videos in {}", m.videos.len(), out.display());
        }
        Command::Simulate {
            config,
            manifest: None,
            preset,
            videos,
            seed,
            ratios,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => load_json::<SimulateConfig>(&p)?,
                None => SimulateConfig::default(),
            };
            if let Some(p) = preset {
                cfg.preset = p;
                cfg.config = None;
            }
            if let Some(v) = videos {
                cfg.videos = v;
            }
            if let Some(s) = seed_override()?.or(seed) {
                cfg.seed = s;
            }
            if let Some(r) = ratios {
                cfg.ratios = r
                    .try_into()
                    .map_err(|_| CliError::usage("--ratios takes three comma-separated fractions"))?;
            }
            let m = commands::simulate(&cfg, &out)?;
            log::info!("wrote {} videos to {}", m.videos.len(), out.display());
        }
        Command::Train { data, out, run, steps } => {
            let mut run = run.load()?;
            if let Some(s) = steps {
                run.train.steps = s;
            }
            let (_, log) = commands::train(&run, &data, &out)?;
            if let Some(last) = log.last() {
                log::info!("final loss {:.5}", last.loss);
            }
        }
        Command::Track {
            checkpoint,
            distance,
            detections,
            data,
            split,
            out,
            linker,
            dist_max,
            scores,
            run,
        } => {
            let mut run = run.load()?;
            if let Some(l) = linker {
                run.linker.algorithm = l;
            }
            if dist_max.is_some() {
                run.data.dist_max = dist_max;
            }
            let model = match (&checkpoint, distance) {
                (Some(p), _) => Some(load_model(p)?),
                (None, true) => None,
                (None, false) => return Err(CliError::usage("pass --checkpoint or --distance")),
            };
            let scorer = match &model {
                Some(m) => Scorer::Model(m),
                None => Scorer::Distance,
            };
            match (detections, data) {
                (Some(path), None) => {
                    let table = io::read_detections(&path)?;
                    if let (Some(m), Some(col)) = (&model, table.missing_feature()) {
                        if m.config.features == trax_core::tokenizer::FeatureMode::Full {
                            return Err(CliError::usage(format!(
                                "{}: missing feature column \"{col}\" required by the checkpoint",
                                path.display()
                            )));
                        }
                    }
                    let dm = commands::resolve_dist_max(&run, None)?;
                    let TrackOutput { graph, solver } =
                        commands::track(&run, &scorer, &table.detections, dm, &out, scores)?;
                    log::info!("{solver}: {} edges", graph.num_edges());
                }
                (None, Some(dir)) => {
                    let manifest = commands::load_manifest(&dir)?;
                    let dm = commands::resolve_dist_max(&run, Some(&manifest))?;
                    for v in commands::load_split(&dir, &manifest, parse_split(&split)?)? {
                        commands::track(&run, &scorer, &v.detections, dm, &out.join(&v.name), scores)?;
                    }
                }
                _ => return Err(CliError::usage("pass exactly one of --detections or --data")),
            }
        }
        Command::Eval {
            pred_edges,
            pred_detections,
            gt_lineage,
            gt_detections,
            report,
            error_tree,
            pred_dir,
            data,
            split,
            out,
            run,
        } => {
            let run = run.load()?;
            if let (Some(pred_dir), Some(data)) = (pred_dir, data) {
                let manifest = commands::load_manifest(&data)?;
                let mut rows = Vec::new();
                for v in commands::load_split(&data, &manifest, parse_split(&split)?)? {
                    let dir = pred_dir.join(&v.name);
                    let pred = commands::read_prediction(&dir.join("edges.csv"), &v.detections)?;
                    let ev = commands::eval(&run, &pred, &v.detections, &v, Some(&dir.join("report.json")), None)?;
                    rows.push((v.name.clone(), ev.report));
                }
                match out {
                    Some(p) => commands::write_table(&rows, io::create(&p)?)?,
                    None => commands::write_table(&rows, std::io::stdout().lock())?,
                }
                return Ok(());
            }
            let need = |p: Option<PathBuf>, flag: &str| p.ok_or_else(|| CliError::usage(format!("missing --{flag}")));
            let pred_detections = need(pred_detections, "pred-detections")?;
            let gt_detections = need(gt_detections, "gt-detections")?;
            let gt_lineage = need(gt_lineage, "gt-lineage")?;
            let pred_edges = need(pred_edges, "pred-edges")?;
            let pd = io::read_detections(&pred_detections)?.detections;
            let pred = commands::read_prediction(&pred_edges, &pd)?;
            let gt = trax_cli::pipeline::Video {
                name: gt_detections.display().to_string(),
                detections: io::read_detections(&gt_detections)?.detections,
                gt: io::read_lineage(&gt_lineage)?,
            };
            let ev = commands::eval(&run, &pred, &pd, &gt, report.as_deref(), error_tree.as_deref())?;
            if report.is_none() {
                println!("{}", serde_json::to_string_pretty(&ev.report)?);
            }
        }
        Command::Ablate {
            suite,
            data,
            seeds,
            out,
            run,
        } => {
            let run = run.load()?;
            let rows = commands::ablate(&suite, &run, &data, &seeds)?;
            commands::write_ablation(&rows, io::create(&out)?)?;
        }
        Command::Regionprops { labels, raw, out } => {
            let dets = trax_cli::regionprops::regionprops(&labels, raw.as_deref())?;
            io::write_detections(&dets, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
