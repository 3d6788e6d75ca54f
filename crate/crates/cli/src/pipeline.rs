//! Train, score, link and evaluate, shared by the commands.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trax_core::aggregator::{build_candidate_graph, distance_scores, infer_video, CandidateGraph, ScoreTable};
use trax_core::linkers::{link_greedy, link_ilp, link_lap, Solver, TrackingSolution};
use trax_core::metrics::{evaluate, EvalInput, Evaluation};
use trax_core::tokenizer::{FeatureMode, FeatureNorm};
use trax_core::transformer::train::{tiled_windows, train, StepLog, TrainWindow};
use trax_core::transformer::Model;
use trax_core::{Detection, LineageGraph, Model32};

use crate::config::RunConfig;
use crate::error::CliError;

/// One video with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub name: String,
    pub detections: Vec<Detection>,
    pub gt: LineageGraph,
}

/// Applies the ablation switches to a run config.
pub fn apply_flags(run: &mut RunConfig, points_only: bool, no_parental_softmax: bool) {
    if points_only {
        run.model.features = FeatureMode::PointsOnly;
    }
    if no_parental_softmax {
        run.model.parental_softmax = false;
        run.train.parental_softmax = false;
        run.train.lambda = 1.0;
    }
    run.train.parental_softmax = run.model.parental_softmax;
}

fn windows(run: &RunConfig, videos: &[Video]) -> Result<Vec<TrainWindow>, CliError> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(tiled_windows(
            &v.detections,
            &v.gt,
            run.model.window as u32,
            run.model.max_tokens,
            run.model.d_max,
        )?);
    }
    Ok(out)
}

fn check_features(run: &RunConfig, videos: &[Video]) -> Result<(), CliError> {
    if run.model.features == FeatureMode::Full {
        if let Some(d) = videos.iter().flat_map(|v| &v.detections).find(|d| d.features.is_none()) {
            return Err(CliError::usage(format!(
                "detection {} has no feature columns; pass --points-only or provide area,intensity,ixx,iyy,ixy",
                d.id
            )));
        }
    }
    Ok(())
}

/// Fits the feature normalization on `train_set`, initializes from the
/// training seed and trains.
pub fn train_model(run: &RunConfig, train_set: &[Video], val_set: &[Video]) -> Result<(Model32, Vec<StepLog>), CliError> {
    run.validate()?;
    check_features(run, train_set)?;
    check_features(run, val_set)?;
    let norm = match run.model.features {
        FeatureMode::Full => FeatureNorm::fit(train_set.iter().flat_map(|v| &v.detections)),
        FeatureMode::PointsOnly => FeatureNorm::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let mut model = Model::<f32>::new(run.model.clone(), norm, &mut rng)?;
    let data = windows(run, train_set)?;
    let val = windows(run, val_set)?;
    log::info!("training on {} windows, validating on {}", data.len(), val.len());
    let log = train(&mut model, &data, &val, &run.train)?;
    Ok((model, log))
}

/// Where association scores come from.
pub enum Scorer<'a> {
    Model(&'a Model32),
    Distance,
}

pub fn score(scorer: &Scorer<'_>, dets: &[Detection], run: &RunConfig, dist_max: f64) -> Result<ScoreTable, CliError> {
    match scorer {
        Scorer::Model(m) => {
            if m.config.features == FeatureMode::Full {
                if let Some(d) = dets.iter().find(|d| d.features.is_none()) {
                    return Err(CliError::usage(format!(
                        "model needs feature column \"area\" but detection {} has none",
                        d.id
                    )));
                }
            }
            Ok(infer_video(*m, dets, &run.linker.infer)?)
        }
        Scorer::Distance => Ok(distance_scores(dets, dist_max)),
    }
}

pub fn candidates(table: &ScoreTable, dets: &[Detection], run: &RunConfig, dist_max: f64) -> CandidateGraph {
    build_candidate_graph(table, dets, dist_max, run.linker.alpha)
}

pub fn link(cand: &CandidateGraph, run: &RunConfig, solver: Solver) -> Result<TrackingSolution, CliError> {
    Ok(match solver {
        Solver::Greedy => link_greedy(cand, run.linker.theta)?,
        Solver::Lap => link_lap(cand, &run.linker.lap)?,
        Solver::Ilp => link_ilp(cand, &run.linker.ilp)?,
    })
}

/// Evaluates a solution whose nodes are the video's own detections.
pub fn evaluate_video(sol: &LineageGraph, pred_dets: &[Detection], video: &Video, run: &RunConfig) -> Result<Evaluation, CliError> {
    let input = EvalInput {
        pred: sol,
        pred_dets,
        gt: &video.gt,
        gt_dets: &video.detections,
        input_dets: None,
        masks: None,
    };
    Ok(evaluate(&input, &run.eval)?)
}

/// Mean AOGM and TRA over `videos` for each solver, scoring every video once.
pub fn mean_scores(
    scorer: &Scorer<'_>,
    videos: &[Video],
    run: &RunConfig,
    dist_max: f64,
    solvers: &[Solver],
) -> Result<Vec<(Solver, f64, f64)>, CliError> {
    let mut sums = vec![(0.0, 0.0); solvers.len()];
    for v in videos {
        let table = score(scorer, &v.detections, run, dist_max)?;
        let cand = candidates(&table, &v.detections, run, dist_max);
        for (k, &s) in solvers.iter().enumerate() {
            let sol = link(&cand, run, s)?;
            let r = evaluate_video(&sol.graph, &v.detections, v, run)?.report;
            sums[k].0 += r.aogm;
            sums[k].1 += r.tra;
        }
    }
    let n = videos.len().max(1) as f64;
    Ok(solvers.iter().zip(sums).map(|(&s, (a, t))| (s, a / n, t / n)).collect())
}
