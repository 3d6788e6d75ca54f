//! Mini-batch training with Adam and linear warmup.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::model::Model;
use crate::aggregator::tile_window;
use crate::error::{Result, TrackError};
use crate::gt_target::{build_target, build_weights, identity_matching, WeightConfig};
use crate::lineage::{LineageGraph, NodeId, Window};
use crate::scalar::Scalar;
use crate::tokenizer::{augment_window, restrict_graph, AugmentConfig};

/// A window of ground-truth detections and the lineage edges among them.
#[derive(Clone, Debug)]
pub struct TrainWindow {
    pub window: Window,
    pub gt: LineageGraph,
}

impl TrainWindow {
    /// Cuts `gt` down to the ids present in `window`.
    pub fn new(window: Window, gt: &LineageGraph) -> Self {
        let ids: HashMap<NodeId, usize> = window.detections().iter().enumerate().map(|(i, d)| (d.id, i)).collect();
        let gt = restrict_graph(gt, &ids);
        TrainWindow { window, gt }
    }

    /// Target and weight matrices for this window.
    pub fn matrices<T: Scalar>(&self, weights: &WeightConfig) -> (Array2<T>, Array2<T>) {
        let m = identity_matching(self.window.detections());
        let a = build_target::<T>(&self.window, &m, &self.gt).values;
        let w = build_weights::<T>(&self.window, &m, &self.gt, weights).values;
        (a, w)
    }
}

/// Every window of `span` frames in a video, optionally with stride.
pub fn video_windows(
    dets: &[crate::lineage::Detection],
    gt: &LineageGraph,
    span: u32,
    stride: u32,
) -> Result<Vec<TrainWindow>> {
    let Some(last) = dets.iter().map(|d| d.frame).max() else {
        return Ok(Vec::new());
    };
    let first = dets.iter().map(|d| d.frame).min().unwrap_or(0);
    let n_frames = last - first + 1;
    let span = span.min(n_frames).max(2);
    let mut out = Vec::new();
    let mut start = first;
    loop {
        let w = Window::from_video(dets, start, span)?;
        out.push(TrainWindow::new(w, gt));
        start += stride.max(1);
        if start + span > last + 1 {
            break;
        }
    }
    Ok(out)
}

/// [`video_windows`] cut into spatial tiles of at most `max_tokens`
/// detections, the same tiling used at inference.
pub fn tiled_windows(
    dets: &[crate::lineage::Detection],
    gt: &LineageGraph,
    span: u32,
    max_tokens: usize,
    margin: f64,
) -> Result<Vec<TrainWindow>> {
    let windows = video_windows(dets, gt, span, 1)?;
    let mut out = Vec::new();
    for w in windows {
        for t in tile_window(&w.window, max_tokens, margin)? {
            out.push(TrainWindow::new(t.window, &w.gt));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub lambda: f64,
    pub parental_softmax: bool,
    pub weights: WeightConfig,
    pub augment: AugmentConfig,
    /// Validation cadence in steps, plus once after the first step; 0
    /// disables.
    pub val_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_size: 8,
            lr: 1e-4,
            warmup: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            lambda: 1e-2,
            parental_softmax: true,
            weights: WeightConfig::default(),
            augment: AugmentConfig::default(),
            val_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrackError::Config("batch_size must be positive".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(TrackError::Config("lambda must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrackError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        if self.parental_softmax {
            LossConfig {
                lambda: self.lambda,
                parental: true,
            }
        } else {
            LossConfig::sigmoid_only()
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

/// Adam state over the flattened parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Mean loss over a fixed set of windows, no augmentation.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &[TrainWindow], cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<f64> = data
        .par_iter()
        .map(|tw| {
            let (a, w) = tw.matrices::<T>(&cfg.weights);
            model.loss_value(&tw.window, &a, &w, cfg.loss()).map(|l| l.as_f64())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Loss and flattened gradient of one (possibly augmented) draw.
fn sample_grad<T: Scalar>(model: &Model<T>, tw: &TrainWindow, cfg: &TrainConfig, seed: u64) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (window, gt) = augment_window(&tw.window, &tw.gt, &mut rng, &cfg.augment)?;
    let aug = TrainWindow { window, gt };
    let (a, w) = aug.matrices::<T>(&cfg.weights);
    let (l, g) = model.loss_and_grad(&aug.window, &a, &w, cfg.loss())?;
    Ok((l.as_f64(), g.flatten().into_iter().map(|x| x.as_f64()).collect()))
}

/// Trains `model` in place, returning the per-step log.
///
/// Batches are drawn uniformly with replacement from `data`; each draw gets
/// its own augmentation seed so results do not depend on thread count.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &[TrainWindow],
    val: &[TrainWindow],
    cfg: &TrainConfig,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrackError::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: Vec<f64> = model.flatten().into_iter().map(|x| x.as_f64()).collect();
    let mut adam = Adam::new(params.len());
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let draws: Vec<(usize, u64)> = (0..cfg.batch_size)
            .map(|_| (rng.random_range(0..data.len()), rng.random::<u64>()))
            .collect();
        let results: Vec<(f64, Vec<f64>)> = draws
            .par_iter()
            .map(|&(i, seed)| sample_grad(model, &data[i], cfg, seed))
            .collect::<Result<_>>()?;

        let scale = 1.0 / cfg.batch_size as f64;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l * scale;
            for (acc, x) in grad.iter_mut().zip(g) {
                *acc += x * scale;
            }
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrackError::Diverged { step, loss });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let k = cfg.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
        }
        adam.step(&mut params, &grad, cfg.lr_at(step), cfg);
        let cast: Vec<T> = params.iter().map(|&x| T::lit(x)).collect();
        model.load_flat(&cast);

        let val_loss = if cfg.val_every > 0 && !val.is_empty() && (step == 0 || (step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps) {
            Some(evaluate(model, val, cfg)?)
        } else {
            None
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::info!("step {step} loss {loss:.5}{}", val_loss.map(|v| format!(" val {v:.5}")).unwrap_or_default());
        }
        log.push(StepLog { step, loss, val_loss });
    }
    Ok(log)
}
