//! Sliding-window inference over a video and the candidate graph.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};
use crate::lineage::{Detection, Frame, NodeId, Window};
use crate::scalar::Scalar;
use crate::transformer::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Largest forward frame gap stored in the score table.
    pub delta_t: u32,
    /// Divide every sum by `s − 1` instead of the number of windows that
    /// actually contained the pair.
    pub literal_mean: bool,
    /// Only pairs closer than this are stored; defaults to the model's
    /// attention radius.
    pub store_radius: Option<f64>,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            delta_t: 2,
            literal_mean: false,
            store_radius: None,
        }
    }
}

/// Running sums of window probabilities per ordered pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pairs: BTreeMap<(NodeId, NodeId), (f64, u32)>,
    /// Fixed denominator, if the literal mean is requested.
    divisor: Option<u32>,
    gaps: HashMap<(NodeId, NodeId), u32>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// A table whose means are exactly the given scores.
    pub fn from_scores(scores: impl IntoIterator<Item = (NodeId, NodeId, f64)>) -> Self {
        let mut t = Self::new();
        for (p, c, s) in scores {
            t.add(p, c, 1, s);
        }
        t
    }

    pub fn add(&mut self, parent: NodeId, child: NodeId, gap: u32, value: f64) {
        let e = self.pairs.entry((parent, child)).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
        self.gaps.insert((parent, child), gap);
    }

    pub fn set_divisor(&mut self, divisor: Option<u32>) {
        self.divisor = divisor;
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count(&self, parent: NodeId, child: NodeId) -> u32 {
        self.pairs.get(&(parent, child)).map_or(0, |e| e.1)
    }

    pub fn mean(&self, parent: NodeId, child: NodeId) -> Option<f64> {
        self.pairs.get(&(parent, child)).map(|&(s, c)| self.finish(s, c))
    }

    fn finish(&self, sum: f64, count: u32) -> f64 {
        let d = self.divisor.unwrap_or(count).max(1);
        (sum / d as f64).clamp(0.0, 1.0)
    }

    /// `(parent, child, frame gap, mean, count)` in id order.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, NodeId, u32, f64, u32)> + '_ {
        self.pairs.iter().map(move |(&(p, c), &(s, n))| {
            let gap = self.gaps.get(&(p, c)).copied().unwrap_or(1);
            (p, c, gap, self.finish(s, n), n)
        })
    }

    /// Score dump with columns `parent_id,child_id,frame_gap,mean_score,window_count`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parent_id", "child_id", "frame_gap", "mean_score", "window_count"])
            .map_err(csv_err)?;
        for (p, c, gap, mean, n) in self.iter() {
            w.write_record([p.to_string(), c.to_string(), gap.to_string(), format!("{mean:.6}"), n.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> TrackError {
    TrackError::Io(std::io::Error::other(e))
}

/// A spatial crop of a window; only pairs whose child is `owned` are kept.
#[derive(Clone, Debug)]
pub struct Tile {
    pub window: Window,
    pub owned: Vec<bool>,
}

/// Splits a window into tiles of at most `max_tokens` detections.
///
/// Cores partition the plane by recursive median splits along the longer
/// side; each tile holds its core plus every detection within `margin`.
pub fn tile_window(window: &Window, max_tokens: usize, margin: f64) -> Result<Vec<Tile>> {
    if window.len() <= max_tokens {
        return Ok(vec![Tile {
            window: window.clone(),
            owned: vec![true; window.len()],
        }]);
    }
    let dets = window.detections();
    let mut out = Vec::new();
    let mut stack = vec![(0..dets.len()).collect::<Vec<usize>>()];
    while let Some(core) = stack.pop() {
        let (lo, hi) = bounds(core.iter().map(|&i| dets[i].pos));
        let members: Vec<usize> = (0..dets.len())
            .filter(|&i| {
                let p = dets[i].pos;
                p[0] >= lo[0] - margin && p[0] <= hi[0] + margin && p[1] >= lo[1] - margin && p[1] <= hi[1] + margin
            })
            .collect();
        if members.len() <= max_tokens {
            let mut owned_set = vec![false; dets.len()];
            for &i in &core {
                owned_set[i] = true;
            }
            let sub: Vec<Detection> = members.iter().map(|&i| dets[i].clone()).collect();
            let w = Window::new(window.start(), window.span(), sub)?;
            let owned = w.detections().iter().map(|d| owned_set[window.row_of(d.id).unwrap()]).collect();
            out.push(Tile { window: w, owned });
            continue;
        }
        if core.len() < 2 {
            return Err(TrackError::WindowTooLarge {
                got: members.len(),
                max: max_tokens,
            });
        }
        let axis = if hi[0] - lo[0] >= hi[1] - lo[1] { 0 } else { 1 };
        let mut sorted = core;
        sorted.sort_by(|&a, &b| dets[a].pos[axis].total_cmp(&dets[b].pos[axis]).then(dets[a].id.cmp(&dets[b].id)));
        let right = sorted.split_off(sorted.len() / 2);
        stack.push(right);
        stack.push(sorted);
    }
    Ok(out)
}

fn bounds(points: impl Iterator<Item = [f64; 2]>) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    (lo, hi)
}

/// Window start frames covering `first..=last` with span `s`.
pub fn window_starts(first: Frame, last: Frame, s: u32) -> (u32, Vec<Frame>) {
    let n_frames = last - first + 1;
    let span = s.min(n_frames).max(2);
    if n_frames < 2 {
        return (span, vec![first]);
    }
    (span, (first..=last + 1 - span).collect())
}

/// Probabilities of every owned pair in one window.
fn window_scores<T: Scalar>(
    model: &Model<T>,
    window: &Window,
    delta_t: u32,
    radius: f64,
) -> Result<Vec<(NodeId, NodeId, u32, f64)>> {
    let tiles = tile_window(window, model.config.max_tokens, model.config.d_max)?;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for tile in tiles {
        let probs = model.predict(&tile.window)?;
        let dets = tile.window.detections();
        for j in 0..dets.len() {
            if !tile.owned[j] {
                continue;
            }
            for i in 0..dets.len() {
                if dets[i].frame >= dets[j].frame {
                    continue;
                }
                let gap = dets[j].frame - dets[i].frame;
                let dx = dets[i].pos[0] - dets[j].pos[0];
                let dy = dets[i].pos[1] - dets[j].pos[1];
                if gap <= delta_t && dx * dx + dy * dy <= r2 {
                    out.push((dets[i].id, dets[j].id, gap, probs[[i, j]].as_f64()));
                }
            }
        }
    }
    Ok(out)
}

/// Averages window probabilities over the whole video.
pub fn infer_video<T: Scalar>(model: &Model<T>, dets: &[Detection], cfg: &InferConfig) -> Result<ScoreTable> {
    let mut table = ScoreTable::new();
    let (Some(first), Some(last)) = (dets.iter().map(|d| d.frame).min(), dets.iter().map(|d| d.frame).max()) else {
        return Ok(table);
    };
    let (span, starts) = window_starts(first, last, model.config.window as u32);
    let radius = cfg.store_radius.unwrap_or(model.config.d_max);
    let mut by_frame: BTreeMap<Frame, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_frame.entry(d.frame).or_default().push(d.clone());
    }
    let per_window: Vec<Vec<(NodeId, NodeId, u32, f64)>> = starts
        .par_iter()
        .map(|&start| {
            let sub: Vec<Detection> = by_frame.range(start..start + span).flat_map(|(_, v)| v.iter().cloned()).collect();
            let w = Window::new(start, span, sub)?;
            window_scores(model, &w, cfg.delta_t, radius)
        })
        .collect::<Result<_>>()?;
    for scores in per_window {
        for (p, c, gap, v) in scores {
            table.add(p, c, gap, v);
        }
    }
    if cfg.literal_mean {
        table.set_divisor(Some(span - 1));
    }
    Ok(table)
}

/// `1 − distance / dist_max`, the Euclidean baseline score.
pub fn distance_scores(dets: &[Detection], dist_max: f64) -> ScoreTable {
    let mut by_frame: BTreeMap<Frame, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        by_frame.entry(d.frame).or_default().push(d);
    }
    let mut t = ScoreTable::new();
    for (&f, parents) in &by_frame {
        let Some(children) = by_frame.get(&(f + 1)) else {
            continue;
        };
        for p in parents {
            for c in children {
                let d = p.distance(c);
                if d <= dist_max {
                    t.add(p.id, c.id, 1, 1.0 - d / dist_max);
                }
            }
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEdge {
    pub parent: NodeId,
    pub child: NodeId,
    pub score: f64,
}

/// Detections plus thresholded, distance-gated frame-to-frame edges.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateGraph {
    pub frames: BTreeMap<NodeId, Frame>,
    /// Sorted by `(parent, child)`.
    pub edges: Vec<CandidateEdge>,
}

impl CandidateGraph {
    pub fn new(frames: BTreeMap<NodeId, Frame>, mut edges: Vec<CandidateEdge>) -> Self {
        edges.sort_by_key(|e| (e.parent, e.child));
        edges.dedup_by_key(|e| (e.parent, e.child));
        CandidateGraph { frames, edges }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.frames.keys().copied()
    }

    pub fn num_nodes(&self) -> usize {
        self.frames.len()
    }

    pub fn first_frame(&self) -> Option<Frame> {
        self.frames.values().min().copied()
    }

    pub fn last_frame(&self) -> Option<Frame> {
        self.frames.values().max().copied()
    }
}

/// Keeps adjacent-frame pairs with mean `≥ alpha` and distance `≤ dist_max`.
pub fn build_candidate_graph(table: &ScoreTable, dets: &[Detection], dist_max: f64, alpha: f64) -> CandidateGraph {
    let by_id: HashMap<NodeId, &Detection> = dets.iter().map(|d| (d.id, d)).collect();
    let frames = dets.iter().map(|d| (d.id, d.frame)).collect();
    let mut edges = Vec::new();
    for (p, c, _, mean, _) in table.iter() {
        let (Some(dp), Some(dc)) = (by_id.get(&p), by_id.get(&c)) else {
            continue;
        };
        if dc.frame != dp.frame + 1 || mean < alpha || dp.distance(dc) > dist_max {
            continue;
        }
        edges.push(CandidateEdge {
            parent: p,
            child: c,
            score: mean,
        });
    }
    CandidateGraph::new(frames, edges)
}
