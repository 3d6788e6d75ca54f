//! Two-step LAP linking: frame-to-frame chains, then division links.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Solver, TrackingSolution};
use crate::aggregator::{CandidateEdge, CandidateGraph};
use crate::assignment::solve_with_skips;
use crate::error::Result;
use crate::lineage::{Frame, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LapConfig {
    /// Percentile of the realized link costs used for the no-link cost.
    pub percentile: f64,
    /// Multiplier on that percentile.
    pub factor: f64,
}

impl Default for LapConfig {
    fn default() -> Self {
        LapConfig {
            percentile: 90.0,
            factor: 1.05,
        }
    }
}

/// Linear-interpolated percentile of a non-empty list.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Assigns `rows` to `cols` over the given edges with cost `1 − score`.
fn assign(rows: &[NodeId], cols: &[NodeId], edges: &[CandidateEdge], cfg: &LapConfig, row_is_parent: bool) -> Vec<CandidateEdge> {
    if rows.is_empty() || cols.is_empty() || edges.is_empty() {
        return Vec::new();
    }
    let ri: HashMap<NodeId, usize> = rows.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let ci: HashMap<NodeId, usize> = cols.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut link = Array2::from_elem((rows.len(), cols.len()), f64::INFINITY);
    let mut lookup = HashMap::new();
    let mut realized = Vec::new();
    for e in edges {
        let (r, c) = if row_is_parent { (e.parent, e.child) } else { (e.child, e.parent) };
        if let (Some(&i), Some(&j)) = (ri.get(&r), ci.get(&c)) {
            let cost = 1.0 - e.score;
            link[[i, j]] = cost;
            lookup.insert((i, j), *e);
            realized.push(cost);
        }
    }
    if realized.is_empty() {
        return Vec::new();
    }
    let no_link = cfg.factor * percentile(&mut realized, cfg.percentile);
    let sol = solve_with_skips(&link, &vec![no_link; rows.len()], &vec![no_link; cols.len()]);
    sol.iter()
        .enumerate()
        .filter_map(|(i, j)| j.and_then(|j| lookup.get(&(i, j)).copied()))
        .collect()
}

/// Step one links consecutive frames one-to-one; step two lets each
/// unparented node attach to any node of the previous frame with spare
/// out-degree, which creates divisions where that node already continues.
pub fn link_lap(cand: &CandidateGraph, cfg: &LapConfig) -> Result<TrackingSolution> {
    let mut by_frame: BTreeMap<Frame, Vec<NodeId>> = BTreeMap::new();
    for (&n, &f) in &cand.frames {
        by_frame.entry(f).or_default().push(n);
    }
    let mut by_transition: BTreeMap<Frame, Vec<CandidateEdge>> = BTreeMap::new();
    for e in &cand.edges {
        by_transition.entry(cand.frames[&e.parent]).or_default().push(*e);
    }

    let mut chosen: Vec<CandidateEdge> = Vec::new();
    for (&f, edges) in &by_transition {
        let (Some(parents), Some(children)) = (by_frame.get(&f), by_frame.get(&(f + 1))) else {
            continue;
        };
        chosen.extend(assign(parents, children, edges, cfg, true));
    }

    let mut out_deg: HashMap<NodeId, usize> = HashMap::new();
    let mut has_parent: HashMap<NodeId, bool> = HashMap::new();
    for e in &chosen {
        *out_deg.entry(e.parent).or_default() += 1;
        has_parent.insert(e.child, true);
    }
    let starts: Vec<NodeId> = cand.nodes().filter(|n| !has_parent.contains_key(n)).collect();
    let mothers: Vec<NodeId> = cand.nodes().filter(|n| out_deg.get(n).copied().unwrap_or(0) < 2).collect();
    let taken: std::collections::HashSet<(NodeId, NodeId)> = chosen.iter().map(|e| (e.parent, e.child)).collect();
    let step2: Vec<CandidateEdge> = cand
        .edges
        .iter()
        .filter(|e| !taken.contains(&(e.parent, e.child)))
        .copied()
        .collect();
    chosen.extend(assign(&starts, &mothers, &step2, cfg, false));

    let edges = chosen.into_iter().map(|e| (e.parent, e.child, e.score));
    TrackingSolution::from_edges(cand, edges, Solver::Lap, None)
}
