//! Greedy edge selection by descending score.

use std::collections::HashMap;

use super::{Solver, TrackingSolution};
use crate::aggregator::{CandidateEdge, CandidateGraph};
use crate::error::Result;
use crate::lineage::NodeId;

/// Indices of the accepted edges, in acceptance order.
pub(crate) fn greedy_select(edges: &[CandidateEdge], theta: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..edges.len()).filter(|&i| edges[i].score >= theta).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&edges[a], &edges[b]);
        eb.score
            .total_cmp(&ea.score)
            .then(ea.parent.cmp(&eb.parent))
            .then(ea.child.cmp(&eb.child))
    });
    let mut out_deg: HashMap<NodeId, u8> = HashMap::new();
    let mut has_parent: HashMap<NodeId, bool> = HashMap::new();
    let mut chosen = Vec::new();
    for i in order {
        let e = &edges[i];
        let od = out_deg.entry(e.parent).or_insert(0);
        let hp = has_parent.entry(e.child).or_insert(false);
        if *od < 2 && !*hp {
            *od += 1;
            *hp = true;
            chosen.push(i);
        }
    }
    chosen
}

/// Accepts edges with score `≥ theta` in descending score order while
/// in-degree stays ≤ 1 and out-degree ≤ 2.
pub fn link_greedy(cand: &CandidateGraph, theta: f64) -> Result<TrackingSolution> {
    let picked = greedy_select(&cand.edges, theta);
    let edges = picked.into_iter().map(|i| {
        let e = cand.edges[i];
        (e.parent, e.child, e.score)
    });
    TrackingSolution::from_edges(cand, edges, Solver::Greedy, None)
}
