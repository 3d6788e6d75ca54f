//! Pruning a candidate graph into a valid lineage forest.

mod flow;
pub mod greedy;
pub mod ilp;
pub mod lap;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::aggregator::CandidateGraph;
use crate::error::{Result, TrackError};
use crate::lineage::{Frame, LineageGraph, NodeId};

pub use greedy::link_greedy;
pub use ilp::{link_ilp, objective, IlpConfig, IlpCosts};
pub use lap::{link_lap, LapConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Greedy,
    Lap,
    Ilp,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Greedy => "greedy",
            Solver::Lap => "lap",
            Solver::Ilp => "ilp",
        })
    }
}

impl std::str::FromStr for Solver {
    type Err = TrackError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Solver::Greedy),
            "lap" => Ok(Solver::Lap),
            "ilp" => Ok(Solver::Ilp),
            other => Err(TrackError::Config(format!("unknown linker '{other}' (greedy, lap, ilp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingSolution {
    pub graph: LineageGraph,
    pub solver: Solver,
    /// ILP objective, for the ILP solver only.
    pub objective: Option<f64>,
}

impl TrackingSolution {
    /// Builds the solution graph over every candidate node and checks it.
    pub fn from_edges(
        cand: &CandidateGraph,
        edges: impl IntoIterator<Item = (NodeId, NodeId, f64)>,
        solver: Solver,
        objective: Option<f64>,
    ) -> Result<Self> {
        let mut graph = LineageGraph::from_nodes(cand.nodes());
        for (p, c, s) in edges {
            graph.add_edge(p, c, Some(s));
        }
        let sol = TrackingSolution {
            graph,
            solver,
            objective,
        };
        sol.check(cand)?;
        Ok(sol)
    }

    /// Out-degree ≤ 2, in-degree ≤ 1, single-frame edges, and every edge a
    /// candidate.
    pub fn check(&self, cand: &CandidateGraph) -> Result<()> {
        let frames: HashMap<NodeId, Frame> = cand.frames.iter().map(|(&k, &v)| (k, v)).collect();
        if let Some(v) = self.graph.validate(&frames)?.first() {
            return Err(TrackError::Config(format!("{} produced an invalid lineage: {v}", self.solver)));
        }
        let known: std::collections::HashSet<(NodeId, NodeId)> = cand.edges.iter().map(|e| (e.parent, e.child)).collect();
        for (p, c, _) in self.graph.edges() {
            if !known.contains(&(p, c)) {
                return Err(TrackError::Config(format!("{} selected non-candidate edge {p}->{c}", self.solver)));
            }
        }
        Ok(())
    }

    /// `(track_id, start_frame, end_frame, parent_track_id)` rows, with
    /// parent 0 for roots.
    pub fn tracks(&self, frames: &BTreeMap<NodeId, Frame>) -> Vec<Track> {
        tracks(&self.graph, frames)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    pub start: Frame,
    pub end: Frame,
    pub parent: u64,
    pub nodes: Vec<NodeId>,
}

/// Splits a lineage forest into tracklets: maximal chains whose inner nodes
/// have exactly one child.
pub fn tracks(graph: &LineageGraph, frames: &BTreeMap<NodeId, Frame>) -> Vec<Track> {
    let mut starts: Vec<NodeId> = graph
        .nodes()
        .filter(|&n| match graph.parent(n) {
            None => true,
            Some(p) => graph.out_degree(p) != 1,
        })
        .collect();
    starts.sort_by_key(|&n| (frames.get(&n).copied().unwrap_or(0), n));
    let mut id_of_start = HashMap::new();
    for (k, &s) in starts.iter().enumerate() {
        id_of_start.insert(s, k as u64 + 1);
    }
    let mut out = Vec::with_capacity(starts.len());
    let mut track_of_node = HashMap::new();
    for &s in &starts {
        let id = id_of_start[&s];
        let mut nodes = vec![s];
        let mut cur = s;
        while graph.out_degree(cur) == 1 {
            cur = graph.children(cur)[0];
            nodes.push(cur);
        }
        for &n in &nodes {
            track_of_node.insert(n, id);
        }
        out.push(Track {
            id,
            start: frames.get(&s).copied().unwrap_or(0),
            end: frames.get(&cur).copied().unwrap_or(0),
            parent: 0,
            nodes,
        });
    }
    for t in out.iter_mut() {
        if let Some(p) = graph.parent(t.nodes[0]) {
            t.parent = track_of_node.get(&p).copied().unwrap_or(0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn division_splits_into_three_tracks() {
        let mut g = LineageGraph::from_nodes([1, 2, 3, 4, 5]);
        g.add_edge(1, 2, None);
        g.add_edge(2, 3, None);
        g.add_edge(2, 4, None);
        g.add_edge(4, 5, None);
        let frames: BTreeMap<NodeId, Frame> = [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3)].into_iter().collect();
        let t = tracks(&g, &frames);
        assert_eq!(t.len(), 3);
        assert_eq!((t[0].start, t[0].end, t[0].parent), (0, 1, 0));
        assert_eq!(t[1].nodes, vec![3]);
        assert_eq!(t[1].parent, 1);
        assert_eq!((t[2].start, t[2].end, t[2].parent), (2, 3, 1));
    }

    #[test]
    fn solver_names_round_trip() {
        for s in [Solver::Greedy, Solver::Lap, Solver::Ilp] {
            assert_eq!(s.to_string().parse::<Solver>().unwrap(), s);
        }
        assert!("hungarian".parse::<Solver>().is_err());
    }
}
