//! Exact linking under appearance, disappearance and division costs.
//!
//! Appearance depends only on a node's incoming edges and disappearance and
//! division only on its outgoing ones, so the objective separates over frame
//! transitions and, within one, over connected components of the bipartite
//! candidate graph. Small components are solved by depth-first
//! branch-and-bound seeded with the greedy solution; large ones by an exact
//! min-cost flow.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::flow::Network;
use super::greedy::greedy_select;
use super::{Solver, TrackingSolution};
use crate::aggregator::{CandidateEdge, CandidateGraph};
use crate::error::{Result, TrackError};
use crate::lineage::{Frame, LineageGraph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlpCosts {
    pub c_app: f64,
    pub c_dis: f64,
    pub c_div: f64,
    /// Score clamp before the logit.
    pub eps: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Default for IlpCosts {
    fn default() -> Self {
        IlpCosts {
            c_app: logit(0.75),
            c_dis: logit(0.75),
            c_div: 1.0,
            eps: 1e-6,
        }
    }
}

impl IlpCosts {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_app >= 0.0 && self.c_dis >= 0.0 && self.c_div >= 0.0) {
            return Err(TrackError::Config("ILP costs must be non-negative".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(TrackError::Config("ILP eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// `−logit(clamp(score, ε, 1 − ε))`.
    pub fn edge_cost(&self, score: f64) -> f64 {
        -logit(score.clamp(self.eps, 1.0 - self.eps))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlpConfig {
    pub costs: IlpCosts,
    /// Largest independent subproblem accepted, in edges.
    pub max_edges: usize,
    /// Components up to this many edges go to branch-and-bound.
    pub bnb_max_edges: usize,
    /// Search-node budget per component before switching to the flow solver.
    pub bnb_node_limit: u64,
    /// Threshold of the greedy incumbent.
    pub theta: f64,
}

impl Default for IlpConfig {
    fn default() -> Self {
        IlpConfig {
            costs: IlpCosts::default(),
            max_edges: 5000,
            bnb_max_edges: 40,
            bnb_node_limit: 200_000,
            theta: 0.5,
        }
    }
}

/// Objective of a solution graph over the candidate graph's nodes.
pub fn objective(cand: &CandidateGraph, graph: &LineageGraph, costs: &IlpCosts) -> f64 {
    let (Some(first), Some(last)) = (cand.first_frame(), cand.last_frame()) else {
        return 0.0;
    };
    let mut total = 0.0;
    for (&n, &f) in &cand.frames {
        let out = graph.out_degree(n);
        if f != first && graph.in_degree(n) == 0 {
            total += costs.c_app;
        }
        if f != last && out == 0 {
            total += costs.c_dis;
        }
        if out == 2 {
            total += costs.c_div;
        }
    }
    let scores: HashMap<(NodeId, NodeId), f64> = cand.edges.iter().map(|e| ((e.parent, e.child), e.score)).collect();
    for (p, c, s) in graph.edges() {
        let score = scores.get(&(p, c)).copied().or(s).unwrap_or(0.5);
        total += costs.edge_cost(score);
    }
    total
}

/// One connected piece of a transition: local parent/child indices.
struct Component {
    edges: Vec<usize>,
    parent_of: Vec<usize>,
    child_of: Vec<usize>,
    costs: Vec<f64>,
    n_parents: usize,
    n_children: usize,
}

fn find(uf: &mut [usize], mut x: usize) -> usize {
    while uf[x] != x {
        uf[x] = uf[uf[x]];
        x = uf[x];
    }
    x
}

fn components(cand: &CandidateGraph, costs: &IlpCosts) -> Vec<Component> {
    let mut by_transition: BTreeMap<Frame, Vec<usize>> = BTreeMap::new();
    for (i, e) in cand.edges.iter().enumerate() {
        by_transition.entry(cand.frames[&e.parent]).or_default().push(i);
    }
    let mut out = Vec::new();
    for edges in by_transition.values() {
        let mut index: HashMap<(bool, NodeId), usize> = HashMap::new();
        for &i in edges {
            let e = &cand.edges[i];
            let n = index.len();
            index.entry((false, e.parent)).or_insert(n);
            let n = index.len();
            index.entry((true, e.child)).or_insert(n);
        }
        let mut uf: Vec<usize> = (0..index.len()).collect();
        for &i in edges {
            let e = &cand.edges[i];
            let a = find(&mut uf, index[&(false, e.parent)]);
            let b = find(&mut uf, index[&(true, e.child)]);
            if a != b {
                uf[a.max(b)] = a.min(b);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in edges {
            let root = find(&mut uf, index[&(false, cand.edges[i].parent)]);
            groups.entry(root).or_default().push(i);
        }
        for group in groups.into_values() {
            out.push(component(cand, group, costs));
        }
    }
    out
}

fn component(cand: &CandidateGraph, edges: Vec<usize>, costs: &IlpCosts) -> Component {
    let mut parents: HashMap<NodeId, usize> = HashMap::new();
    let mut children: HashMap<NodeId, usize> = HashMap::new();
    let mut parent_of = Vec::with_capacity(edges.len());
    let mut child_of = Vec::with_capacity(edges.len());
    let mut ec = Vec::with_capacity(edges.len());
    for &i in &edges {
        let e: &CandidateEdge = &cand.edges[i];
        let n = parents.len();
        parent_of.push(*parents.entry(e.parent).or_insert(n));
        let n = children.len();
        child_of.push(*children.entry(e.child).or_insert(n));
        ec.push(costs.edge_cost(e.score));
    }
    Component {
        edges,
        parent_of,
        child_of,
        costs: ec,
        n_parents: parents.len(),
        n_children: children.len(),
    }
}

impl Component {
    /// Cost of a selection, counting only this component's nodes.
    fn cost(&self, pick: &[bool], c: &IlpCosts) -> f64 {
        let mut out = vec![0u8; self.n_parents];
        let mut inn = vec![0u8; self.n_children];
        let mut total = 0.0;
        for k in 0..self.edges.len() {
            if pick[k] {
                out[self.parent_of[k]] += 1;
                inn[self.child_of[k]] += 1;
                total += self.costs[k];
            }
        }
        for &d in &out {
            total += match d {
                0 => c.c_dis,
                1 => 0.0,
                _ => c.c_div,
            };
        }
        total + inn.iter().filter(|&&d| d == 0).count() as f64 * c.c_app
    }

    fn feasible(&self, pick: &[bool]) -> bool {
        let mut out = vec![0u8; self.n_parents];
        let mut inn = vec![0u8; self.n_children];
        for k in 0..self.edges.len() {
            if pick[k] {
                out[self.parent_of[k]] += 1;
                inn[self.child_of[k]] += 1;
            }
        }
        out.iter().all(|&d| d <= 2) && inn.iter().all(|&d| d <= 1)
    }

    fn solve_flow(&self, c: &IlpCosts) -> Vec<bool> {
        let (np, nc) = (self.n_parents, self.n_children);
        let sink = 1 + np + nc;
        let mut net = Network::new(sink + 1);
        for p in 0..np {
            net.add_arc(0, 1 + p, -c.c_dis);
            net.add_arc(0, 1 + p, c.c_div);
        }
        let arcs: Vec<usize> = (0..self.edges.len())
            .map(|k| net.add_arc(1 + self.parent_of[k], 1 + np + self.child_of[k], self.costs[k]))
            .collect();
        for ch in 0..nc {
            net.add_arc(1 + np + ch, sink, -c.c_app);
        }
        net.min_cost_free_flow(0, sink);
        arcs.iter().map(|&a| net.flow_on(a)).collect()
    }

    /// Branch-and-bound; `None` if the node budget runs out.
    fn solve_bnb(&self, c: &IlpCosts, incumbent: Vec<bool>, node_limit: u64) -> Option<Vec<bool>> {
        let m = self.edges.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| self.costs[a].total_cmp(&self.costs[b]).then(a.cmp(&b)));
        let mut s = Search {
            comp: self,
            c: *c,
            order,
            best: self.cost(&incumbent, c),
            best_pick: incumbent,
            pick: vec![false; m],
            out: vec![0; self.n_parents],
            inn: vec![0; self.n_children],
            nodes: 0,
            limit: node_limit,
        };
        s.dfs(0, 0.0);
        (s.nodes <= s.limit).then_some(s.best_pick)
    }
}

struct Search<'a> {
    comp: &'a Component,
    c: IlpCosts,
    order: Vec<usize>,
    best: f64,
    best_pick: Vec<bool>,
    pick: Vec<bool>,
    out: Vec<u8>,
    inn: Vec<u8>,
    nodes: u64,
    limit: u64,
}

impl Search<'_> {
    /// Relaxation: split each edge cost evenly between its endpoints and let
    /// every node choose its cheapest completion independently.
    fn lower_bound(&self, depth: usize, committed: f64) -> f64 {
        let comp = self.comp;
        let mut per_parent: Vec<Vec<f64>> = vec![Vec::new(); comp.n_parents];
        let mut per_child = vec![f64::INFINITY; comp.n_children];
        for &k in &self.order[depth..] {
            let (p, ch) = (comp.parent_of[k], comp.child_of[k]);
            if self.out[p] < 2 && self.inn[ch] < 1 {
                let half = 0.5 * comp.costs[k];
                per_parent[p].push(half);
                per_child[ch] = per_child[ch].min(half);
            }
        }
        let mut lb = committed;
        for (p, halves) in per_parent.iter_mut().enumerate() {
            halves.sort_by(|a, b| a.total_cmp(b));
            let base = self.out[p] as usize;
            let mut best = f64::INFINITY;
            let mut acc = 0.0;
            for k in 0..=(2 - base).min(halves.len()) {
                if k > 0 {
                    acc += halves[k - 1];
                }
                let node = match base + k {
                    0 => self.c.c_dis,
                    1 => 0.0,
                    _ => self.c.c_div,
                };
                best = best.min(node + acc);
            }
            lb += best;
        }
        for (ch, &h) in per_child.iter().enumerate() {
            if self.inn[ch] == 0 {
                lb += self.c.c_app.min(h);
            }
        }
        lb
    }

    fn dfs(&mut self, depth: usize, committed: f64) {
        self.nodes += 1;
        if self.nodes > self.limit {
            return;
        }
        if self.lower_bound(depth, committed) >= self.best - 1e-12 {
            return;
        }
        if depth == self.order.len() {
            let total = self.comp.cost(&self.pick, &self.c);
            if total < self.best - 1e-12 {
                self.best = total;
                self.best_pick = self.pick.clone();
            }
            return;
        }
        let k = self.order[depth];
        let (p, ch) = (self.comp.parent_of[k], self.comp.child_of[k]);
        if self.out[p] < 2 && self.inn[ch] < 1 {
            self.pick[k] = true;
            self.out[p] += 1;
            self.inn[ch] += 1;
            self.dfs(depth + 1, committed + self.comp.costs[k]);
            self.pick[k] = false;
            self.out[p] -= 1;
            self.inn[ch] -= 1;
        }
        self.dfs(depth + 1, committed);
    }
}

/// Exact minimizer of the appearance/disappearance/division objective
/// subject to in-degree ≤ 1 and out-degree ≤ 2.
pub fn link_ilp(cand: &CandidateGraph, cfg: &IlpConfig) -> Result<TrackingSolution> {
    cfg.costs.validate()?;
    let comps = components(cand, &cfg.costs);
    if let Some(big) = comps.iter().map(|c| c.edges.len()).max() {
        if big > cfg.max_edges {
            return Err(TrackError::IlpBudget {
                edges: big,
                budget: cfg.max_edges,
            });
        }
    }
    let mut chosen = Vec::new();
    for comp in &comps {
        let local: Vec<CandidateEdge> = comp.edges.iter().map(|&i| cand.edges[i]).collect();
        let mut incumbent = vec![false; local.len()];
        for k in greedy_select(&local, cfg.theta) {
            incumbent[k] = true;
        }
        let pick = if comp.edges.len() <= cfg.bnb_max_edges {
            comp.solve_bnb(&cfg.costs, incumbent, cfg.bnb_node_limit)
                .unwrap_or_else(|| comp.solve_flow(&cfg.costs))
        } else {
            comp.solve_flow(&cfg.costs)
        };
        debug_assert!(comp.feasible(&pick));
        for (k, &on) in pick.iter().enumerate() {
            if on {
                let e = cand.edges[comp.edges[k]];
                chosen.push((e.parent, e.child, e.score));
            }
        }
    }
    let mut sol = TrackingSolution::from_edges(cand, chosen, Solver::Ilp, None)?;
    sol.objective = Some(objective(cand, &sol.graph, &cfg.costs));
    Ok(sol)
}
