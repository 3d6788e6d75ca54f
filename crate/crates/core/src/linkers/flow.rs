//! Min-cost flow of free amount on one frame transition.
//!
//! Source → parent arcs carry the marginal out-degree costs (`−c_dis` for the
//! first child, `c_div` for the second), parent → child arcs the edge costs,
//! child → sink arcs `−c_app`. Both marginal sequences are non-decreasing,
//! so the cheapest flow of any size is an optimal edge selection.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

struct Arc {
    to: usize,
    cap: i32,
    cost: f64,
}

pub(crate) struct Network {
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
}

#[derive(PartialEq)]
struct Item(f64, usize);

impl Eq for Item {}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Network {
    pub(crate) fn new(n: usize) -> Self {
        Network {
            arcs: Vec::new(),
            adj: vec![Vec::new(); n],
        }
    }

    /// Returns the arc index, usable with [`Network::flow_on`].
    pub(crate) fn add_arc(&mut self, from: usize, to: usize, cost: f64) -> usize {
        let id = self.arcs.len();
        self.arcs.push(Arc { to, cap: 1, cost });
        self.adj[from].push(id);
        self.arcs.push(Arc { to: from, cap: 0, cost: -cost });
        self.adj[to].push(id + 1);
        id
    }

    pub(crate) fn flow_on(&self, arc: usize) -> bool {
        self.arcs[arc].cap == 0
    }

    /// Augments along shortest paths while they have negative cost.
    ///
    /// Nodes must be numbered in a topological order of the initial arcs.
    pub(crate) fn min_cost_free_flow(&mut self, source: usize, sink: usize) {
        let n = self.adj.len();
        // Initial potentials by DAG relaxation (arcs point to higher ids).
        let mut pot = vec![f64::INFINITY; n];
        pot[source] = 0.0;
        for u in 0..n {
            if pot[u].is_infinite() {
                continue;
            }
            for &a in &self.adj[u] {
                let arc = &self.arcs[a];
                if arc.cap > 0 && pot[u] + arc.cost < pot[arc.to] {
                    pot[arc.to] = pot[u] + arc.cost;
                }
            }
        }
        for p in pot.iter_mut() {
            if p.is_infinite() {
                *p = 0.0;
            }
        }

        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        loop {
            dist.iter_mut().for_each(|d| *d = f64::INFINITY);
            prev.iter_mut().for_each(|p| *p = usize::MAX);
            dist[source] = 0.0;
            let mut heap = BinaryHeap::new();
            heap.push(Item(0.0, source));
            while let Some(Item(d, u)) = heap.pop() {
                if d > dist[u] {
                    continue;
                }
                for &a in &self.adj[u] {
                    let arc = &self.arcs[a];
                    if arc.cap == 0 {
                        continue;
                    }
                    let rc = (arc.cost + pot[u] - pot[arc.to]).max(0.0);
                    let nd = d + rc;
                    if nd < dist[arc.to] {
                        dist[arc.to] = nd;
                        prev[arc.to] = a;
                        heap.push(Item(nd, arc.to));
                    }
                }
            }
            if dist[sink].is_infinite() {
                break;
            }
            let true_cost = dist[sink] + pot[sink] - pot[source];
            if true_cost >= -1e-12 {
                break;
            }
            let mut v = sink;
            while v != source {
                let a = prev[v];
                self.arcs[a].cap -= 1;
                self.arcs[a ^ 1].cap += 1;
                v = self.arcs[a ^ 1].to;
            }
            for u in 0..n {
                if dist[u].is_finite() {
                    pot[u] += dist[u];
                }
            }
        }
    }
}
