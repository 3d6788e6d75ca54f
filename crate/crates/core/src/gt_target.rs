//! Matching detections to ground truth and building per-window training
//! targets and loss weights.

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignment::solve_with_skips;
use crate::lineage::{AssociationMatrix, Detection, LineageGraph, MatrixRole, NodeId, Window};
use crate::mask::{Mask, MaskStore};
use crate::scalar::Scalar;

/// Price of leaving a detection or a ground-truth object unmatched. Any
/// admissible pair costs `1 - score < 0.5`, so matching it always pays off.
pub const UNMATCHED_COST: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchScore {
    pub score: f64,
    pub matched: bool,
}

/// `max(IoU, 1 - dist / delta_max)`, admissible iff strictly above 0.5.
pub fn match_score(
    det: &Detection,
    gt: &Detection,
    masks: Option<(&Mask, &Mask)>,
    delta_max: f64,
) -> MatchScore {
    debug_assert!(delta_max > 0.0);
    let iou = masks.map(|(a, b)| a.iou(b)).unwrap_or(0.0);
    let score = iou.max(1.0 - det.distance(gt) / delta_max);
    MatchScore {
        score,
        matched: score > 0.5,
    }
}

/// One-to-one correspondence between detections and ground-truth objects.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    /// `(detection_id, gt_id)` pairs.
    pub pairs: Vec<(NodeId, NodeId)>,
    pub unmatched_dets: Vec<NodeId>,
    pub unmatched_gts: Vec<NodeId>,
    /// `Σ (1 - score)` over pairs plus [`UNMATCHED_COST`] per unmatched item.
    pub cost: f64,
}

impl Matching {
    pub fn det_to_gt(&self) -> HashMap<NodeId, NodeId> {
        self.pairs.iter().copied().collect()
    }

    pub fn is_one_to_one(&self) -> bool {
        let d: BTreeSet<_> = self.pairs.iter().map(|p| p.0).collect();
        let g: BTreeSet<_> = self.pairs.iter().map(|p| p.1).collect();
        d.len() == self.pairs.len() && g.len() == self.pairs.len()
    }
}

/// Optional masks for both sides of a matching.
#[derive(Clone, Copy, Default)]
pub struct MaskPair<'a> {
    pub dets: Option<&'a MaskStore>,
    pub gts: Option<&'a MaskStore>,
}

impl<'a> MaskPair<'a> {
    fn lookup(&self, det: &Detection, gt: &Detection) -> Option<(&'a Mask, &'a Mask)> {
        let a = self.dets?.get(&det.id)?;
        let b = self.gts?.get(&gt.id)?;
        Some((a, b))
    }
}

/// Maximum-score one-to-one matching of a single frame, solved exactly.
/// Pairs failing the 0.5 gate are excluded.
pub fn match_frame(
    dets: &[Detection],
    gts: &[Detection],
    delta_max: f64,
    masks: MaskPair<'_>,
) -> Matching {
    let mut link = Array2::from_elem((dets.len(), gts.len()), f64::INFINITY);
    for (i, d) in dets.iter().enumerate() {
        for (k, g) in gts.iter().enumerate() {
            let s = match_score(d, g, masks.lookup(d, g), delta_max);
            if s.matched {
                link[[i, k]] = 1.0 - s.score;
            }
        }
    }
    let sol = solve_with_skips(
        &link,
        &vec![UNMATCHED_COST; dets.len()],
        &vec![UNMATCHED_COST; gts.len()],
    );
    let mut m = Matching::default();
    let mut gt_used = vec![false; gts.len()];
    for (i, choice) in sol.into_iter().enumerate() {
        match choice {
            Some(k) => {
                gt_used[k] = true;
                m.cost += link[[i, k]];
                m.pairs.push((dets[i].id, gts[k].id));
            }
            None => {
                m.cost += UNMATCHED_COST;
                m.unmatched_dets.push(dets[i].id);
            }
        }
    }
    for (k, used) in gt_used.into_iter().enumerate() {
        if !used {
            m.cost += UNMATCHED_COST;
            m.unmatched_gts.push(gts[k].id);
        }
    }
    m
}

/// Frame-by-frame matching of a whole video.
pub fn match_video(
    dets: &[Detection],
    gts: &[Detection],
    delta_max: f64,
    masks: MaskPair<'_>,
) -> Matching {
    let by_frame = |v: &[Detection]| {
        let mut m: std::collections::BTreeMap<u32, Vec<Detection>> = Default::default();
        for d in v {
            m.entry(d.frame).or_default().push(d.clone());
        }
        m
    };
    let df = by_frame(dets);
    let gf = by_frame(gts);
    let frames: BTreeSet<u32> = df.keys().chain(gf.keys()).copied().collect();
    let empty = Vec::new();
    let mut out = Matching::default();
    for f in frames {
        let m = match_frame(
            df.get(&f).unwrap_or(&empty),
            gf.get(&f).unwrap_or(&empty),
            delta_max,
            masks,
        );
        out.pairs.extend(m.pairs);
        out.unmatched_dets.extend(m.unmatched_dets);
        out.unmatched_gts.extend(m.unmatched_gts);
        out.cost += m.cost;
    }
    out
}

/// Identity matching, used when training directly on ground-truth detections.
pub fn identity_matching(dets: &[Detection]) -> HashMap<NodeId, NodeId> {
    dets.iter().map(|d| (d.id, d.id)).collect()
}

/// For every row, the gt ancestor at each earlier frame of the window
/// (`anc[row][k]` is `k` frames back; index 0 is the node itself).
fn ancestor_ladder(
    window: &Window,
    det_to_gt: &HashMap<NodeId, NodeId>,
    gt: &LineageGraph,
) -> Vec<Vec<Option<NodeId>>> {
    window
        .detections()
        .iter()
        .map(|d| {
            let depth = (d.frame - window.start()) as usize;
            let mut ladder = Vec::with_capacity(depth + 1);
            let mut cur = det_to_gt.get(&d.id).copied();
            ladder.push(cur);
            for _ in 0..depth {
                cur = cur.and_then(|c| gt.parent(c));
                ladder.push(cur);
            }
            ladder
        })
        .collect()
}

/// `a_ij = 1` iff both detections are matched and their gt objects lie on
/// one sub-lineage (one is an ancestor of the other).
pub fn build_target<T: Scalar>(
    window: &Window,
    det_to_gt: &HashMap<NodeId, NodeId>,
    gt: &LineageGraph,
) -> AssociationMatrix<T> {
    let n = window.len();
    let dets = window.detections();
    let ladder = ancestor_ladder(window, det_to_gt, gt);
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        let Some(gi) = det_to_gt.get(&dets[i].id) else {
            continue;
        };
        for j in 0..n {
            if dets[j].frame <= dets[i].frame {
                continue;
            }
            let dt = (dets[j].frame - dets[i].frame) as usize;
            if ladder[j][dt] == Some(*gi) {
                a[[i, j]] = T::one();
                a[[j, i]] = T::one();
            }
        }
    }
    AssociationMatrix {
        values: a,
        role: MatrixRole::Target,
        frames: window.frames(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    /// Largest forward frame gap that still carries loss.
    pub delta_t: u32,
    pub lambda_div: f64,
    pub lambda_cont: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            delta_t: 2,
            lambda_div: 10.0,
            lambda_cont: 1.0,
        }
    }
}

/// Per-entry loss weights: forward links up to `delta_t` frames, up-weighted
/// by the out-degree of the row's gt object in the full gt graph.
pub fn build_weights<T: Scalar>(
    window: &Window,
    det_to_gt: &HashMap<NodeId, NodeId>,
    gt: &LineageGraph,
    cfg: &WeightConfig,
) -> AssociationMatrix<T> {
    let n = window.len();
    let dets = window.detections();
    let row_weight: Vec<T> = dets
        .iter()
        .map(|d| {
            let deg = det_to_gt.get(&d.id).map(|&g| gt.out_degree(g)).unwrap_or(0);
            T::lit(match deg {
                2 => 1.0 + cfg.lambda_div,
                1 => 1.0 + cfg.lambda_cont,
                _ => 1.0,
            })
        })
        .collect();
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let dt = dets[j].frame as i64 - dets[i].frame as i64;
            if dt >= 1 && dt <= cfg.delta_t as i64 {
                w[[i, j]] = row_weight[i];
            }
        }
    }
    AssociationMatrix {
        values: w,
        role: MatrixRole::Weights,
        frames: window.frames(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(id: NodeId, frame: u32, x: f64, y: f64) -> Detection {
        Detection::point(id, frame, x, y)
    }

    #[test]
    fn score_identical_masks() {
        let m = Mask::rect(0, 4, 0, 4);
        let s = match_score(&p(1, 0, 1.0, 1.0), &p(2, 0, 1.0, 1.0), Some((&m, &m)), 10.0);
        assert_eq!(s.score, 1.0);
        assert!(s.matched);
    }

    #[test]
    fn score_gate_is_strict() {
        let s = match_score(&p(1, 0, 0.0, 0.0), &p(2, 0, 3.0, 4.0), None, 10.0);
        assert_eq!(s.score, 0.5);
        assert!(!s.matched);
        let s = match_score(&p(1, 0, 0.0, 0.0), &p(2, 0, 12.0, 0.0), None, 10.0);
        assert_eq!(s.score, 0.0);
        assert!(!s.matched);
    }

    #[test]
    fn single_pair_matches() {
        let m = match_frame(&[p(1, 0, 0.0, 0.0)], &[p(10, 0, 0.0, 0.0)], 5.0, MaskPair::default());
        assert_eq!(m.pairs, vec![(1, 10)]);
        assert!(m.unmatched_dets.is_empty() && m.unmatched_gts.is_empty());
    }

    #[test]
    fn empty_inputs_give_empty_matching() {
        let m = match_frame(&[], &[], 5.0, MaskPair::default());
        assert_eq!(m, Matching::default());
    }

    #[test]
    fn beats_greedy_nearest_neighbor() {
        // Greedy would take (d1, g1) at distance 0.5 and leave d2 with g2 at
        // distance 4.5; the optimum crosses over.
        let dets = [p(1, 0, 0.0, 0.0), p(2, 0, 3.0, 0.0)];
        let gts = [p(11, 0, 0.5, 0.0), p(12, 0, -2.0, 0.0)];
        let m = match_frame(&dets, &gts, 10.0, MaskPair::default());
        // Oracle: both permutations.
        let cost = |a: &Detection, b: &Detection| a.distance(b) / 10.0;
        let straight = cost(&dets[0], &gts[0]) + cost(&dets[1], &gts[1]);
        let crossed = cost(&dets[0], &gts[1]) + cost(&dets[1], &gts[0]);
        let best = straight.min(crossed);
        assert!((m.cost - best).abs() < 1e-12);
        assert_eq!(m.pairs.len(), 2);
    }

    #[test]
    fn unmatched_detection_is_reported() {
        let m = match_frame(
            &[p(1, 0, 0.0, 0.0), p(2, 0, 100.0, 0.0)],
            &[p(10, 0, 0.0, 0.0)],
            5.0,
            MaskPair::default(),
        );
        assert_eq!(m.pairs, vec![(1, 10)]);
        assert_eq!(m.unmatched_dets, vec![2]);
        assert!((m.cost - 0.5).abs() < 1e-12);
    }

    fn chain_window() -> (Window, LineageGraph) {
        let dets = vec![p(1, 0, 0.0, 0.0), p(2, 1, 0.0, 0.0), p(3, 2, 0.0, 0.0)];
        let mut g = LineageGraph::new();
        g.add_edge(1, 2, None);
        g.add_edge(2, 3, None);
        (Window::new(0, 3, dets).unwrap(), g)
    }

    #[test]
    fn chain_target_links_all_timepoints() {
        let (w, g) = chain_window();
        let m = identity_matching(w.detections());
        let a = build_target::<f64>(&w, &m, &g);
        assert_eq!(a.values[[0, 1]], 1.0);
        assert_eq!(a.values[[1, 2]], 1.0);
        assert_eq!(a.values[[0, 2]], 1.0);
        assert_eq!(a.values[[2, 0]], 1.0);
        assert!((0..3).all(|i| a.values[[i, i]] == 0.0));
    }

    #[test]
    fn spurious_detection_has_empty_row_and_column() {
        let (w, g) = chain_window();
        let mut dets = w.detections().to_vec();
        dets.push(p(99, 1, 5.0, 5.0));
        let w = Window::new(0, 3, dets).unwrap();
        let m = identity_matching(&w.detections()[..3])
            .into_iter()
            .filter(|(k, _)| *k != 99)
            .collect();
        let a = build_target::<f64>(&w, &m, &g);
        let r = w.row_of(99).unwrap();
        assert!(a.values.row(r).iter().all(|&v| v == 0.0));
        assert!(a.values.column(r).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn siblings_are_not_associated() {
        let dets = vec![p(1, 0, 0.0, 0.0), p(2, 1, 0.0, 0.0), p(3, 1, 1.0, 0.0)];
        let mut g = LineageGraph::new();
        g.add_edge(1, 2, None);
        g.add_edge(1, 3, None);
        let w = Window::new(0, 2, dets).unwrap();
        let a = build_target::<f64>(&w, &identity_matching(w.detections()), &g);
        // Oracle: closure of the 3-node tree.
        for (i, di) in w.detections().iter().enumerate() {
            let (anc, desc) = g.closure(di.id).unwrap();
            for (j, dj) in w.detections().iter().enumerate() {
                let expect = anc.contains(&dj.id) || desc.contains(&dj.id);
                assert_eq!(a.values[[i, j]] == 1.0, expect, "({}, {})", di.id, dj.id);
            }
        }
        assert_eq!(a.values[[1, 2]], 0.0);
    }

    #[test]
    fn weights_follow_cutoffs_and_degrees() {
        let dets = vec![
            p(1, 0, 0.0, 0.0),
            p(2, 1, 0.0, 0.0),
            p(3, 1, 1.0, 0.0),
            p(4, 2, 0.0, 0.0),
            p(5, 3, 0.0, 0.0),
        ];
        let mut g = LineageGraph::new();
        g.add_edge(1, 2, None);
        g.add_edge(1, 3, None);
        g.add_edge(2, 4, None);
        g.add_edge(4, 5, None);
        let w = Window::new(0, 4, dets).unwrap();
        let m = identity_matching(w.detections());
        let wt = build_weights::<f64>(&w, &m, &g, &WeightConfig::default());
        let r = |id| w.row_of(id).unwrap();
        assert_eq!(wt.values[[r(1), r(5)]], 0.0); // gap 3 > delta_t
        assert_eq!(wt.values[[r(2), r(3)]], 0.0); // same frame
        assert_eq!(wt.values[[r(2), r(1)]], 0.0); // backward
        assert_eq!(wt.values[[r(1), r(2)]], 11.0); // dividing row
        assert_eq!(wt.values[[r(1), r(4)]], 11.0);
        assert_eq!(wt.values[[r(2), r(4)]], 2.0); // continuing row
        assert_eq!(wt.values[[r(3), r(4)]], 1.0); // track end
    }
}
