//! AOGM, TRA and division scores of a predicted lineage against ground truth.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignment::solve_with_skips;
use crate::error::{Result, TrackError};
use crate::lineage::{Detection, Frame, LineageGraph, NodeId};
use crate::mask::MaskStore;

/// Operation weights `(NS, FN, FP, ED, EA, EC)`.
pub const W_NS: f64 = 5.0;
pub const W_FN: f64 = 10.0;
pub const W_FP: f64 = 1.0;
pub const W_ED: f64 = 1.0;
pub const W_EA: f64 = 1.5;
pub const W_EC: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Point-mode matching radius.
    pub r_eval: f64,
    /// Temporal tolerance for division matching, in frames.
    pub division_tol: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            r_eval: 10.0,
            division_tol: 1,
        }
    }
}

/// gt node → pred node, plus pred nodes that absorbed several gt nodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalMatching {
    pub gt_to_pred: HashMap<NodeId, NodeId>,
}

impl EvalMatching {
    pub fn pred_to_gts(&self) -> HashMap<NodeId, Vec<NodeId>> {
        let mut out: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for (&g, &p) in &self.gt_to_pred {
            out.entry(p).or_default().push(g);
        }
        for v in out.values_mut() {
            v.sort_unstable();
        }
        out
    }
}

fn by_frame(dets: &[Detection]) -> BTreeMap<Frame, Vec<&Detection>> {
    let mut m: BTreeMap<Frame, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        m.entry(d.frame).or_default().push(d);
    }
    m
}

/// Per-frame matching: by area coverage when both mask stores are given,
/// otherwise one-to-one by distance within `r_eval`.
pub fn match_nodes_for_eval(
    pred: &[Detection],
    gt: &[Detection],
    masks: Option<(&MaskStore, &MaskStore)>,
    r_eval: f64,
) -> EvalMatching {
    let pf = by_frame(pred);
    let mut out = EvalMatching::default();
    for (frame, gts) in by_frame(gt) {
        let Some(preds) = pf.get(&frame) else {
            continue;
        };
        match masks {
            Some((pm, gm)) => {
                for g in &gts {
                    let Some(gmask) = gm.get(&g.id) else { continue };
                    for p in preds {
                        if pm.get(&p.id).is_some_and(|m| m.coverage_of(gmask) > 0.5) {
                            out.gt_to_pred.insert(g.id, p.id);
                            break;
                        }
                    }
                }
            }
            None => {
                let mut link = Array2::from_elem((gts.len(), preds.len()), f64::INFINITY);
                for (i, g) in gts.iter().enumerate() {
                    for (j, p) in preds.iter().enumerate() {
                        let d = g.distance(p);
                        if d <= r_eval {
                            link[[i, j]] = d;
                        }
                    }
                }
                let skip_g = vec![r_eval; gts.len()];
                let skip_p = vec![r_eval; preds.len()];
                for (i, j) in solve_with_skips(&link, &skip_g, &skip_p).into_iter().enumerate() {
                    if let Some(j) = j {
                        out.gt_to_pred.insert(gts[i].id, preds[j].id);
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AogmReport {
    pub ns: usize,
    #[serde(rename = "fn")]
    pub fn_nodes: usize,
    pub fp: usize,
    pub ed: usize,
    pub ea: usize,
    pub ec: usize,
    pub aogm: f64,
    pub aogm0: f64,
    pub tra: f64,
    pub aogm_plus: f64,
    pub fn_detector: usize,
    pub fp_edges: usize,
    pub fn_edges: usize,
    pub tp_divs: usize,
    pub fp_divs: usize,
    pub fn_divs: usize,
    pub div_f1: f64,
    /// Set when the gt graph is empty and TRA is reported as 1 by convention.
    pub empty_gt: bool,
}

impl AogmReport {
    pub fn weighted_sum(&self) -> f64 {
        W_NS * self.ns as f64
            + W_FN * self.fn_nodes as f64
            + W_FP * self.fp as f64
            + W_ED * self.ed as f64
            + W_EA * self.ea as f64
            + W_EC * self.ec as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeLabel {
    #[serde(rename = "TP")]
    Tp,
    #[serde(rename = "FP")]
    Fp,
    #[serde(rename = "FN")]
    Fn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEdge {
    pub parent_id: NodeId,
    pub child_id: NodeId,
    /// Frame of the parent.
    pub frame: Frame,
    /// `pred` for TP/FP rows, `gt` for FN rows.
    pub source: String,
    pub label: EdgeLabel,
}

/// Everything needed to score one video.
pub struct EvalInput<'a> {
    pub pred: &'a LineageGraph,
    pub pred_dets: &'a [Detection],
    pub gt: &'a LineageGraph,
    pub gt_dets: &'a [Detection],
    /// Detector output used for AOGM+; defaults to `pred_dets`.
    pub input_dets: Option<&'a [Detection]>,
    pub masks: Option<(&'a MaskStore, &'a MaskStore)>,
}

pub struct Evaluation {
    pub report: AogmReport,
    pub matching: EvalMatching,
    pub edges: Vec<LabeledEdge>,
}

pub fn evaluate(input: &EvalInput<'_>, cfg: &EvalConfig) -> Result<Evaluation> {
    let matching = match_nodes_for_eval(input.pred_dets, input.gt_dets, input.masks, cfg.r_eval);
    let pred_frames: HashMap<NodeId, Frame> = input.pred_dets.iter().map(|d| (d.id, d.frame)).collect();
    let gt_frames: HashMap<NodeId, Frame> = input.gt_dets.iter().map(|d| (d.id, d.frame)).collect();
    for n in input.gt.nodes() {
        if !gt_frames.contains_key(&n) {
            return Err(TrackError::UnknownNode(n));
        }
    }
    let (report, edges) = compute_aogm(input, &matching, &pred_frames, &gt_frames, cfg)?;
    Ok(Evaluation {
        report,
        matching,
        edges,
    })
}

fn compute_aogm(
    input: &EvalInput<'_>,
    m: &EvalMatching,
    pred_frames: &HashMap<NodeId, Frame>,
    gt_frames: &HashMap<NodeId, Frame>,
    cfg: &EvalConfig,
) -> Result<(AogmReport, Vec<LabeledEdge>)> {
    let (pred, gt) = (input.pred, input.gt);
    let p2g = m.pred_to_gts();
    let mut r = AogmReport {
        ns: p2g.values().map(|v| v.len() - 1).sum(),
        fn_nodes: gt.nodes().filter(|g| !m.gt_to_pred.contains_key(g)).count(),
        fp: pred.nodes().filter(|p| !p2g.contains_key(p)).count(),
        ..AogmReport::default()
    };

    // A pred edge is correct iff some gt edge joins the gt nodes of its ends.
    let mut correct_out: HashMap<NodeId, usize> = HashMap::new();
    let mut covered: HashSet<(NodeId, NodeId)> = HashSet::new();
    let mut labeled = Vec::new();
    let mut correct_edges = Vec::new();
    for (p, c, _) in pred.edges() {
        let hit = match (p2g.get(&p), p2g.get(&c)) {
            (Some(gp), Some(gc)) => gp
                .iter()
                .flat_map(|&g| gc.iter().map(move |&h| (g, h)))
                .find(|&(g, h)| gt.contains_edge(g, h)),
            _ => None,
        };
        let frame = pred_frames.get(&p).copied().unwrap_or(0);
        match hit {
            Some(ge) => {
                covered.insert(ge);
                *correct_out.entry(p).or_default() += 1;
                correct_edges.push((p, ge));
                labeled.push(LabeledEdge {
                    parent_id: p,
                    child_id: c,
                    frame,
                    source: "pred".into(),
                    label: EdgeLabel::Tp,
                });
            }
            None => {
                // Edges at false-positive nodes vanish with the node.
                if p2g.contains_key(&p) && p2g.contains_key(&c) {
                    r.ed += 1;
                }
                r.fp_edges += 1;
                labeled.push(LabeledEdge {
                    parent_id: p,
                    child_id: c,
                    frame,
                    source: "pred".into(),
                    label: EdgeLabel::Fp,
                });
            }
        }
    }
    for (g, h, _) in gt.edges() {
        if !covered.contains(&(g, h)) {
            r.ea += 1;
            labeled.push(LabeledEdge {
                parent_id: g,
                child_id: h,
                frame: gt_frames.get(&g).copied().unwrap_or(0),
                source: "gt".into(),
                label: EdgeLabel::Fn,
            });
        }
    }
    r.fn_edges = r.ea;
    for (p, (g, _)) in &correct_edges {
        let pred_div = correct_out.get(p).copied().unwrap_or(0) == 2;
        let gt_div = gt.out_degree(*g) == 2;
        if pred_div != gt_div {
            r.ec += 1;
        }
    }

    r.aogm = r.weighted_sum();
    r.aogm0 = W_FN * gt.num_nodes() as f64 + W_EA * gt.num_edges() as f64;
    if r.aogm0 > 0.0 {
        r.tra = 1.0 - r.aogm.min(r.aogm0) / r.aogm0;
    } else {
        r.tra = 1.0;
        r.empty_gt = true;
    }
    r.fn_detector = match input.input_dets {
        Some(dets) => {
            let mm = match_nodes_for_eval(dets, input.gt_dets, input.masks, cfg.r_eval);
            gt.nodes().filter(|g| !mm.gt_to_pred.contains_key(g)).count()
        }
        None => r.fn_nodes,
    };
    r.aogm_plus = r.aogm - W_FN * r.fn_detector as f64;

    let (tp, fp, fnn) = division_errors(pred, pred_frames, gt, gt_frames, m, cfg.division_tol);
    r.tp_divs = tp;
    r.fp_divs = fp;
    r.fn_divs = fnn;
    r.div_f1 = if tp + fp + fnn == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
    };
    debug_assert!((r.aogm - r.weighted_sum()).abs() < 1e-9);
    labeled.sort_by(|a, b| {
        (a.frame, a.parent_id, a.child_id, a.source.as_str()).cmp(&(b.frame, b.parent_id, b.child_id, b.source.as_str()))
    });
    Ok((r, labeled))
}

/// Descendants of `node` at frame `target` (the node itself if it is there).
fn descendants_at(g: &LineageGraph, frames: &HashMap<NodeId, Frame>, node: NodeId, target: Frame) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        match frames.get(&n) {
            Some(&f) if f == target => {
                out.insert(n);
            }
            Some(&f) if f < target => stack.extend_from_slice(g.children(n)),
            _ => {}
        }
    }
    out
}

/// Division matching within `±tol` frames.
///
/// A gt division and a pred division correspond when their daughter
/// branches, followed to the frame after the later of the two, reach the
/// same gt nodes under the node matching. Returns `(tp, fp, fn)`.
pub fn division_errors(
    pred: &LineageGraph,
    pred_frames: &HashMap<NodeId, Frame>,
    gt: &LineageGraph,
    gt_frames: &HashMap<NodeId, Frame>,
    m: &EvalMatching,
    tol: u32,
) -> (usize, usize, usize) {
    let p2g = m.pred_to_gts();
    let mut gt_divs: Vec<NodeId> = gt.nodes().filter(|&n| gt.out_degree(n) == 2).collect();
    gt_divs.sort_by_key(|n| (gt_frames.get(n).copied().unwrap_or(0), *n));
    let mut pred_divs: Vec<NodeId> = pred.nodes().filter(|&n| pred.out_degree(n) == 2).collect();
    pred_divs.sort_by_key(|n| (pred_frames.get(n).copied().unwrap_or(0), *n));
    let mut used = vec![false; pred_divs.len()];
    let mut tp = 0;
    for &g in &gt_divs {
        let tg = gt_frames[&g];
        let mut best: Option<(u32, usize)> = None;
        for (k, &p) in pred_divs.iter().enumerate() {
            if used[k] {
                continue;
            }
            let Some(&tpf) = pred_frames.get(&p) else { continue };
            let dt = tg.abs_diff(tpf);
            if dt > tol {
                continue;
            }
            let target = tg.max(tpf) + 1;
            let mut gb: Vec<BTreeSet<NodeId>> = gt.children(g).iter().map(|&h| descendants_at(gt, gt_frames, h, target)).collect();
            let mut pb: Vec<BTreeSet<NodeId>> = pred
                .children(p)
                .iter()
                .map(|&q| {
                    descendants_at(pred, pred_frames, q, target)
                        .into_iter()
                        .flat_map(|n| p2g.get(&n).cloned().unwrap_or_default())
                        .collect()
                })
                .collect();
            gb.sort();
            pb.sort();
            if gb.iter().all(|b| !b.is_empty()) && gb == pb && best.is_none_or(|(d, _)| dt < d) {
                best = Some((dt, k));
            }
        }
        if let Some((_, k)) = best {
            used[k] = true;
            tp += 1;
        }
    }
    (tp, pred_divs.len() - tp, gt_divs.len() - tp)
}

/// Error-tree CSV: `parent_id,child_id,frame,source,label`.
pub fn write_error_tree<W: Write>(edges: &[LabeledEdge], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in edges {
        w.serialize(e).map_err(|e| TrackError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_video() -> (Vec<Detection>, LineageGraph) {
        let dets: Vec<Detection> = (0..4).map(|t| Detection::point(t as NodeId + 1, t, 10.0, 10.0)).collect();
        let mut g = LineageGraph::from_nodes(1..=4);
        for k in 1..4 {
            g.add_edge(k, k + 1, None);
        }
        (dets, g)
    }

    fn eval(pred: &LineageGraph, pd: &[Detection], gt: &LineageGraph, gd: &[Detection]) -> AogmReport {
        let input = EvalInput {
            pred,
            pred_dets: pd,
            gt,
            gt_dets: gd,
            input_dets: None,
            masks: None,
        };
        evaluate(&input, &EvalConfig::default()).unwrap().report
    }

    #[test]
    fn identical_prediction_is_perfect() {
        let (d, g) = chain_video();
        let r = eval(&g, &d, &g, &d);
        assert_eq!(r.aogm, 0.0);
        assert_eq!(r.tra, 1.0);
    }

    #[test]
    fn missing_edge_costs_one_and_a_half() {
        let (d, g) = chain_video();
        let mut p = g.clone();
        p.remove_edge(2, 3);
        assert_eq!(eval(&p, &d, &g, &d).aogm, 1.5);
    }

    #[test]
    fn empty_prediction_scores_aogm0() {
        let (d, g) = chain_video();
        let r = eval(&LineageGraph::new(), &[], &g, &d);
        assert_eq!(r.aogm, 10.0 * 4.0 + 1.5 * 3.0);
        assert_eq!(r.aogm0, r.aogm);
        assert_eq!(r.tra, 0.0);
    }

    #[test]
    fn distant_pred_is_fp_and_gt_is_fn() {
        let gd = vec![Detection::point(1, 0, 0.0, 0.0)];
        let pd = vec![Detection::point(7, 0, 50.0, 0.0)];
        let r = eval(&LineageGraph::from_nodes([7]), &pd, &LineageGraph::from_nodes([1]), &gd);
        assert_eq!((r.fn_nodes, r.fp), (1, 1));
    }
}
