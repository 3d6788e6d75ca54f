use std::collections::HashMap;

use proptest::prelude::*;
use trax_core::mask::{Mask, MaskStore};
use trax_core::metrics::{evaluate, write_error_tree, AogmReport, EdgeLabel, EvalConfig, EvalInput};
use trax_core::{Detection, LineageGraph, NodeId};

/// Two chains over four frames; chain A divides at frame 1.
///
/// ```text
/// 1 - 2 - 3 - 4
///      \- 5 - 6
/// 7 - 8 - 9 - 10
/// ```
fn gt() -> (Vec<Detection>, LineageGraph) {
    let pos: [(NodeId, u32, f64, f64); 10] = [
        (1, 0, 10.0, 10.0),
        (2, 1, 10.0, 10.0),
        (3, 2, 8.0, 10.0),
        (4, 3, 8.0, 10.0),
        (5, 2, 14.0, 10.0),
        (6, 3, 14.0, 10.0),
        (7, 0, 60.0, 60.0),
        (8, 1, 60.0, 60.0),
        (9, 2, 60.0, 60.0),
        (10, 3, 60.0, 60.0),
    ];
    let dets = pos.iter().map(|&(id, t, x, y)| Detection::point(id, t, x, y)).collect();
    let mut g = LineageGraph::from_nodes(1..=10);
    for (p, c) in [(1, 2), (2, 3), (3, 4), (2, 5), (5, 6), (7, 8), (8, 9), (9, 10)] {
        g.add_edge(p, c, None);
    }
    (dets, g)
}

fn run(pred: &LineageGraph, pd: &[Detection], g: &LineageGraph, gd: &[Detection], tol: u32) -> AogmReport {
    let input = EvalInput {
        pred,
        pred_dets: pd,
        gt: g,
        gt_dets: gd,
        input_dets: None,
        masks: None,
    };
    let cfg = EvalConfig {
        division_tol: tol,
        ..EvalConfig::default()
    };
    evaluate(&input, &cfg).unwrap().report
}

#[test]
fn perfect_prediction() {
    let (d, g) = gt();
    let r = run(&g, &d, &g, &d, 1);
    assert_eq!(r.aogm, 0.0);
    assert_eq!(r.tra, 1.0);
    assert_eq!((r.tp_divs, r.fp_divs, r.fn_divs), (1, 0, 0));
    assert_eq!(r.div_f1, 1.0);
}

#[test]
fn one_missing_linear_edge() {
    let (d, g) = gt();
    let mut p = g.clone();
    p.remove_edge(8, 9);
    let r = run(&p, &d, &g, &d, 1);
    assert_eq!((r.ea, r.ed, r.ec), (1, 0, 0));
    assert_eq!(r.aogm, 1.5);
}

#[test]
fn spurious_edge_between_chain_end_and_track_start() {
    let (mut d, mut g) = gt();
    // A track starting at frame 4 that the prediction hangs onto 4.
    d.push(Detection::point(11, 4, 200.0, 200.0));
    g.add_node(11);
    let mut p = g.clone();
    p.add_edge(4, 11, None);
    let r = run(&p, &d, &g, &d, 1);
    assert_eq!((r.ed, r.ea, r.ec, r.fn_nodes, r.fp), (1, 0, 0, 0, 0));
    assert_eq!(r.aogm, 1.0);
}

#[test]
fn missing_node_with_one_edge() {
    let (d, g) = gt();
    let pd: Vec<Detection> = d.iter().filter(|x| x.id != 10).cloned().collect();
    let mut p = LineageGraph::from_nodes(pd.iter().map(|x| x.id));
    for (a, b, _) in g.edges().filter(|e| e.1 != 10) {
        p.add_edge(a, b, None);
    }
    let r = run(&p, &pd, &g, &d, 1);
    assert_eq!((r.fn_nodes, r.ea), (1, 1));
    assert_eq!(r.aogm, 11.5);
}

#[test]
fn empty_prediction() {
    let (d, g) = gt();
    let r = run(&LineageGraph::new(), &[], &g, &d, 1);
    assert_eq!(r.aogm, 10.0 * 10.0 + 1.5 * 8.0);
    assert_eq!(r.aogm0, r.aogm);
    assert_eq!(r.tra, 0.0);
    assert_eq!(r.fn_divs, 1);
}

#[test]
fn empty_gt_is_flagged() {
    let r = run(&LineageGraph::new(), &[], &LineageGraph::new(), &[], 1);
    assert!(r.empty_gt);
    assert_eq!(r.tra, 1.0);
}

#[test]
fn extra_division_is_false_positive() {
    let (mut d, mut g) = gt();
    d.push(Detection::point(11, 2, 70.0, 60.0));
    g.add_node(11);
    let mut p = g.clone();
    p.add_edge(8, 11, None);
    let r = run(&p, &d, &g, &d, 1);
    assert_eq!(r.fp_divs, 1);
    assert_eq!(r.fn_divs, 0);
    // The spurious edge is deleted before link semantics are compared.
    assert_eq!((r.ed, r.ec), (1, 0));
    assert_eq!(r.aogm, 1.0);
}

/// gt: 1 divides into 2, 3 at frame 0; pred: 1 -> 2 continues and 2
/// divides into 4, 5 one frame late.
#[test]
fn late_division_within_tolerance() {
    let d = vec![
        Detection::point(1, 0, 10.0, 10.0),
        Detection::point(2, 1, 8.0, 10.0),
        Detection::point(3, 1, 12.0, 10.0),
        Detection::point(4, 2, 8.0, 10.0),
        Detection::point(5, 2, 12.0, 10.0),
    ];
    let mut g = LineageGraph::from_nodes(1..=5);
    for (a, b) in [(1, 2), (1, 3), (2, 4), (3, 5)] {
        g.add_edge(a, b, None);
    }
    let mut p = LineageGraph::from_nodes(1..=5);
    for (a, b) in [(1, 2), (2, 4), (2, 5)] {
        p.add_edge(a, b, None);
    }
    let r1 = run(&p, &d, &g, &d, 1);
    assert_eq!((r1.tp_divs, r1.fp_divs, r1.fn_divs), (1, 0, 0));
    let r0 = run(&p, &d, &g, &d, 0);
    assert_eq!((r0.tp_divs, r0.fp_divs, r0.fn_divs), (0, 1, 1));
}

#[test]
fn merged_mask_is_one_split() {
    let gd = vec![Detection::point(1, 0, 2.0, 2.0), Detection::point(2, 0, 8.0, 2.0)];
    let pd = vec![Detection::point(9, 0, 5.0, 2.0)];
    let gm: MaskStore = HashMap::from([(1, Mask::rect(0, 4, 0, 4)), (2, Mask::rect(0, 4, 6, 10))]);
    let pm: MaskStore = HashMap::from([(9, Mask::rect(0, 4, 0, 10))]);
    let g = LineageGraph::from_nodes([1, 2]);
    let p = LineageGraph::from_nodes([9]);
    let input = EvalInput {
        pred: &p,
        pred_dets: &pd,
        gt: &g,
        gt_dets: &gd,
        input_dets: None,
        masks: Some((&pm, &gm)),
    };
    let r = evaluate(&input, &EvalConfig::default()).unwrap().report;
    assert_eq!((r.ns, r.fn_nodes, r.fp), (1, 0, 0));
    assert_eq!(r.aogm, 5.0);
}

#[test]
fn error_tree_labels() {
    let (d, g) = gt();
    let mut p = g.clone();
    p.remove_edge(8, 9);
    let input = EvalInput {
        pred: &p,
        pred_dets: &d,
        gt: &g,
        gt_dets: &d,
        input_dets: None,
        masks: None,
    };
    let ev = evaluate(&input, &EvalConfig::default()).unwrap();
    let fns: Vec<_> = ev.edges.iter().filter(|e| e.label == EdgeLabel::Fn).collect();
    assert_eq!(fns.len(), 1);
    assert_eq!((fns[0].parent_id, fns[0].child_id), (8, 9));
    assert_eq!(ev.edges.iter().filter(|e| e.label == EdgeLabel::Tp).count(), 7);
    let mut buf = Vec::new();
    write_error_tree(&ev.edges, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("parent_id,child_id,frame,source,label\n"));
    assert!(text.contains("8,9,1,gt,FN\n"));
}

#[test]
fn aogm_plus_subtracts_detector_misses() {
    let (d, g) = gt();
    let pd: Vec<Detection> = d.iter().filter(|x| x.id != 10).cloned().collect();
    let p = LineageGraph::from_nodes(pd.iter().map(|x| x.id));
    let input = EvalInput {
        pred: &p,
        pred_dets: &pd,
        gt: &g,
        gt_dets: &d,
        input_dets: Some(&pd),
        masks: None,
    };
    let r = evaluate(&input, &EvalConfig::default()).unwrap().report;
    assert_eq!(r.fn_detector, 1);
    assert_eq!(r.aogm_plus, r.aogm - 10.0);
}

proptest! {
    #[test]
    fn removing_edges_costs_exactly_their_weight(mask in 0u32..256) {
        let (d, g) = gt();
        let mut p = g.clone();
        let edges: Vec<_> = g.edges().map(|(a, b, _)| (a, b)).collect();
        let mut removed = 0;
        for (k, &(a, b)) in edges.iter().enumerate() {
            if mask >> k & 1 == 1 {
                p.remove_edge(a, b);
                removed += 1;
            }
        }
        let r = run(&p, &d, &g, &d, 1);
        prop_assert_eq!(r.ea, removed);
        prop_assert!(r.tra >= 0.0 && r.tra <= 1.0);
        prop_assert!((r.aogm - r.weighted_sum()).abs() < 1e-12);
        // Removing one daughter edge turns the other into a linear link.
        let div_broken = (mask >> 1 & 1) ^ (mask >> 2 & 1) == 1;
        prop_assert_eq!(r.ec, usize::from(div_broken));
    }
}
