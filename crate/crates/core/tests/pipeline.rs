use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trax_core::aggregator::{build_candidate_graph, distance_scores, infer_video, InferConfig, ScoreTable};
use trax_core::linkers::link_greedy;
use trax_core::metrics::{evaluate, EvalConfig, EvalInput};
use trax_core::sim::{generate, make_dataset, simulate, Manifest, SimConfig};
use trax_core::tokenizer::{FeatureMode, FeatureNorm};
use trax_core::transformer::{Model, ModelConfig};
use trax_core::{Detection, Window};

fn small_model(window: usize) -> Model<f64> {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        mlp_ratio: 2,
        n_freq: 4,
        fourier_sigma: 0.05,
        d_max: 50.0,
        window,
        max_tokens: 512,
        features: FeatureMode::PointsOnly,
        parental_softmax: true,
    };
    Model::new(cfg, FeatureNorm::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

#[test]
fn short_video_scores_equal_one_forward_pass() {
    let dets = vec![
        Detection::point(1, 0, 10.0, 10.0),
        Detection::point(2, 0, 30.0, 10.0),
        Detection::point(3, 1, 12.0, 11.0),
        Detection::point(4, 1, 29.0, 12.0),
    ];
    let model = small_model(4);
    let table = infer_video(&model, &dets, &InferConfig::default()).unwrap();
    let probs = model.predict(&Window::new(0, 2, dets.clone()).unwrap()).unwrap();
    for (p, c, gap, mean, count) in table.iter() {
        assert_eq!((gap, count), (1, 1));
        let (i, j) = ((p - 1) as usize, (c - 1) as usize);
        assert_eq!(mean, probs[[i, j]]);
    }
    assert_eq!(table.len(), 4);
}

#[test]
fn inference_is_deterministic() {
    let v = simulate(&SimConfig::easy().with_seed(9)).unwrap();
    let model = small_model(3);
    let a = infer_video(&model, &v.detections, &InferConfig::default()).unwrap();
    let b = infer_video(&model, &v.detections, &InferConfig::default()).unwrap();
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn distance_linking_errs_on_hard_preset() {
    let cfg = SimConfig::hard().with_seed(21);
    let v = simulate(&cfg).unwrap();
    let cand = build_candidate_graph(&distance_scores(&v.detections, cfg.dist_max), &v.detections, cfg.dist_max, 0.0);
    let sol = link_greedy(&cand, 0.5).unwrap();
    let input = EvalInput {
        pred: &sol.graph,
        pred_dets: &v.detections,
        gt: &v.gt,
        gt_dets: &v.detections,
        input_dets: None,
        masks: None,
    };
    let r = evaluate(&input, &EvalConfig::default()).unwrap().report;
    assert!(r.aogm > 0.0);
    assert_eq!(r.fn_nodes + r.fp + r.ns, 0);
}

#[test]
fn dataset_regenerates_from_manifest() {
    let (m, videos) = make_dataset(&vec![SimConfig::easy(); 4], [0.5, 0.25, 0.25], 3).unwrap();
    let json = serde_json::to_string(&m).unwrap();
    let back: Manifest = serde_json::from_str(&json).unwrap();
    assert_eq!(generate(&back).unwrap(), videos);
}

proptest! {
    #[test]
    fn raising_alpha_only_removes_edges(seed in 0u64..50, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let v = simulate(&SimConfig::easy().with_seed(seed)).unwrap();
        let table: ScoreTable = distance_scores(&v.detections, 30.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let g_lo = build_candidate_graph(&table, &v.detections, 30.0, lo);
        let g_hi = build_candidate_graph(&table, &v.detections, 30.0, hi);
        prop_assert!(g_hi.edges.len() <= g_lo.edges.len());
        for e in &g_hi.edges {
            prop_assert!(g_lo.edges.iter().any(|f| f.parent == e.parent && f.child == e.child));
        }
    }
}
