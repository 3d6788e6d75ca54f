use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trax_core::gt_target::WeightConfig;
use trax_core::tokenizer::{FeatureMode, FeatureNorm};
use trax_core::transformer::gradcheck::gradcheck;
use trax_core::transformer::train::TrainWindow;
use trax_core::transformer::{parental_softmax, LossConfig, Model, ModelConfig};
use trax_core::{Detection, Features, LineageGraph, Window};

fn config(d_model: usize, n_layers: usize, d_max: f64) -> ModelConfig {
    ModelConfig {
        d_model,
        n_layers,
        n_heads: 4,
        mlp_ratio: 2,
        n_freq: 6,
        fourier_sigma: 0.03,
        d_max,
        window: 3,
        max_tokens: 256,
        features: FeatureMode::Full,
        parental_softmax: true,
    }
}

fn random_window(rng: &mut ChaCha8Rng, per_frame: usize, frames: u32) -> (Window, LineageGraph) {
    let mut dets = Vec::new();
    let mut gt = LineageGraph::new();
    for t in 0..frames {
        for k in 0..per_frame {
            let id = (t as usize * per_frame + k + 1) as u64;
            let f = Features {
                area: rng.random_range(20.0..80.0),
                intensity: rng.random_range(0.2..2.0),
                ixx: rng.random_range(2.0..6.0),
                iyy: rng.random_range(2.0..6.0),
                ixy: rng.random_range(-1.0..1.0),
            };
            let x = 12.0 * k as f64 + rng.random_range(-3.0..3.0);
            let y = rng.random_range(0.0..20.0);
            dets.push(Detection::point(id, t, x, y).with_features(f));
            gt.add_node(id);
            if t > 0 {
                gt.add_edge(id - per_frame as u64, id, None);
            }
        }
    }
    (Window::new(0, frames, dets).unwrap(), gt)
}

fn norm_for(w: &Window) -> FeatureNorm {
    FeatureNorm::fit(w.detections())
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (w, gt) = random_window(&mut rng, 4, 2);
    let model = Model::<f64>::new(config(32, 2, 30.0), norm_for(&w), &mut rng).unwrap();
    let tw = TrainWindow::new(w, &gt);
    let (a, wt) = tw.matrices::<f64>(&WeightConfig::default());
    let r = gradcheck(&model, &tw.window, &a, &wt, LossConfig::default(), 1e-5, 1e-4).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn single_detection_gives_one_by_one_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = Window::new(0, 2, vec![Detection::point(1, 0, 3.0, 4.0).with_features(Features {
        area: 10.0,
        intensity: 1.0,
        ixx: 1.0,
        iyy: 1.0,
        ixy: 0.0,
    })])
    .unwrap();
    let model = Model::<f64>::new(config(16, 1, 10.0), FeatureNorm::default(), &mut rng).unwrap();
    assert_eq!(model.forward(&w).unwrap().dim(), (1, 1));
}

#[test]
fn zero_layers_is_outer_product_of_projected_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, _) = random_window(&mut rng, 3, 2);
    let model = Model::<f64>::new(config(16, 0, 30.0), norm_for(&w), &mut rng).unwrap();
    let x = model.input.forward(&model.inputs(&w).unwrap());
    let want = model.head_y.forward(&x).dot(&model.head_z.forward(&x).t());
    let got = model.forward(&w).unwrap();
    assert!((&got - &want).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn permuting_detections_permutes_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, _) = random_window(&mut rng, 4, 3);
    let model = Model::<f64>::new(config(16, 2, 25.0), norm_for(&w), &mut rng).unwrap();
    let base = model.forward(&w).unwrap();

    // Renumber ids so the window's canonical order becomes a permutation.
    let n = w.len();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let dets: Vec<Detection> = w
        .detections()
        .iter()
        .enumerate()
        .map(|(i, d)| Detection {
            id: 1000 + perm[i] as u64,
            ..d.clone()
        })
        .collect();
    let w2 = Window::new(0, 3, dets).unwrap();
    let moved = model.forward(&w2).unwrap();
    for i in 0..n {
        for j in 0..n {
            let ri = w2.row_of(1000 + perm[i] as u64).unwrap();
            let rj = w2.row_of(1000 + perm[j] as u64).unwrap();
            assert!((base[[i, j]] - moved[[ri, rj]]).abs() < 1e-9);
        }
    }
}

#[test]
fn masked_token_does_not_reach_far_encoder_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, _) = random_window(&mut rng, 3, 2);
    let model = Model::<f64>::new(config(16, 1, 8.0), norm_for(&w), &mut rng).unwrap();
    let dets = w.detections().to_vec();
    let positions: Vec<[f64; 2]> = dets.iter().map(|d| d.pos).collect();
    let geo = model.geometry(&positions, &w.frames());
    let x = model.input.forward(&model.inputs(&w).unwrap());
    let y = model.encoder[0].forward(&x, &x, &geo);

    let j = 0;
    let mut x2 = x.clone();
    x2.row_mut(j).mapv_inplace(|v| v + 3.0);
    let y2 = model.encoder[0].forward(&x2, &x2, &geo);
    let mut far = 0;
    for i in 0..dets.len() {
        if !geo.allowed[[i, j]] {
            far += 1;
            assert!((&y.row(i) - &y2.row(i)).iter().all(|d| d.abs() < 1e-12));
        }
    }
    assert!(far > 0, "instance should contain masked pairs");
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |_| rng.random_range(-scale..scale))
}

#[test]
fn parental_softmax_blocks_are_strictly_sub_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let frames: Vec<u32> = {
            let mut f: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            f.sort();
            f
        };
        let a = parental_softmax(&random_logits(&mut rng, n, 10.0), &frames);
        for j in 0..n {
            let s: f64 = (0..n).filter(|&i| frames[i] + 1 == frames[j]).map(|i| a[[i, j]]).sum();
            assert!(s < 1.0);
            for i in 0..n {
                assert!(a[[i, j]] > 0.0 && a[[i, j]] < 1.0);
            }
        }
    }
}

proptest! {
    #[test]
    fn raising_a_logit_raises_its_entry_and_lowers_siblings(
        seed in 0u64..10_000, col in 0usize..3, row in 0usize..3, bump in 0.01f64..3.0
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = [0, 0, 0, 1, 1, 1];
        let l = random_logits(&mut rng, 6, 5.0);
        let j = 3 + col;
        let before = parental_softmax(&l, &frames);
        let mut l2 = l.clone();
        l2[[row, j]] += bump;
        let after = parental_softmax(&l2, &frames);
        prop_assert!(after[[row, j]] > before[[row, j]]);
        for i in 0..3 {
            if i != row {
                prop_assert!(after[[i, j]] < before[[i, j]]);
            }
        }
    }
}
