use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trax_core::assignment::solve_with_skips;
use trax_core::gt_target::{match_frame, MaskPair};
use trax_core::Detection;

const DELTA: f64 = 10.0;

fn pair_cost(d: &Detection, g: &Detection) -> Option<f64> {
    let dx = d.pos[0] - g.pos[0];
    let dy = d.pos[1] - g.pos[1];
    let score = 1.0 - (dx * dx + dy * dy).sqrt() / DELTA;
    (score > 0.5).then_some(1.0 - score)
}

/// Minimum over every partial injection of dets into gts.
fn exhaustive(dets: &[Detection], gts: &[Detection], i: usize, used: &mut Vec<bool>) -> f64 {
    if i == dets.len() {
        return 0.5 * used.iter().filter(|u| !**u).count() as f64;
    }
    let mut best = 0.5 + exhaustive(dets, gts, i + 1, used);
    for k in 0..gts.len() {
        if used[k] {
            continue;
        }
        if let Some(c) = pair_cost(&dets[i], &gts[k]) {
            used[k] = true;
            best = best.min(c + exhaustive(dets, gts, i + 1, used));
            used[k] = false;
        }
    }
    best
}

fn random_frame(rng: &mut ChaCha8Rng, n: usize, base: u64) -> Vec<Detection> {
    (0..n)
        .map(|k| Detection::point(base + k as u64, 0, rng.random_range(0.0..15.0), rng.random_range(0.0..15.0)))
        .collect()
}

#[test]
fn match_frame_is_optimal_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (nd, ng) = (rng.random_range(0..=6), rng.random_range(0..=6));
        let dets = random_frame(&mut rng, nd, 1);
        let gts = random_frame(&mut rng, ng, 100);
        let m = match_frame(&dets, &gts, DELTA, MaskPair::default());
        let best = exhaustive(&dets, &gts, 0, &mut vec![false; gts.len()]);
        assert!((m.cost - best).abs() < 1e-9, "{} vs {best}", m.cost);
        assert!(m.is_one_to_one());
        assert_eq!(m.pairs.len() + m.unmatched_dets.len(), dets.len());
        assert_eq!(m.pairs.len() + m.unmatched_gts.len(), gts.len());
    }
}

#[test]
fn assignment_handles_rectangular_and_infeasible() {
    let inf = f64::INFINITY;
    let link = ndarray::array![[1.0, inf, 3.0], [inf, inf, inf]];
    let sol = solve_with_skips(&link, &[5.0, 5.0], &[5.0, 5.0, 5.0]);
    assert_eq!(sol, vec![Some(0), None]);
}
