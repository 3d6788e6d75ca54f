//! Window → token conversion and feature-level augmentation.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};
use crate::lineage::{Detection, Features, Frame, LineageGraph, NodeId, Window};
use crate::scalar::Scalar;
use crate::transformer::layers::Linear;

/// Learned Fourier encoding `Θ(p) = [sin(2πBp), cos(2πBp)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEncoder<T: Scalar> {
    /// `n_freq x 2` frequency matrix, cycles per pixel.
    pub freqs: Array2<T>,
}

impl<T: Scalar> FourierEncoder<T> {
    /// Gaussian frequencies with standard deviation `sigma` (cycles/px).
    pub fn random<R: Rng + ?Sized>(n_freq: usize, sigma: f64, rng: &mut R) -> Self {
        assert!(n_freq >= 1, "need at least one frequency");
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        let freqs = Array2::from_shape_fn((n_freq, 2), |_| T::lit(normal.sample(rng)));
        FourierEncoder { freqs }
    }

    pub fn zeros(n_freq: usize) -> Self {
        FourierEncoder {
            freqs: Array2::zeros((n_freq, 2)),
        }
    }

    pub fn n_freq(&self) -> usize {
        self.freqs.nrows()
    }

    pub fn dim(&self) -> usize {
        2 * self.n_freq()
    }

    pub fn encode(&self, p: [f64; 2]) -> Vec<T> {
        let m = self.encode_batch(&[p]);
        m.row(0).to_vec()
    }

    /// One row per position, `sin` block first.
    pub fn encode_batch(&self, positions: &[[f64; 2]]) -> Array2<T> {
        let nf = self.n_freq();
        let two_pi = T::lit(2.0 * PI);
        let mut out = Array2::zeros((positions.len(), 2 * nf));
        for (i, p) in positions.iter().enumerate() {
            let (x, y) = (T::lit(p[0]), T::lit(p[1]));
            for k in 0..nf {
                let phase = two_pi * (self.freqs[[k, 0]] * x + self.freqs[[k, 1]] * y);
                out[[i, k]] = phase.sin();
                out[[i, nf + k]] = phase.cos();
            }
        }
        out
    }

    /// Gradient of the frequency matrix given the gradient of the encoding.
    pub fn backward(&self, positions: &[[f64; 2]], d_out: &Array2<T>) -> Array2<T> {
        let nf = self.n_freq();
        let two_pi = T::lit(2.0 * PI);
        let mut grad = Array2::zeros((nf, 2));
        for (i, p) in positions.iter().enumerate() {
            let (x, y) = (T::lit(p[0]), T::lit(p[1]));
            for k in 0..nf {
                let phase = two_pi * (self.freqs[[k, 0]] * x + self.freqs[[k, 1]] * y);
                let g = two_pi * (phase.cos() * d_out[[i, k]] - phase.sin() * d_out[[i, nf + k]]);
                grad[[k, 0]] += g * x;
                grad[[k, 1]] += g * y;
            }
        }
        grad
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Positions only; `z` is empty.
    PointsOnly,
    /// Mean intensity, area and the three inertia-tensor components.
    Full,
}

impl FeatureMode {
    pub fn n_features(self) -> usize {
        match self {
            FeatureMode::PointsOnly => 0,
            FeatureMode::Full => Features::CHANNELS.len(),
        }
    }
}

/// Per-channel standardization statistics, frozen at training time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl Default for FeatureNorm {
    fn default() -> Self {
        FeatureNorm {
            mean: [0.0; 5],
            std: [1.0; 5],
        }
    }
}

impl FeatureNorm {
    pub fn fit<'a>(dets: impl IntoIterator<Item = &'a Detection>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; 5];
        let mut sq = [0.0; 5];
        for f in dets.into_iter().filter_map(|d| d.features.as_ref()) {
            n += 1;
            for (c, v) in f.channels().into_iter().enumerate() {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..5 {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            out.mean[c] = mean;
            out.std[c] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, f: &Features) -> [f64; 5] {
        let mut out = f.channels();
        for c in 0..5 {
            out[c] = (out[c] - self.mean[c]) / self.std[c];
        }
        out
    }
}

/// Tokens of one window, rows aligned with the window order.
#[derive(Clone, Debug)]
pub struct TokenBatch<T: Scalar> {
    pub tokens: Array2<T>,
    pub positions: Vec<[f64; 2]>,
    pub frames: Vec<Frame>,
    pub d_max: f64,
}

/// `[Θ(p_i), z_i]` for every row of the window.
pub fn raw_inputs<T: Scalar>(
    window: &Window,
    enc: &FourierEncoder<T>,
    mode: FeatureMode,
    norm: &FeatureNorm,
) -> Result<Array2<T>> {
    let positions: Vec<[f64; 2]> = window.detections().iter().map(|d| d.pos).collect();
    let pe = enc.encode_batch(&positions);
    let nz = mode.n_features();
    let mut out = Array2::zeros((window.len(), enc.dim() + nz));
    out.slice_mut(s![.., ..enc.dim()]).assign(&pe);
    if nz > 0 {
        for (i, d) in window.detections().iter().enumerate() {
            let f = d.features.as_ref().ok_or(TrackError::MissingFeature {
                id: d.id,
                channel: Features::CHANNELS[0],
            })?;
            for (c, v) in norm.apply(f).into_iter().enumerate() {
                if !v.is_finite() {
                    return Err(TrackError::MissingFeature {
                        id: d.id,
                        channel: Features::CHANNELS[c],
                    });
                }
                out[[i, enc.dim() + c]] = T::lit(v);
            }
        }
    }
    Ok(out)
}

/// Projects `[Θ(p_i), z_i]` to the token dimension with `input`.
pub fn build_tokens<T: Scalar>(
    window: &Window,
    enc: &FourierEncoder<T>,
    mode: FeatureMode,
    norm: &FeatureNorm,
    input: &Linear<T>,
    d_max: f64,
) -> Result<TokenBatch<T>> {
    let raw = raw_inputs(window, enc, mode, norm)?;
    Ok(TokenBatch {
        tokens: input.forward(&raw),
        positions: window.detections().iter().map(|d| d.pos).collect(),
        frames: window.frames(),
        d_max,
    })
}

/// Ranges of the feature-level augmentations. Each transform is sampled once
/// per window and applied to every detection in it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip: bool,
    pub rotate: bool,
    /// Isotropic scale factor range.
    pub scale: [f64; 2],
    /// Maximum absolute shear coefficient.
    pub shear: f64,
    /// Maximum absolute shift in pixels along each axis.
    pub shift: f64,
    /// Multiplicative intensity range.
    pub intensity_scale: [f64; 2],
    /// Additive intensity shift, in units of the raw intensity.
    pub intensity_shift: f64,
    /// Temporal subsampling factors to draw from.
    pub subsample: Vec<u32>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip: true,
            rotate: true,
            scale: [0.8, 1.25],
            shear: 0.1,
            shift: 20.0,
            intensity_scale: [0.8, 1.2],
            intensity_shift: 0.1,
            subsample: vec![1, 2],
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            subsample: vec![1],
            ..Self::default()
        }
    }
}

/// A sampled spatial and intensity transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureTransform {
    /// Row-major linear part.
    pub linear: [[f64; 2]; 2],
    pub center: [f64; 2],
    pub shift: [f64; 2],
    pub intensity_scale: f64,
    pub intensity_shift: f64,
}

impl FeatureTransform {
    pub fn identity() -> Self {
        FeatureTransform {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            center: [0.0, 0.0],
            shift: [0.0, 0.0],
            intensity_scale: 1.0,
            intensity_shift: 0.0,
        }
    }

    pub fn det(&self) -> f64 {
        let l = &self.linear;
        l[0][0] * l[1][1] - l[0][1] * l[1][0]
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, center: [f64; 2], rng: &mut R) -> Self {
        loop {
            let mut l = [[1.0, 0.0], [0.0, 1.0]];
            if cfg.flip {
                if rng.random_bool(0.5) {
                    l = matmul(l, [[-1.0, 0.0], [0.0, 1.0]]);
                }
                if rng.random_bool(0.5) {
                    l = matmul(l, [[1.0, 0.0], [0.0, -1.0]]);
                }
            }
            let sc = uniform(rng, cfg.scale);
            l = matmul([[sc, 0.0], [0.0, sc]], l);
            if cfg.shear > 0.0 {
                let sh = uniform(rng, [-cfg.shear, cfg.shear]);
                l = matmul([[1.0, sh], [0.0, 1.0]], l);
            }
            if cfg.rotate {
                let th = rng.random_range(0.0..2.0 * PI);
                l = matmul([[th.cos(), -th.sin()], [th.sin(), th.cos()]], l);
            }
            let t = FeatureTransform {
                linear: l,
                center,
                shift: [
                    uniform(rng, [-cfg.shift, cfg.shift]),
                    uniform(rng, [-cfg.shift, cfg.shift]),
                ],
                intensity_scale: uniform(rng, cfg.intensity_scale),
                intensity_shift: uniform(rng, [-cfg.intensity_shift, cfg.intensity_shift]),
            };
            // Degenerate maps are resampled.
            if t.det().abs() > 1e-9 {
                return t;
            }
        }
    }

    pub fn apply(&self, d: &Detection) -> Detection {
        let l = &self.linear;
        let (x, y) = (d.pos[0] - self.center[0], d.pos[1] - self.center[1]);
        let mut out = d.clone();
        out.pos = [
            l[0][0] * x + l[0][1] * y + self.center[0] + self.shift[0],
            l[1][0] * x + l[1][1] * y + self.center[1] + self.shift[1],
        ];
        if let Some(f) = &d.features {
            // Covariance-style moments transform as L C Lᵀ.
            let c = [[f.ixx, f.ixy], [f.ixy, f.iyy]];
            let lt = [[l[0][0], l[1][0]], [l[0][1], l[1][1]]];
            let c2 = matmul(matmul(*l, c), lt);
            out.features = Some(Features {
                area: f.area * self.det().abs(),
                intensity: f.intensity * self.intensity_scale + self.intensity_shift,
                ixx: c2[0][0],
                iyy: c2[1][1],
                ixy: 0.5 * (c2[0][1] + c2[1][0]),
            });
        }
        out
    }
}

fn matmul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Keeps every `k`-th frame of the window (starting at its first frame),
/// renumbers frames to be consecutive and composes gt edges across the
/// dropped frames.
pub fn subsample(window: &Window, gt: &LineageGraph, k: u32) -> Result<(Window, LineageGraph)> {
    if k == 0 {
        return Err(TrackError::Config("subsampling factor 0".into()));
    }
    let start = window.start();
    let kept: Vec<Detection> = window
        .detections()
        .iter()
        .filter(|d| (d.frame - start) % k == 0)
        .map(|d| {
            let mut d = d.clone();
            d.frame = start + (d.frame - start) / k;
            d
        })
        .collect();
    let ids: BTreeSet<NodeId> = kept.iter().map(|d| d.id).collect();
    let mut g = LineageGraph::from_nodes(ids.iter().copied());
    for d in &kept {
        if d.frame == start {
            continue;
        }
        let mut cur = Some(d.id);
        for _ in 0..k {
            cur = cur.and_then(|c| gt.parent(c));
        }
        if let Some(p) = cur.filter(|p| ids.contains(p)) {
            g.add_edge(p, d.id, None);
        }
    }
    let span = window.span().div_ceil(k).max(2);
    Ok((Window::new(start, span, kept)?, g))
}

/// Applies one sampled transform set jointly to all frames of a window.
///
/// `gt` describes the window's objects (detections double as gt here);
/// temporal subsampling re-derives it. The returned window has
/// `ceil(span / k)` frames for the drawn factor `k`.
pub fn augment_window<R: Rng + ?Sized>(
    window: &Window,
    gt: &LineageGraph,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(Window, LineageGraph)> {
    if !cfg.enabled {
        return Ok((window.clone(), gt.clone()));
    }
    let k = if cfg.subsample.is_empty() {
        1
    } else {
        cfg.subsample[rng.random_range(0..cfg.subsample.len())]
    };
    let (w, g) = if k > 1 {
        subsample(window, gt, k)?
    } else {
        (window.clone(), gt.clone())
    };
    let center = bbox_center(w.detections());
    let t = FeatureTransform::sample(cfg, center, rng);
    let dets = w.detections().iter().map(|d| t.apply(d)).collect();
    Ok((Window::new(w.start(), w.span(), dets)?, g))
}

/// Center of the detections' bounding box (origin for an empty set).
pub fn bbox_center(dets: &[Detection]) -> [f64; 2] {
    if dets.is_empty() {
        return [0.0, 0.0];
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for d in dets {
        for c in 0..2 {
            lo[c] = lo[c].min(d.pos[c]);
            hi[c] = hi[c].max(d.pos[c]);
        }
    }
    [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0]
}

/// Restricts a gt graph to the given ids.
pub fn restrict_graph(gt: &LineageGraph, ids: &HashMap<NodeId, usize>) -> LineageGraph {
    let mut g = LineageGraph::from_nodes(ids.keys().copied());
    for (p, c, s) in gt.edges() {
        if ids.contains_key(&p) && ids.contains_key(&c) {
            g.add_edge(p, c, s);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feat(area: f64, ixx: f64, iyy: f64, ixy: f64) -> Features {
        Features {
            area,
            intensity: 1.0,
            ixx,
            iyy,
            ixy,
        }
    }

    #[test]
    fn origin_encodes_to_zero_sin_unit_cos() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = FourierEncoder::<f64>::random(8, 0.1, &mut rng);
        let v = enc.encode([0.0, 0.0]);
        assert_eq!(v.len(), 16);
        assert!(v[..8].iter().all(|&x| x == 0.0));
        assert!(v[8..].iter().all(|&x| x == 1.0));
        let w = enc.encode([13.0, -4.0]);
        assert_eq!(w.len(), 16);
    }

    #[test]
    fn encoder_is_deterministic_per_seed() {
        let a = FourierEncoder::<f32>::random(4, 0.05, &mut ChaCha8Rng::seed_from_u64(7));
        let b = FourierEncoder::<f32>::random(4, 0.05, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.encode([3.5, 9.0]), b.encode([3.5, 9.0]));
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = FourierEncoder::<f64>::random(3, 0.05, &mut rng);
        let pos = [[1.0, 2.0], [-3.0, 4.5]];
        let upstream = Array2::from_shape_fn((2, 6), |(i, j)| (i as f64 + 1.0) * 0.3 - j as f64 * 0.1);
        let f = |e: &FourierEncoder<f64>| (&e.encode_batch(&pos) * &upstream).sum();
        let g = enc.backward(&pos, &upstream);
        let h = 1e-6;
        for k in 0..3 {
            for c in 0..2 {
                let mut p = enc.clone();
                p.freqs[[k, c]] += h;
                let mut m = enc.clone();
                m.freqs[[k, c]] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - g[[k, c]]).abs() < 1e-6, "{fd} vs {}", g[[k, c]]);
            }
        }
    }

    #[test]
    fn points_only_and_full_inputs() {
        let f = feat(10.0, 2.0, 1.0, 0.0);
        let dets = vec![
            Detection::point(1, 0, 0.0, 0.0).with_features(f),
            Detection::point(2, 1, 1.0, 1.0).with_features(f),
        ];
        let w = Window::new(0, 2, dets).unwrap();
        let enc = FourierEncoder::<f64>::zeros(4);
        let norm = FeatureNorm::default();
        assert_eq!(raw_inputs(&w, &enc, FeatureMode::PointsOnly, &norm).unwrap().ncols(), 8);
        assert_eq!(raw_inputs(&w, &enc, FeatureMode::Full, &norm).unwrap().ncols(), 13);

        let bare = Window::new(0, 2, vec![Detection::point(5, 0, 0.0, 0.0)]).unwrap();
        let err = raw_inputs(&bare, &enc, FeatureMode::Full, &norm).unwrap_err();
        assert!(matches!(err, TrackError::MissingFeature { id: 5, .. }));

        let empty = Window::new(0, 2, vec![]).unwrap();
        let lin = Linear::<f64>::zeros(8, 4);
        let tb = build_tokens(&empty, &enc, FeatureMode::PointsOnly, &norm, &lin, 10.0).unwrap();
        assert_eq!(tb.tokens.dim(), (0, 4));
    }

    #[test]
    fn rotation_preserves_areas_and_distances() {
        let dets: Vec<_> = (0..5)
            .map(|i| {
                Detection::point(i + 1, 0, i as f64 * 3.0, (i * i) as f64)
                    .with_features(feat(5.0 + i as f64, 2.0, 1.0, 0.3))
            })
            .collect();
        let th: f64 = 0.7;
        let t = FeatureTransform {
            linear: [[th.cos(), -th.sin()], [th.sin(), th.cos()]],
            center: [4.0, 4.0],
            shift: [2.0, -1.0],
            ..FeatureTransform::identity()
        };
        let out: Vec<_> = dets.iter().map(|d| t.apply(d)).collect();
        for i in 0..5 {
            let (a, b) = (dets[i].features.unwrap(), out[i].features.unwrap());
            assert!((a.area - b.area).abs() < 1e-12);
            for j in 0..5 {
                assert!((dets[i].distance(&dets[j]) - out[i].distance(&out[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn x_flip_mirrors_position_and_ixy() {
        // Oracle: two point masses at (±1, ±1) (a tilted dumbbell) and their
        // mirror images, covariance recomputed by hand.
        let pts = [[1.0, 1.0], [-1.0, -1.0]];
        let cov = |p: &[[f64; 2]]| {
            let n = p.len() as f64;
            let (mx, my) = (p.iter().map(|q| q[0]).sum::<f64>() / n, p.iter().map(|q| q[1]).sum::<f64>() / n);
            let xx = p.iter().map(|q| (q[0] - mx).powi(2)).sum::<f64>() / n;
            let yy = p.iter().map(|q| (q[1] - my).powi(2)).sum::<f64>() / n;
            let xy = p.iter().map(|q| (q[0] - mx) * (q[1] - my)).sum::<f64>() / n;
            (xx, yy, xy)
        };
        let (xx, yy, xy) = cov(&pts);
        let mirrored: Vec<[f64; 2]> = pts.iter().map(|q| [-q[0], q[1]]).collect();
        let (mxx, myy, mxy) = cov(&mirrored);

        let width = 100.0;
        let t = FeatureTransform {
            linear: [[-1.0, 0.0], [0.0, 1.0]],
            center: [width / 2.0, 0.0],
            ..FeatureTransform::identity()
        };
        let d = Detection::point(1, 0, 30.0, 7.0).with_features(feat(2.0, xx, yy, xy));
        let o = t.apply(&d);
        assert_eq!(o.pos, [width - 30.0, 7.0]);
        let f = o.features.unwrap();
        assert!((f.ixx - mxx).abs() < 1e-12 && (f.iyy - myy).abs() < 1e-12);
        assert!((f.ixy - mxy).abs() < 1e-12);
        assert_eq!(f.ixy, -xy);
    }

    #[test]
    fn subsampling_composes_edges() {
        // Chain 1 -> 2 -> ... -> 6 over frames 0..6.
        let dets: Vec<_> = (0..6).map(|t| Detection::point(t as u64 + 1, t, 0.0, 0.0)).collect();
        let mut g = LineageGraph::new();
        for t in 1..6u64 {
            g.add_edge(t, t + 1, None);
        }
        let w = Window::new(0, 6, dets).unwrap();
        let (w2, g2) = subsample(&w, &g, 2).unwrap();
        assert_eq!(w2.span(), 3);
        let frames: Vec<_> = w2.detections().iter().map(|d| (d.id, d.frame)).collect();
        assert_eq!(frames, vec![(1, 0), (3, 1), (5, 2)]);
        let edges: Vec<_> = g2.edges().map(|(p, c, _)| (p, c)).collect();
        assert_eq!(edges, vec![(1, 3), (3, 5)]);
    }

    #[test]
    fn sampled_transforms_keep_inertia_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AugmentConfig {
            scale: [0.7, 1.4],
            shear: 0.5,
            ..AugmentConfig::default()
        };
        let d = Detection::point(1, 0, 10.0, 10.0).with_features(feat(30.0, 9.0, 1.0, 2.9));
        for _ in 0..500 {
            let t = FeatureTransform::sample(&cfg, [0.0, 0.0], &mut rng);
            let o = t.apply(&d);
            assert!(o.features.unwrap().is_psd());
        }
    }
}
