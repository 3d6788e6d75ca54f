//! Masked multi-head attention blocks with rotary position embeddings.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{join, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, Parameters};
use crate::lineage::Frame;
use crate::scalar::Scalar;

/// Rotary embedding over `(x, y, t)`.
///
/// The channel pairs of a head are split into three contiguous groups, one
/// per axis. Group `a` with `k` pairs rotates pair `m` by
/// `coord_a * π * 2^m / scale_a`, so the slowest pair is unambiguous over
/// offsets up to `scale_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rope {
    /// `(axis, angular frequency)` per channel pair.
    pairs: Vec<(usize, f64)>,
}

impl Rope {
    pub fn new(head_dim: usize, spatial_scale: f64, temporal_scale: f64) -> Self {
        assert!(head_dim % 2 == 0, "head dimension must be even");
        let n_pairs = head_dim / 2;
        let mut counts = [n_pairs / 3; 3];
        for c in counts.iter_mut().take(n_pairs % 3) {
            *c += 1;
        }
        let scales = [spatial_scale, spatial_scale, temporal_scale];
        let mut pairs = Vec::with_capacity(n_pairs);
        for axis in 0..3 {
            for m in 0..counts[axis] {
                pairs.push((axis, PI * 2f64.powi(m as i32) / scales[axis]));
            }
        }
        Rope { pairs }
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Cosine and sine tables, `n x n_pairs`.
    pub fn tables<T: Scalar>(&self, positions: &[[f64; 2]], frames: &[Frame]) -> (Array2<T>, Array2<T>) {
        let n = positions.len();
        let mut cos = Array2::zeros((n, self.pairs.len()));
        let mut sin = Array2::zeros((n, self.pairs.len()));
        for i in 0..n {
            let coord = [positions[i][0], positions[i][1], frames[i] as f64];
            for (p, &(axis, w)) in self.pairs.iter().enumerate() {
                let phase = coord[axis] * w;
                cos[[i, p]] = T::lit(phase.cos());
                sin[[i, p]] = T::lit(phase.sin());
            }
        }
        (cos, sin)
    }
}

/// Per-window quantities shared by every attention layer.
pub struct Geometry<T: Scalar> {
    /// `allowed[[i, j]]` iff `‖p_i − p_j‖ ≤ d_max`.
    pub allowed: Array2<bool>,
    pub cos: Array2<T>,
    pub sin: Array2<T>,
}

impl<T: Scalar> Geometry<T> {
    pub fn new(rope: &Rope, positions: &[[f64; 2]], frames: &[Frame], d_max: f64) -> Self {
        let n = positions.len();
        let d2 = d_max * d_max;
        let allowed = Array2::from_shape_fn((n, n), |(i, j)| {
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            i == j || dx * dx + dy * dy <= d2
        });
        let (cos, sin) = rope.tables(positions, frames);
        Geometry { allowed, cos, sin }
    }

    pub fn len(&self) -> usize {
        self.allowed.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rotates every head of `x` in place, or undoes the rotation.
    fn rotate(&self, x: &mut Array2<T>, n_heads: usize, inverse: bool) {
        let (n, d) = x.dim();
        let dh = d / n_heads;
        let np = self.cos.ncols();
        for i in 0..n {
            for h in 0..n_heads {
                for p in 0..np {
                    let c = self.cos[[i, p]];
                    let s = if inverse { -self.sin[[i, p]] } else { self.sin[[i, p]] };
                    let a = h * dh + 2 * p;
                    let (x0, x1) = (x[[i, a]], x[[i, a + 1]]);
                    x[[i, a]] = x0 * c - x1 * s;
                    x[[i, a + 1]] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Row softmax restricted to allowed entries; others get exactly zero.
fn masked_softmax<T: Scalar>(scores: &mut Array2<T>, allowed: &Array2<bool>) {
    for (mut row, ok) in scores.outer_iter_mut().zip(allowed.outer_iter()) {
        let mut max = T::neg_infinity();
        for (v, &a) in row.iter().zip(ok.iter()) {
            if a && *v > max {
                max = *v;
            }
        }
        let mut sum = T::zero();
        for (v, &a) in row.iter_mut().zip(ok.iter()) {
            if a {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// One post-norm block: attention, residual, norm, MLP, residual, norm.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<T: Scalar> {
    pub n_heads: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub norm1: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub norm2: LayerNorm<T>,
}

pub struct AttentionCache<T: Scalar> {
    xq: Array2<T>,
    xkv: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    mixed: Array2<T>,
    norm1: LayerNormCache<T>,
    mlp: MlpCache<T>,
    norm2: LayerNormCache<T>,
}

impl<T: Scalar> AttentionLayer<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, n_heads: usize, hidden: usize, rng: &mut R) -> Self {
        assert!(n_heads > 0 && d % n_heads == 0, "heads must divide d");
        AttentionLayer {
            n_heads,
            wq: Linear::new(d, d, rng),
            wk: Linear::new(d, d, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            norm1: LayerNorm::new(d),
            mlp: Mlp::new(d, hidden, d, rng),
            norm2: LayerNorm::new(d),
        }
    }

    pub fn zeros(d: usize, n_heads: usize, hidden: usize) -> Self {
        AttentionLayer {
            n_heads,
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            norm1: LayerNorm::zeros(d),
            mlp: Mlp::zeros(d, hidden, d),
            norm2: LayerNorm::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.wq.w.nrows(), self.n_heads, self.mlp.fc1.w.ncols())
    }

    fn head_dim(&self) -> usize {
        self.wq.w.ncols() / self.n_heads
    }

    fn attend(&self, xq: &Array2<T>, xkv: &Array2<T>, geo: &Geometry<T>, keep: bool) -> (Array2<T>, Vec<Array2<T>>, [Array2<T>; 3]) {
        let mut q = self.wq.forward(xq);
        let mut k = self.wk.forward(xkv);
        let v = self.wv.forward(xkv);
        geo.rotate(&mut q, self.n_heads, false);
        geo.rotate(&mut k, self.n_heads, false);
        let dh = self.head_dim();
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut mixed = Array2::zeros(q.dim());
        let mut probs = Vec::new();
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            masked_softmax(&mut sc, &geo.allowed);
            mixed.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            if keep {
                probs.push(sc);
            }
        }
        (mixed, probs, [q, k, v])
    }

    /// Attention weights of every head, for inspection.
    pub fn attention_weights(&self, xq: &Array2<T>, xkv: &Array2<T>, geo: &Geometry<T>) -> Vec<Array2<T>> {
        self.attend(xq, xkv, geo, true).1
    }

    pub fn forward(&self, xq: &Array2<T>, xkv: &Array2<T>, geo: &Geometry<T>) -> Array2<T> {
        let (mixed, _, _) = self.attend(xq, xkv, geo, false);
        let (h, _) = self.norm1.forward(&(xq + &self.wo.forward(&mixed)));
        let (out, _) = self.norm2.forward(&(&h + &self.mlp.forward(&h)));
        out
    }

    pub fn forward_cached(&self, xq: &Array2<T>, xkv: &Array2<T>, geo: &Geometry<T>) -> (Array2<T>, AttentionCache<T>) {
        let (mixed, probs, [q, k, v]) = self.attend(xq, xkv, geo, true);
        let (h, norm1) = self.norm1.forward(&(xq + &self.wo.forward(&mixed)));
        let (m, mlp) = self.mlp.forward_cached(&h);
        let (out, norm2) = self.norm2.forward(&(&h + &m));
        let cache = AttentionCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            probs,
            mixed,
            norm1,
            mlp,
            norm2,
        };
        (out, cache)
    }

    /// Returns `(dL/dxq, dL/dxkv)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        geo: &Geometry<T>,
        dout: &Array2<T>,
        grad: &mut AttentionLayer<T>,
    ) -> (Array2<T>, Array2<T>) {
        let dsum2 = self.norm2.backward(&cache.norm2, dout, &mut grad.norm2);
        let dh = &dsum2 + &self.mlp.backward(&cache.mlp, &dsum2, &mut grad.mlp);
        let dsum1 = self.norm1.backward(&cache.norm1, &dh, &mut grad.norm1);
        let dmixed = self.wo.backward(&cache.mixed, &dsum1, &mut grad.wo);

        let hd = self.head_dim();
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for h in 0..self.n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = &cache.probs[h];
            let dm = dmixed.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dm));
            let dp = dm.dot(&cache.v.slice(cols).t());
            let ds = softmax_backward(p.view(), &dp) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        geo.rotate(&mut dq, self.n_heads, true);
        geo.rotate(&mut dk, self.n_heads, true);

        let dxq = &dsum1 + &self.wq.backward(&cache.xq, &dq, &mut grad.wq);
        let dxkv = self.wk.backward(&cache.xkv, &dk, &mut grad.wk) + self.wv.backward(&cache.xkv, &dv, &mut grad.wv);
        (dxq, dxkv)
    }
}

fn softmax_backward<T: Scalar>(p: ArrayView2<T>, dp: &Array2<T>) -> Array2<T> {
    let dot = (&p * dp).sum_axis(Axis(1)).insert_axis(Axis(1));
    &p * &(dp - &dot)
}

impl<T: Scalar> Parameters<T> for AttentionLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}
