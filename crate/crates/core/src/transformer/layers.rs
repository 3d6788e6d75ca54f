//! Dense building blocks with explicit backward passes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::scalar::Scalar;

/// Visits every learnable tensor in a fixed order.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform weights in `±1/sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| T::lit(rng.random_range(-bound..bound)));
        Linear {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "w"), self.w.shape(), self.w.as_slice().unwrap());
        f(&join(prefix, "b"), self.b.shape(), self.b.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "w"), self.w.as_slice_mut().unwrap());
        f(&join(prefix, "b"), self.b.as_slice_mut().unwrap());
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

pub struct LayerNormCache<T: Scalar> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let (n, d) = x.dim();
        let dn = T::lit(d as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for (i, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * inv;
            }
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Array2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        let (n, d) = dy.dim();
        let dn = T::lit(d as f64);
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            let k = cache.inv_std[i] / dn;
            for j in 0..d {
                dx[[i, j]] = k * (dn * g[j] - sum_g - xh[j] * sum_gx);
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "gamma"), self.gamma.shape(), self.gamma.as_slice().unwrap());
        f(&join(prefix, "beta"), self.beta.shape(), self.beta.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "gamma"), self.gamma.as_slice_mut().unwrap());
        f(&join(prefix, "beta"), self.beta.as_slice_mut().unwrap());
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GeLU, tanh form.
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(SQRT_2_OVER_PI);
    let c = T::lit(GELU_C);
    let th = (k * (x + c * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Two linear layers with a GeLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct MlpCache<T: Scalar> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(d_in, hidden, rng),
            fc2: Linear::new(hidden, d_out, rng),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp {
            fc1: Linear::zeros(d_in, hidden),
            fc2: Linear::zeros(hidden, d_out),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        self.fc2.forward(&self.fc1.forward(x).mapv(gelu))
    }

    pub fn forward_cached(&self, x: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Array2<T>, grad: &mut Mlp<T>) -> Array2<T> {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let dpre = &dact * &cache.pre.mapv(gelu_grad);
        self.fc1.backward(&cache.x, &dpre, &mut grad.fc1)
    }
}

impl<T: Scalar> Parameters<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::<f64>::new(4);
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 11.0]];
        let (y, _) = ln.forward(&x);
        for row in y.outer_iter() {
            assert!(row.sum().abs() < 1e-9);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::<f64>::new(3, 5, 2, &mut rng);
        let ln = LayerNorm::<f64> {
            gamma: Array1::from(vec![1.5, 0.5, 1.0]),
            beta: Array1::from(vec![0.1, -0.2, 0.0]),
        };
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.37 - 1.1);
        let up = Array2::from_shape_fn((4, 2), |(i, j)| 0.2 * i as f64 - 0.3 * j as f64 + 0.05);
        let loss = |x: &Array2<f64>| (&mlp.forward(&ln.forward(x).0) * &up).sum();
        let (h, lc) = ln.forward(&x);
        let (_, mc) = mlp.forward_cached(&h);
        let mut gm = Mlp::zeros(3, 5, 2);
        let mut gl = LayerNorm::zeros(3);
        let dh = mlp.backward(&mc, &up, &mut gm);
        let dx = ln.backward(&lc, &dh, &mut gl);
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut p = x.clone();
                p[[i, j]] += eps;
                let mut m = x.clone();
                m[[i, j]] -= eps;
                let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-6, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }
}
