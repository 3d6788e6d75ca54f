//! The association model: tokens → encoder/decoder stack → outer-product
//! logits.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionCache, AttentionLayer, Geometry, Rope};
use super::layers::{join, Linear, Mlp, MlpCache, Parameters};
use super::loss::{loss, probabilities, LossConfig};
use crate::error::{Result, TrackError};
use crate::lineage::{Frame, Window};
use crate::scalar::Scalar;
use crate::tokenizer::{raw_inputs, FeatureMode, FeatureNorm, FourierEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token width `d`.
    pub d_model: usize,
    /// Encoder and decoder depth each.
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the attention MLPs as a multiple of `d`.
    pub mlp_ratio: usize,
    /// Number of Fourier frequencies.
    pub n_freq: usize,
    /// Standard deviation of the initial frequencies, cycles per pixel.
    pub fourier_sigma: f64,
    /// Attention radius in pixels.
    pub d_max: f64,
    /// Window size `s` in frames.
    pub window: usize,
    /// Token budget `|D|`.
    pub max_tokens: usize,
    pub features: FeatureMode,
    /// Normalize with the parental softmax (otherwise plain logistic).
    pub parental_softmax: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            n_layers: 6,
            n_heads: 4,
            mlp_ratio: 2,
            n_freq: 32,
            fourier_sigma: 0.01,
            d_max: 100.0,
            window: 6,
            max_tokens: 2048,
            features: FeatureMode::Full,
            parental_softmax: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrackError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("n_heads must divide d_model");
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return bad("head width must be even for rotary embeddings");
        }
        if self.window < 2 {
            return bad("window must be at least 2 frames");
        }
        if self.n_freq == 0 || self.mlp_ratio == 0 || self.max_tokens == 0 {
            return bad("n_freq, mlp_ratio and max_tokens must be positive");
        }
        if !(self.d_max > 0.0) {
            return bad("d_max must be positive");
        }
        Ok(())
    }

    pub fn rope(&self) -> Rope {
        Rope::new(self.d_model / self.n_heads, self.d_max, self.window as f64)
    }

    fn input_dim(&self) -> usize {
        2 * self.n_freq + self.features.n_features()
    }
}

/// All learnable tensors plus the frozen feature statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub norm: FeatureNorm,
    pub fourier: FourierEncoder<T>,
    pub input: Linear<T>,
    pub encoder: Vec<AttentionLayer<T>>,
    pub decoder: Vec<AttentionLayer<T>>,
    pub head_y: Mlp<T>,
    pub head_z: Mlp<T>,
}

pub struct ModelCache<T: Scalar> {
    raw: Array2<T>,
    positions: Vec<[f64; 2]>,
    geo: Geometry<T>,
    encoder: Vec<AttentionCache<T>>,
    decoder: Vec<AttentionCache<T>>,
    y: Array2<T>,
    z: Array2<T>,
    head_y: MlpCache<T>,
    head_z: MlpCache<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, norm: FeatureNorm, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hidden = d * config.mlp_ratio;
        let fourier = FourierEncoder::random(config.n_freq, config.fourier_sigma, rng);
        let input = Linear::new(config.input_dim(), d, rng);
        let encoder = (0..config.n_layers)
            .map(|_| AttentionLayer::new(d, config.n_heads, hidden, rng))
            .collect();
        let decoder = (0..config.n_layers)
            .map(|_| AttentionLayer::new(d, config.n_heads, hidden, rng))
            .collect();
        let head_y = Mlp::new(d, d, d, rng);
        let head_z = Mlp::new(d, d, d, rng);
        Ok(Model {
            config,
            norm,
            fourier,
            input,
            encoder,
            decoder,
            head_y,
            head_z,
        })
    }

    /// Same shapes, every tensor zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut("", &mut |_, xs| xs.iter_mut().for_each(|x| *x = T::zero()));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, xs| n += xs.len());
        n
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit("", &mut |_, _, xs| out.extend_from_slice(xs));
        out
    }

    pub fn load_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.n_params(), "parameter count mismatch");
        let mut at = 0;
        self.visit_mut("", &mut |_, xs| {
            xs.copy_from_slice(&flat[at..at + xs.len()]);
            at += xs.len();
        });
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig, norm: FeatureNorm) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hidden = d * config.mlp_ratio;
        let layers = || {
            (0..config.n_layers)
                .map(|_| AttentionLayer::zeros(d, config.n_heads, hidden))
                .collect()
        };
        Ok(Model {
            fourier: FourierEncoder::zeros(config.n_freq),
            input: Linear::zeros(config.input_dim(), d),
            encoder: layers(),
            decoder: layers(),
            head_y: Mlp::zeros(d, d, d),
            head_z: Mlp::zeros(d, d, d),
            config,
            norm,
        })
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::zeros(self.config.clone(), self.norm.clone()).expect("validated config");
        let flat: Vec<U> = self.flatten().into_iter().map(|x| U::lit(x.as_f64())).collect();
        out.load_flat(&flat);
        out
    }

    /// `[Θ(p), z]` rows for the window, rejecting windows above `|D|`.
    pub fn inputs(&self, window: &Window) -> Result<Array2<T>> {
        if window.len() > self.config.max_tokens {
            return Err(TrackError::WindowTooLarge {
                got: window.len(),
                max: self.config.max_tokens,
            });
        }
        raw_inputs(window, &self.fourier, self.config.features, &self.norm)
    }

    pub fn geometry(&self, positions: &[[f64; 2]], frames: &[Frame]) -> Geometry<T> {
        Geometry::new(&self.config.rope(), positions, frames, self.config.d_max)
    }

    /// Logits `Â` for one window.
    pub fn forward(&self, window: &Window) -> Result<Array2<T>> {
        let raw = self.inputs(window)?;
        let positions: Vec<[f64; 2]> = window.detections().iter().map(|d| d.pos).collect();
        let geo = self.geometry(&positions, &window.frames());
        let x = self.input.forward(&raw);
        let mut y = x.clone();
        for layer in &self.encoder {
            y = layer.forward(&y, &y, &geo);
        }
        let mut z = x;
        for layer in &self.decoder {
            z = layer.forward(&z, &y, &geo);
        }
        Ok(self.head_y.forward(&y).dot(&self.head_z.forward(&z).t()))
    }

    /// Association probabilities for one window.
    pub fn predict(&self, window: &Window) -> Result<Array2<T>> {
        let logits = self.forward(window)?;
        Ok(probabilities(&logits, &window.frames(), self.config.parental_softmax))
    }

    pub fn forward_cached(&self, window: &Window) -> Result<(Array2<T>, ModelCache<T>)> {
        let raw = self.inputs(window)?;
        let positions: Vec<[f64; 2]> = window.detections().iter().map(|d| d.pos).collect();
        let geo = self.geometry(&positions, &window.frames());
        let x = self.input.forward(&raw);
        let mut y = x.clone();
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (next, c) = layer.forward_cached(&y, &y, &geo);
            encoder.push(c);
            y = next;
        }
        let mut z = x;
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (next, c) = layer.forward_cached(&z, &y, &geo);
            decoder.push(c);
            z = next;
        }
        let (hy, head_y) = self.head_y.forward_cached(&y);
        let (hz, head_z) = self.head_z.forward_cached(&z);
        let logits = hy.dot(&hz.t());
        let cache = ModelCache {
            raw,
            positions,
            geo,
            encoder,
            decoder,
            y: hy,
            z: hz,
            head_y,
            head_z,
        };
        Ok((logits, cache))
    }

    /// Accumulates `dL/dθ` for upstream gradient `dlogits` into `grad`.
    pub fn backward(&self, cache: &ModelCache<T>, dlogits: &Array2<T>, grad: &mut Model<T>) {
        let dhy = dlogits.dot(&cache.z);
        let dhz = dlogits.t().dot(&cache.y);
        let mut dy = self.head_y.backward(&cache.head_y, &dhy, &mut grad.head_y);
        let mut dz = self.head_z.backward(&cache.head_z, &dhz, &mut grad.head_z);
        for (l, layer) in self.decoder.iter().enumerate().rev() {
            let (dq, dkv) = layer.backward(&cache.decoder[l], &cache.geo, &dz, &mut grad.decoder[l]);
            dz = dq;
            dy += &dkv;
        }
        for (l, layer) in self.encoder.iter().enumerate().rev() {
            let (dq, dkv) = layer.backward(&cache.encoder[l], &cache.geo, &dy, &mut grad.encoder[l]);
            dy = dq + dkv;
        }
        let dx = dy + dz;
        let draw = self.input.backward(&cache.raw, &dx, &mut grad.input);
        let nf2 = 2 * self.config.n_freq;
        let dpe = draw.slice(s![.., ..nf2]).to_owned();
        grad.fourier.freqs += &self.fourier.backward(&cache.positions, &dpe);
    }

    /// Loss of one sample and its gradient.
    pub fn loss_and_grad(
        &self,
        window: &Window,
        target: &Array2<T>,
        weights: &Array2<T>,
        cfg: LossConfig,
    ) -> Result<(T, Model<T>)> {
        let (logits, cache) = self.forward_cached(window)?;
        let (value, dlogits) = loss(target, &logits, weights, &window.frames(), cfg);
        let mut grad = self.zeros_like();
        self.backward(&cache, &dlogits, &mut grad);
        Ok((value, grad))
    }

    pub fn loss_value(&self, window: &Window, target: &Array2<T>, weights: &Array2<T>, cfg: LossConfig) -> Result<T> {
        let logits = self.forward(window)?;
        Ok(loss(target, &logits, weights, &window.frames(), cfg).0)
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(
            &join(prefix, "fourier.freqs"),
            self.fourier.freqs.shape(),
            self.fourier.freqs.as_slice().unwrap(),
        );
        self.input.visit(&join(prefix, "input"), f);
        for (l, layer) in self.encoder.iter().enumerate() {
            layer.visit(&join(prefix, &format!("encoder.{l}")), f);
        }
        for (l, layer) in self.decoder.iter().enumerate() {
            layer.visit(&join(prefix, &format!("decoder.{l}")), f);
        }
        self.head_y.visit(&join(prefix, "head_y"), f);
        self.head_z.visit(&join(prefix, "head_z"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "fourier.freqs"), self.fourier.freqs.as_slice_mut().unwrap());
        self.input.visit_mut(&join(prefix, "input"), f);
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("encoder.{l}")), f);
        }
        for (l, layer) in self.decoder.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("decoder.{l}")), f);
        }
        self.head_y.visit_mut(&join(prefix, "head_y"), f);
        self.head_z.visit_mut(&join(prefix, "head_z"), f);
    }
}
