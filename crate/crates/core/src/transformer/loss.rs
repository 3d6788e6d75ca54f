//! Parental softmax and the weighted association loss.

use ndarray::Array2;

use crate::lineage::Frame;
use crate::scalar::Scalar;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Rows whose frame is exactly one before each column's frame.
fn parent_blocks(frames: &[Frame]) -> Vec<Vec<usize>> {
    frames
        .iter()
        .map(|&tj| {
            frames
                .iter()
                .enumerate()
                .filter(|&(_, &ti)| ti + 1 == tj)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Per-entry probability together with `1 − probability`, both computed
/// without cancellation.
struct Normalized<T: Scalar> {
    p: Array2<T>,
    q: Array2<T>,
    in_block: Array2<bool>,
}

fn normalize<T: Scalar>(logits: &Array2<T>, frames: &[Frame]) -> Normalized<T> {
    let n = logits.nrows();
    assert_eq!(logits.ncols(), n, "association logits must be square");
    assert_eq!(frames.len(), n, "frame vector must match the matrix");
    let mut p = logits.mapv(sigmoid);
    let mut q = logits.mapv(|x| sigmoid(-x));
    let mut in_block = Array2::from_elem((n, n), false);
    for (j, block) in parent_blocks(frames).iter().enumerate() {
        if block.is_empty() {
            continue;
        }
        // The quiet "+1" is a pseudo-logit of value 0.
        let m = block.iter().map(|&i| logits[[i, j]]).fold(T::zero(), T::max);
        let ez = (-m).exp();
        let exps: Vec<T> = block.iter().map(|&i| (logits[[i, j]] - m).exp()).collect();
        let total: T = exps.iter().copied().sum::<T>();
        let denom = ez + total;
        for (k, &i) in block.iter().enumerate() {
            p[[i, j]] = exps[k] / denom;
            q[[i, j]] = (ez + (total - exps[k]).max(T::zero())) / denom;
            in_block[[i, j]] = true;
        }
    }
    Normalized { p, q, in_block }
}

/// Parental softmax: inside each column's parent block
/// `Ã_ij = e^{Â_ij} / (1 + Σ_{i'∈P_j} e^{Â_i'j})`; every other entry is
/// squashed with the logistic function so the whole matrix stays in (0, 1).
pub fn parental_softmax<T: Scalar>(logits: &Array2<T>, frames: &[Frame]) -> Array2<T> {
    normalize(logits, frames).p
}

/// Association probabilities as used at inference time.
pub fn probabilities<T: Scalar>(logits: &Array2<T>, frames: &[Frame], parental: bool) -> Array2<T> {
    if parental {
        parental_softmax(logits, frames)
    } else {
        logits.mapv(sigmoid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the plain logistic term.
    pub lambda: f64,
    /// Drop the parental-softmax term, leaving only the logistic one.
    pub parental: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1e-2,
            parental: true,
        }
    }
}

impl LossConfig {
    pub fn sigmoid_only() -> Self {
        LossConfig {
            lambda: 1.0,
            parental: false,
        }
    }
}

/// Weighted binary cross-entropy of the parental softmax plus `λ` times the
/// one of the logistic function, normalized by `ΣW`.
///
/// Returns the value and `dL/dÂ`.
pub fn loss<T: Scalar>(
    target: &Array2<T>,
    logits: &Array2<T>,
    weights: &Array2<T>,
    frames: &[Frame],
    cfg: LossConfig,
) -> (T, Array2<T>) {
    let n = logits.nrows();
    assert_eq!(target.dim(), logits.dim());
    assert_eq!(weights.dim(), logits.dim());
    let mut grad = Array2::zeros((n, n));
    let wsum: T = weights.iter().copied().sum::<T>();
    if wsum <= T::zero() {
        return (T::zero(), grad);
    }
    let lambda = T::lit(cfg.lambda);
    let mut total = T::zero();

    // Logistic term, elementwise.
    for ((&x, &y), (&w, g)) in logits.iter().zip(target.iter()).zip(weights.iter().zip(grad.iter_mut())) {
        if w == T::zero() {
            continue;
        }
        total += lambda * w * (y * softplus(-x) + (T::one() - y) * softplus(x));
        *g += lambda * w * (sigmoid(x) - y);
    }

    if cfg.parental {
        let norm = normalize(logits, frames);
        for j in 0..n {
            // dL/dp_i · p_i for the block entries of column j.
            let mut block = Vec::new();
            for i in 0..n {
                let w = weights[[i, j]];
                let (p, q, y) = (norm.p[[i, j]], norm.q[[i, j]], target[[i, j]]);
                if norm.in_block[[i, j]] {
                    if w != T::zero() {
                        if y != T::zero() {
                            total -= w * y * p.max(T::min_positive_value()).ln();
                        }
                        if y != T::one() {
                            total -= w * (T::one() - y) * q.max(T::min_positive_value()).ln();
                        }
                    }
                    // (p − y)/q written so that y = 1 stays exact as q → 0.
                    let gp = w * ((T::one() - y) / q.max(T::epsilon()) - T::one());
                    block.push((i, gp, p));
                } else if w != T::zero() {
                    // Outside the block the entry is the logistic function.
                    let x = logits[[i, j]];
                    total += w * (y * softplus(-x) + (T::one() - y) * softplus(x));
                    grad[[i, j]] += w * (p - y);
                }
            }
            let s: T = block.iter().map(|&(_, gp, _)| gp).sum::<T>();
            for &(i, gp, p) in &block {
                grad[[i, j]] += gp - p * s;
            }
        }
    }
    grad.mapv_inplace(|g| g / wsum);
    (total / wsum, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_parent_at_zero_is_one_half() {
        let a = parental_softmax(&array![[0.0, 0.0], [0.0, 0.0]], &[0, 1]);
        assert_eq!(a[[0, 1]], 0.5);
    }

    #[test]
    fn two_parents_at_zero_are_one_third_each() {
        let a = parental_softmax(&Array2::<f64>::zeros((3, 3)), &[0, 0, 1]);
        assert!((a[[0, 2]] - 1.0 / 3.0).abs() < 1e-15);
        assert!((a[[1, 2]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_logits_stay_finite_and_below_one() {
        let l: Array2<f64> = array![[0.0, 800.0, 790.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let a = parental_softmax(&l, &[0, 1, 1]);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!((a[[0, 1]] - 1.0).abs() < 1e-12);
        assert!(a[[1, 2]] > 0.0 && a[[1, 2]] < 1.0);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let z = Array2::<f64>::zeros((3, 3));
        let (l, g) = loss(&z, &array![[1.0, 2.0, 3.0], [0.0, 1.0, 0.0], [5.0, 0.0, 1.0]], &z, &[0, 1, 2], LossConfig::default());
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let target = array![[0.0, 1.0], [0.0, 0.0]];
        let w = Array2::from_elem((2, 2), 1.0);
        let logits = array![[-40.0, 40.0], [-40.0, -40.0]];
        let (l, _) = loss(&target, &logits, &w, &[0, 1], LossConfig::default());
        assert!(l < 1e-12, "{l}");
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_instance() {
        let frames = [0, 0, 1, 1];
        let logits: Array2<f64> = array![[0.3, -1.2, 2.0, 0.7], [1.1, 0.0, -0.4, 1.9], [-2.0, 0.5, 0.2, -0.3], [0.8, -0.6, 1.4, -1.5]];
        let target = array![[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]];
        let w = array![[0.0, 0.0, 11.0, 11.0], [0.0, 0.0, 1.0, 1.0], [2.0, 0.5, 0.0, 1.0], [1.0, 1.0, 3.0, 0.0]];
        for cfg in [LossConfig::default(), LossConfig::sigmoid_only()] {
            let (_, g) = loss(&target, &logits, &w, &frames, cfg);
            let h = 1e-5;
            for i in 0..4 {
                for j in 0..4 {
                    let mut p = logits.clone();
                    p[[i, j]] += h;
                    let mut m = logits.clone();
                    m[[i, j]] -= h;
                    let fd = (loss(&target, &p, &w, &frames, cfg).0 - loss(&target, &m, &w, &frames, cfg).0) / (2.0 * h);
                    let rel = (fd - g[[i, j]]).abs() / fd.abs().max(g[[i, j]].abs()).max(1e-8);
                    assert!(rel < 1e-4, "({i},{j}) fd {fd} analytic {}", g[[i, j]]);
                }
            }
        }
    }
}
