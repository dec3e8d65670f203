//! Dense tensors and the differentiable primitives used by the toy detector.
//!
//! Everything is `f64` and row-major. Spatial tensors use `[H, W, C]`
//! layout so that channel vectors are contiguous.

mod conv;
mod gradcheck;

pub use conv::Conv2d;
pub use gradcheck::{finite_diff_grad, grad_check, relative_error, GradCheckReport};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BadTensor {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major offset of a multi-index. Panics on rank or bound violations.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &dim)| {
                assert!(i < dim, "index {i} out of bounds for dimension {dim}");
                acc * dim + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn at3(&self, row: usize, col: usize, channel: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(row * self.shape[1] + col) * self.shape[2] + channel]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Pulls a gradient on softmax outputs back to the logits:
/// `dL/dz_j = p_j (g_j - <g, p>)`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    debug_assert_eq!(probs.len(), grad_probs.len());
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over the channel axis of an `[H, W, C]` tensor.
pub fn channel_mean(features: &Tensor) -> Result<Tensor> {
    let &[h, w, c] = features.shape() else {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0],
            actual: features.shape().to_vec(),
        });
    };
    if c == 0 {
        return Err(Error::InvalidConfig("channel_mean needs C >= 1".into()));
    }
    let scale = 1.0 / c as f64;
    let data = features
        .data()
        .chunks_exact(c)
        .map(|cell| cell.iter().sum::<f64>() * scale)
        .collect();
    Tensor::from_vec(&[h, w], data)
}

/// Adjoint of [`channel_mean`]: spreads `grad / C` to every channel.
pub fn channel_mean_backward(grad: &Tensor, channels: usize) -> Tensor {
    let &[h, w] = grad.shape() else {
        panic!("channel_mean_backward expects a rank-2 gradient");
    };
    let scale = 1.0 / channels as f64;
    let mut out = Vec::with_capacity(h * w * channels);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * scale, channels));
    }
    Tensor {
        shape: vec![h, w, channels],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn softmax_symmetric_cases() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        for c in [-300.0, -1.5, 0.0, 7.0, 450.0] {
            let p = softmax(&[c, c, c]).unwrap();
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        // exp-normalize of (1, 2, 3) evaluated with 50-digit arithmetic
        let expected = [
            0.090_030_573_170_380_458,
            0.244_728_471_054_797_652,
            0.665_240_955_774_821_890,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(Error::EmptyLogits)));
        assert_eq!(softmax(&[]).unwrap_err().to_string(), "empty logits");
    }

    proptest! {
        #[test]
        fn softmax_is_normalized_and_shift_invariant(
            logits in prop::collection::vec(-500.0f64..500.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&logits).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0 && v.is_finite()));
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_strictly_positive_on_moderate_logits() {
        let p = softmax(&[-20.0, 0.0, 20.0]).unwrap();
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn channel_mean_constant_and_pair() {
        let ones = Tensor::filled(&[2, 2, 4], 1.0);
        assert_eq!(channel_mean(&ones).unwrap(), Tensor::filled(&[2, 2], 1.0));

        let mut t = Tensor::zeros(&[1, 1, 2]);
        t.set(&[0, 0, 1], 1.0);
        assert_eq!(channel_mean(&t).unwrap().at2(0, 0), 0.5);
    }

    #[test]
    fn channel_mean_matches_scalar_loop() {
        let mut rng = crate::rng::rng_from(11);
        let data: Vec<f64> = (0..3 * 3 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = Tensor::from_vec(&[3, 3, 8], data).unwrap();
        let out = channel_mean(&t).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                let mut acc = 0.0;
                for c in 0..8 {
                    acc += t.get(&[j, k, c]);
                }
                assert!((out.get(&[j, k]) - acc / 8.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn channel_mean_adjoint_dot_product() {
        let mut rng = crate::rng::rng_from(5);
        for _ in 0..3 {
            let v = Tensor::from_vec(
                &[5, 4, 6],
                (0..120).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let u = Tensor::from_vec(&[5, 4], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let jv = channel_mean(&v).unwrap();
            let jtu = channel_mean_backward(&u, 6);
            let lhs = jv.dot(&u).unwrap();
            let rhs = v.dot(&jtu).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn channel_mean_shape_errors() {
        assert!(channel_mean(&Tensor::zeros(&[4, 4])).is_err());
        assert!(channel_mean(&Tensor::zeros(&[4, 4, 0])).is_err());
    }

    #[test]
    fn tensor_from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 2]), 5.0);
        assert_eq!(t.offset(&[1, 0]), 3);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let weights = [0.7, -0.2, 1.5, -3.0];
        let f = |z: &[f64]| {
            let p = softmax(z).unwrap();
            p.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let p = softmax(&logits).unwrap();
        let analytic = softmax_backward(&p, &weights);
        let numeric = finite_diff_grad(f, &logits, 1e-6).unwrap();
        let report = grad_check(&analytic, &numeric, 1e-7);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
