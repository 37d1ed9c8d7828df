use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::tensor::{join_name, Parameterized, Scalar, Tensor};
use crate::error::Result;

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("consistent shape").trainable()
}

/// 2-d convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `(out_ch, in_ch, kh, kw)`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        rng: &mut R,
    ) -> Self {
        assert!(kernel.0 >= 1 && kernel.1 >= 1 && stride.0 >= 1 && stride.1 >= 1);
        Self {
            weight: he_normal(&[out_ch, in_ch, kernel.0, kernel.1], in_ch * kernel.0 * kernel.1, rng),
            bias: Tensor::zeros(&[out_ch]).trainable(),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        tape.conv2d(x, w, b, self.stride)
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    /// Weight of the previous running value in each update.
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], T::one()).trainable(),
            beta: Tensor::zeros(&[channels]).trainable(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    /// In train mode normalizes with batch statistics and queues a running
    /// statistics update on the tape (see [`Tape::apply_running_stats`]); in
    /// infer mode uses the running statistics.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, g, b, self.eps)?;
                tape.record_batch_stats(&self.running_mean, &self.running_var, self.momentum, mean, var);
                Ok(y)
            }
            Mode::Infer => tape.batch_norm_infer(
                x,
                g,
                b,
                &self.running_mean.data,
                &self.running_var.data,
                self.eps,
            ),
        }
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join_name(prefix, "gamma"), &mut self.gamma);
        f(&join_name(prefix, "beta"), &mut self.beta);
        f(&join_name(prefix, "running_mean"), &mut self.running_mean);
        f(&join_name(prefix, "running_var"), &mut self.running_var);
    }
}

/// Fully-connected layer, `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `(out_dim, in_dim)`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        assert!(in_dim > 0 && out_dim > 0);
        Self {
            weight: he_normal(&[out_dim, in_dim], in_dim, rng),
            bias: Tensor::zeros(&[out_dim]).trainable(),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]).trainable(),
            bias: Tensor::zeros(&[out_dim]).trainable(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        tape.linear(x, w, b)
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::<f64>::new(16, 32, (3, 3), (1, 1), &mut rng);
        let n = conv.weight.len() as f64;
        let var = conv.weight.data.iter().map(|v| v * v).sum::<f64>() / n;
        let expected = 2.0 / (16.0 * 9.0);
        assert!((var / expected - 1.0).abs() < 0.1, "var {var} vs {expected}");
        assert!(conv.bias.data.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn batch_norm_infer_formula() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.gamma.data[0] = 2.0;
        bn.beta.data[0] = 1.0;
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 1, 1, 1], vec![0.5]).unwrap();
        let y = bn.forward(&mut tape, x, Mode::Infer).unwrap();
        let expected = 1.0 + 2.0 * 0.5 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y)[0] - expected).abs() < 1e-12);
        assert!((tape.value(y)[0] - 1.99999).abs() < 1e-5);
    }

    #[test]
    fn running_stats_momentum() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.running_mean.data[0] = 2.0;
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        bn.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(bn.running_mean.data[0], 2.0, "update is deferred");
        tape.apply_running_stats(&mut bn);
        assert!((bn.running_mean.data[0] - (0.9 * 2.0 + 0.1 * 3.0)).abs() < 1e-12);
        // biased batch variance of [1,2,3,6] is 3.5
        assert!((bn.running_var.data[0] - (0.9 + 0.1 * 3.5)).abs() < 1e-12);
        assert!(bn.running_var.data[0] >= 0.0);
    }
}
