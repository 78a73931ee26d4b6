//! Parameter containers shared by the encoder and the pooling head.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Standard deviation of the seeded Gaussian used for linear weights.
pub const INIT_STD: f32 = 0.02;

pub(crate) fn gaussian(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("finite std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}

pub(crate) fn gaussian_vec(len: usize, std: f32, rng: &mut impl Rng) -> Vec<f32> {
    gaussian(&[len], std, rng).into_data()
}

/// Dense layer with `[in, out]` weight and `out` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Self> {
        let [_, out] = weight.dims("linear weight")?;
        if bias.len() != out {
            return Err(Error::shape(format!(
                "linear bias has {} values, expected {out}",
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: vec![0.0; outputs],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight.data_mut()[i * dim + i] = 1.0;
        }
        l
    }

    pub fn random(inputs: usize, outputs: usize, std: f32, rng: &mut impl Rng) -> Self {
        Self {
            weight: gaussian(&[inputs, outputs], std, rng),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        kernels::fc(x, &self.weight, &self.bias)
    }

    pub fn forward_rows(&self, x: &[f32], rows: usize) -> Result<Vec<f32>> {
        kernels::linear(x, rows, &self.weight, &self.bias)
    }

    /// Applies the layer independently at every cell of a `[h, w, in]` map.
    pub fn forward_map(&self, map: &Tensor) -> Result<Tensor> {
        let [h, w, _] = map.dims("1x1 conv input")?;
        let out = self.forward_rows(map.data(), h * w)?;
        Tensor::new(vec![h, w, self.outputs()], out)
    }
}

/// Convolution with `[kh, kw, in / groups, out]` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Self> {
        let [_, _, _, out] = weight.dims("conv weight")?;
        if bias.len() != out {
            return Err(Error::shape(format!(
                "conv bias has {} values, expected {out}",
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(kernel: usize, in_per_group: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[kernel, kernel, in_per_group, outputs]),
            bias: vec![0.0; outputs],
        }
    }

    pub fn random(
        kernel: usize,
        in_per_group: usize,
        outputs: usize,
        std: f32,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: gaussian(&[kernel, kernel, in_per_group, outputs], std, rng),
            bias: vec![0.0; outputs],
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn forward(&self, x: &Tensor, dilation: usize, groups: usize) -> Result<Tensor> {
        kernels::conv2d(x, &self.weight, &self.bias, dilation, groups)
    }
}

/// Layer-norm affine pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl Norm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}
