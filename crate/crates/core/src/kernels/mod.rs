//! Pure, deterministic numerical kernels.
//!
//! Storage is `f32`; every reduction (dot products, means, variances,
//! softmax normalizers) accumulates in `f64`.

mod conv;
mod resample;

pub use conv::{conv2d, conv2d_strided};
pub use resample::{bicubic_resample, bilinear_resample, resample, Interpolation};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `rows × inner` times `inner × cols`, both row-major.
pub fn matmul(a: &[f32], rows: usize, inner: usize, b: &[f32], cols: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    let mut out = vec![0.0f32; rows * cols];
    let mut acc = vec![0.0f64; cols];
    for (a_row, out_row) in a.chunks_exact(inner).zip(out.chunks_exact_mut(cols)) {
        acc.fill(0.0);
        for (&x, b_row) in a_row.iter().zip(b.chunks_exact(cols)) {
            if x == 0.0 {
                continue;
            }
            let x = x as f64;
            for (s, &w) in acc.iter_mut().zip(b_row) {
                *s += x * w as f64;
            }
        }
        for (o, s) in out_row.iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    out
}

/// Row-wise affine map: `x` is `rows × a`, `weight` is `a × b`, `bias` is `b`.
pub fn linear(x: &[f32], rows: usize, weight: &Tensor, bias: &[f32]) -> Result<Vec<f32>> {
    let [a, b] = weight.dims("linear weight")?;
    if x.len() != rows * a {
        return Err(Error::shape(format!(
            "linear input has {} values, expected {rows}x{a}",
            x.len()
        )));
    }
    if bias.len() != b {
        return Err(Error::shape(format!(
            "linear bias has {} values, expected {b}",
            bias.len()
        )));
    }
    let mut out = matmul(x, rows, a, weight.data(), b);
    for row in out.chunks_exact_mut(b) {
        for (o, &beta) in row.iter_mut().zip(bias) {
            *o += beta;
        }
    }
    Ok(out)
}

/// Fully connected layer `xᵀW + bias`.
pub fn fc(x: &[f32], weight: &Tensor, bias: &[f32]) -> Result<Vec<f32>> {
    linear(x, 1, weight, bias)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(x: &[f32]) -> f64 {
    dot(x, x).sqrt()
}

/// Global average pooling of a `[h, w, c]` map to a `c` vector.
pub fn gap(y: &Tensor) -> Result<Vec<f32>> {
    let [h, w, c] = y.dims("gap input")?;
    let mut acc = vec![0.0f64; c];
    for cell in y.data().chunks_exact(c) {
        for (s, &v) in acc.iter_mut().zip(cell) {
            *s += v as f64;
        }
    }
    let count = (h * w) as f64;
    Ok(acc.into_iter().map(|s| (s / count) as f32).collect())
}

pub struct BatchNormParams<'a> {
    pub mean: &'a [f32],
    pub var: &'a [f32],
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
    pub eps: f32,
}

/// Batch normalization with stored statistics.
pub fn batchnorm_inference(x: &[f32], p: &BatchNormParams<'_>) -> Result<Vec<f32>> {
    let d = x.len();
    for (name, v) in [("mean", p.mean), ("var", p.var), ("gamma", p.gamma), ("beta", p.beta)] {
        if v.len() != d {
            return Err(Error::shape(format!(
                "batchnorm {name} has {} values, expected {d}",
                v.len()
            )));
        }
    }
    if p.eps < 0.0 {
        return Err(Error::invalid("batchnorm eps must be non-negative"));
    }
    (0..d)
        .map(|i| {
            if p.var[i] < 0.0 {
                return Err(Error::invalid(format!("batchnorm var[{i}] is negative")));
            }
            let denom = p.var[i] as f64 + p.eps as f64;
            if denom == 0.0 {
                return Err(Error::Numerical(format!(
                    "batchnorm var+eps is zero at channel {i}"
                )));
            }
            let z = (x[i] as f64 - p.mean[i] as f64) / denom.sqrt();
            Ok((p.gamma[i] as f64 * z + p.beta[i] as f64) as f32)
        })
        .collect()
}

/// Layer normalization of one vector. Zero variance with zero eps maps to `beta`.
pub fn layernorm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    let mut out = vec![0.0; x.len()];
    layernorm_into(x, gamma, beta, eps, &mut out)?;
    Ok(out)
}

pub(crate) fn layernorm_into(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    out: &mut [f32],
) -> Result<()> {
    let d = x.len();
    if d == 0 {
        return Err(Error::shape("layernorm of an empty vector"));
    }
    if gamma.len() != d || beta.len() != d || out.len() != d {
        return Err(Error::shape(format!(
            "layernorm affine params must have {d} values"
        )));
    }
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
    let var = x
        .iter()
        .map(|&v| {
            let c = v as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / d as f64;
    let denom = (var + eps as f64).sqrt();
    for i in 0..d {
        let z = if denom > 0.0 {
            (x[i] as f64 - mean) / denom
        } else {
            0.0
        };
        out[i] = (gamma[i] as f64 * z + beta[i] as f64) as f32;
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(x: &[f32]) -> Vec<f32> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = x.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (o, e) in x.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

pub fn l2_normalize(x: &[f32]) -> Result<Vec<f32>> {
    let n = norm(x);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numerical(format!(
            "cannot L2-normalize a vector of norm {n}"
        )));
    }
    Ok(x.iter().map(|&v| (v as f64 / n) as f32).collect())
}

pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}
