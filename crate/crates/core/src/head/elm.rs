//! Enhanced locality module: `ASPP(WB(IRB(WB(Y))))`.

use rand::Rng;

use super::Mode;
use crate::config::ElmConfig;
use crate::error::{Error, Result};
use crate::kernels::relu;
use crate::layers::{Conv, Linear, INIT_STD};
use crate::tensor::Tensor;

/// Inverted residual block: 1×1 expand, 3×3 depthwise, 1×1 squeeze.
#[derive(Debug, Clone, PartialEq)]
pub struct IrbWeights {
    pub expand: Linear,
    pub depthwise: Conv,
    pub squeeze: Linear,
}

/// One 3×3 dilated conv per rate, then a 1×1 reduction from `n·D` to `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsppWeights {
    pub branches: Vec<Conv>,
    pub reduce: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElmWeights {
    pub irb: IrbWeights,
    pub aspp: AsppWeights,
}

impl ElmWeights {
    pub fn zeros(dim: usize, cfg: &ElmConfig) -> Self {
        let wide = dim * cfg.expansion;
        let n = cfg.dilation_rates.len();
        Self {
            irb: IrbWeights {
                expand: Linear::zeros(dim, wide),
                depthwise: Conv::zeros(3, 1, wide),
                squeeze: Linear::zeros(wide, dim),
            },
            aspp: AsppWeights {
                branches: (0..n).map(|_| Conv::zeros(3, dim, dim)).collect(),
                reduce: Linear::zeros(n * dim, dim),
            },
        }
    }

    pub fn random(dim: usize, cfg: &ElmConfig, rng: &mut impl Rng) -> Self {
        let wide = dim * cfg.expansion;
        let n = cfg.dilation_rates.len();
        Self {
            irb: IrbWeights {
                expand: Linear::random(dim, wide, INIT_STD, rng),
                depthwise: Conv::random(3, 1, wide, INIT_STD, rng),
                squeeze: Linear::random(wide, dim, INIT_STD, rng),
            },
            aspp: AsppWeights {
                branches: (0..n)
                    .map(|_| Conv::random(3, dim, dim, INIT_STD, rng))
                    .collect(),
                reduce: Linear::random(n * dim, dim, INIT_STD, rng),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElmStage {
    WaveBlockIn,
    Irb,
    WaveBlockOut,
    Aspp,
}

/// Keeps row block `block` of a `[h, w, d]` map and scales all other rows
/// by `scale`. Rows are split into `blocks` contiguous groups, block `b`
/// covering rows `b·h/B .. (b+1)·h/B`.
pub fn waveblock_with_block(y: &Tensor, blocks: usize, scale: f32, block: usize) -> Result<Tensor> {
    let [h, w, d] = y.dims("waveblock input")?;
    if blocks == 0 || blocks > h {
        return Err(Error::invalid(format!(
            "waveblock needs 1 <= blocks <= rows, got {blocks} blocks for {h} rows"
        )));
    }
    if block >= blocks {
        return Err(Error::invalid(format!("block {block} out of {blocks}")));
    }
    let start = block * h / blocks;
    let end = (block + 1) * h / blocks;
    let mut out = y.clone();
    let row_len = w * d;
    for (r, row) in out.data_mut().chunks_exact_mut(row_len).enumerate() {
        if r < start || r >= end {
            for v in row {
                *v *= scale;
            }
        }
    }
    Ok(out)
}

/// Feature-level augmentation; identity at inference.
pub fn waveblock(y: &Tensor, cfg: &ElmConfig, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
    match mode {
        Mode::Infer => Ok(y.clone()),
        Mode::Train => {
            let h = y.shape()[0];
            if cfg.wb_blocks > h {
                return Err(Error::invalid(format!(
                    "waveblock has {} blocks but the map has {h} rows",
                    cfg.wb_blocks
                )));
            }
            let block = rng.random_range(0..cfg.wb_blocks);
            waveblock_with_block(y, cfg.wb_blocks, cfg.wb_scale, block)
        }
    }
}

/// `y + squeeze(relu(depthwise(relu(expand(y)))))`.
pub fn irb(y: &Tensor, weights: &IrbWeights) -> Result<Tensor> {
    let [_, _, d] = y.dims("irb input")?;
    let mut expanded = weights.expand.forward_map(y)?;
    expanded.data_mut().iter_mut().for_each(|v| *v = relu(*v));
    let wide = expanded.shape()[2];
    let mut spatial = weights.depthwise.forward(&expanded, 1, wide)?;
    spatial.data_mut().iter_mut().for_each(|v| *v = relu(*v));
    let squeezed = weights.squeeze.forward_map(&spatial)?;
    if squeezed.shape()[2] != d {
        return Err(Error::shape(format!(
            "irb squeezes to {} channels, input has {d}",
            squeezed.shape()[2]
        )));
    }
    Tensor::new(
        y.shape().to_vec(),
        y.data().iter().zip(squeezed.data()).map(|(a, b)| a + b).collect(),
    )
}

/// Parallel dilated convolutions, concatenated along channels and reduced.
pub fn aspp(y: &Tensor, weights: &AsppWeights, rates: &[usize]) -> Result<Tensor> {
    let [h, w, _] = y.dims("aspp input")?;
    if rates.len() != weights.branches.len() {
        return Err(Error::shape(format!(
            "{} dilation rates for {} aspp branches",
            rates.len(),
            weights.branches.len()
        )));
    }
    let outputs = weights
        .branches
        .iter()
        .zip(rates)
        .map(|(conv, &rate)| conv.forward(y, rate, 1))
        .collect::<Result<Vec<_>>>()?;
    let widths: Vec<usize> = outputs.iter().map(|t| t.shape()[2]).collect();
    let total: usize = widths.iter().sum();
    let mut cat = Vec::with_capacity(h * w * total);
    for cell in 0..h * w {
        for (t, &c) in outputs.iter().zip(&widths) {
            cat.extend_from_slice(&t.data()[cell * c..(cell + 1) * c]);
        }
    }
    weights.reduce.forward_map(&Tensor::new(vec![h, w, total], cat)?)
}

pub fn elm(
    y: &Tensor,
    weights: &ElmWeights,
    cfg: &ElmConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    elm_traced(y, weights, cfg, mode, rng, |_, _| {})
}

/// [`elm`] reporting each executed stage and its output to `observe`.
/// Disabled components are skipped.
pub fn elm_traced(
    y: &Tensor,
    weights: &ElmWeights,
    cfg: &ElmConfig,
    mode: Mode,
    rng: &mut impl Rng,
    mut observe: impl FnMut(ElmStage, &Tensor),
) -> Result<Tensor> {
    let mut x = y.clone();
    if cfg.waveblock {
        x = waveblock(&x, cfg, mode, rng)?;
        observe(ElmStage::WaveBlockIn, &x);
    }
    if cfg.irb {
        x = irb(&x, &weights.irb)?;
        observe(ElmStage::Irb, &x);
    }
    if cfg.waveblock {
        x = waveblock(&x, cfg, mode, rng)?;
        observe(ElmStage::WaveBlockOut, &x);
    }
    if cfg.aspp {
        x = aspp(&x, &weights.aspp, &cfg.dilation_rates)?;
        observe(ElmStage::Aspp, &x);
    }
    Ok(x)
}
