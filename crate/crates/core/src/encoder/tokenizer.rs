//! Image to token-grid embedding: convolutional stem or raw patch projection.

use crate::error::{Error, Result};
use crate::kernels::{self, relu};
use crate::layers::{Conv, Linear};
use crate::tensor::Tensor;

/// Raw non-overlapping `patch × patch` patches of a `[c, H, W]` image,
/// each flattened in `(channel, row, col)` order and projected with
/// `projection` (`[c·patch², dim]`). Returns the `[H/patch, W/patch, dim]` map.
pub fn patchify(image: &Tensor, patch: usize, projection: &Linear) -> Result<Tensor> {
    let [c, height, width] = image.dims("image")?;
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::invalid(format!(
            "image {width}x{height} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (h, w) = (height / patch, width / patch);
    let flat = c * patch * patch;
    if projection.inputs() != flat {
        return Err(Error::shape(format!(
            "patch projection expects {} inputs, patches have {flat}",
            projection.inputs()
        )));
    }
    let px = image.data();
    let mut patches = Vec::with_capacity(h * w * flat);
    for py in 0..h {
        for pxi in 0..w {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * height + py * patch + dy) * width + pxi * patch;
                    patches.extend_from_slice(&px[row..row + patch]);
                }
            }
        }
    }
    let tokens = projection.forward_rows(&patches, h * w)?;
    Tensor::new(vec![h, w, projection.outputs()], tokens)
}

/// Channel-planar `[c, H, W]` to interleaved `[H, W, c]`.
pub fn planar_to_interleaved(image: &Tensor) -> Result<Tensor> {
    let [c, h, w] = image.dims("image")?;
    let src = image.data();
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    for ch in 0..c {
        for i in 0..h * w {
            dst[i * c + ch] = src[ch * h * w + i];
        }
    }
    Ok(out)
}

/// Interleaved `[H, W, c]` to channel-planar `[c, H, W]`.
pub fn interleaved_to_planar(map: &Tensor) -> Result<Tensor> {
    let [h, w, c] = map.dims("map")?;
    let src = map.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    let dst = out.data_mut();
    for i in 0..h * w {
        for ch in 0..c {
            dst[ch * h * w + i] = src[i * c + ch];
        }
    }
    Ok(out)
}

/// Stack of stride-2 3×3 conv + ReLU blocks. The image extents must be
/// divisible by `2^blocks`; the output is `[H/s, W/s, dim]`.
pub fn stem_forward(image: &Tensor, stem: &[Conv]) -> Result<Tensor> {
    let [_, height, width] = image.dims("image")?;
    let ratio = 1usize << stem.len();
    if height % ratio != 0 || width % ratio != 0 {
        return Err(Error::invalid(format!(
            "image {width}x{height} is not divisible by the stem ratio {ratio}"
        )));
    }
    let mut x = planar_to_interleaved(image)?;
    for block in stem {
        x = kernels::conv2d_strided(&x, &block.weight, &block.bias, 2, 1, 1)?;
        for v in x.data_mut() {
            *v = relu(*v);
        }
    }
    Ok(x)
}

/// Channel widths of the stem blocks, doubling up to `dim`.
pub fn stem_widths(dim: usize, ratio: usize) -> Vec<usize> {
    let blocks = ratio.trailing_zeros() as usize;
    (0..blocks)
        .map(|i| (dim >> (blocks - 1 - i)).max(4).min(dim))
        .collect()
}
