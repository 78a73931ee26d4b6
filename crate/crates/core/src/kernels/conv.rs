use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grouped, dilated 2-D convolution with "same" zero padding.
///
/// `input` is `[h, w, c_in]`, `weights` is `[kh, kw, c_in / groups, c_out]`,
/// `bias` has `c_out` entries. Output is `[h, w, c_out]`.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    dilation: usize,
    groups: usize,
) -> Result<Tensor> {
    conv2d_strided(input, weights, bias, 1, dilation, groups)
}

/// [`conv2d`] with a spatial stride; output extents are `ceil(extent / stride)`.
pub fn conv2d_strided(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Result<Tensor> {
    let [h, w, c_in] = input.dims("conv2d input")?;
    let [kh, kw, c_in_group, c_out] = weights.dims("conv2d weights")?;
    if stride == 0 || dilation == 0 || groups == 0 {
        return Err(Error::invalid("stride, dilation and groups must be positive"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(format!(
            "kernel extent must be odd, got {kh}x{kw}"
        )));
    }
    if c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::invalid(format!(
            "groups {groups} must divide c_in {c_in} and c_out {c_out}"
        )));
    }
    if c_in_group != c_in / groups {
        return Err(Error::shape(format!(
            "weights expect {c_in_group} input channels per group, input has {c_in}/{groups}"
        )));
    }
    if bias.len() != c_out {
        return Err(Error::shape(format!(
            "bias has {} values, expected {c_out}",
            bias.len()
        )));
    }

    let pad_y = (kh - 1) / 2 * dilation;
    let pad_x = (kw - 1) / 2 * dilation;
    let out_h = h.div_ceil(stride);
    let out_w = w.div_ceil(stride);
    let c_out_group = c_out / groups;
    let x = input.data();
    let k = weights.data();

    let mut out = Tensor::zeros(&[out_h, out_w, c_out]);
    let mut acc = vec![0.0f64; c_out];
    for oy in 0..out_h {
        for ox in 0..out_w {
            for (a, &b) in acc.iter_mut().zip(bias) {
                *a = b as f64;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky * dilation) as isize - pad_y as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx * dilation) as isize - pad_x as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let pixel = &x[(iy as usize * w + ix as usize) * c_in..][..c_in];
                    let tap = &k[(ky * kw + kx) * c_in_group * c_out..][..c_in_group * c_out];
                    for g in 0..groups {
                        let acc_g = &mut acc[g * c_out_group..(g + 1) * c_out_group];
                        for ci in 0..c_in_group {
                            let v = pixel[g * c_in_group + ci];
                            if v == 0.0 {
                                continue;
                            }
                            let v = v as f64;
                            let row = &tap[ci * c_out + g * c_out_group..][..c_out_group];
                            for (a, &wt) in acc_g.iter_mut().zip(row) {
                                *a += v * wt as f64;
                            }
                        }
                    }
                }
            }
            let dst = &mut out.data_mut()[(oy * out_w + ox) * c_out..][..c_out];
            for (o, &a) in dst.iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    Ok(out)
}
