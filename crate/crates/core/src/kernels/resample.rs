//! Align-corners spatial resampling of `[h, w, c]` grids.
//!
//! Target index `i` maps to source coordinate `i * (src - 1) / (dst - 1)`;
//! a target axis of extent 1 samples source index 0. The alignment
//! convention is an assumption of this implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    /// Catmull-Rom cubic convolution with clamped borders.
    Bicubic,
}

pub fn resample(grid: &Tensor, target_w: usize, target_h: usize, mode: Interpolation) -> Result<Tensor> {
    match mode {
        Interpolation::Bilinear => bilinear_resample(grid, target_w, target_h),
        Interpolation::Bicubic => bicubic_resample(grid, target_w, target_h),
    }
}

fn source_coord(index: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        0.0
    } else {
        (index * (src - 1)) as f64 / (dst - 1) as f64
    }
}

fn check_target(grid: &Tensor, target_w: usize, target_h: usize) -> Result<[usize; 3]> {
    let dims = grid.dims::<3>("resample grid")?;
    if target_w == 0 || target_h == 0 {
        return Err(Error::invalid(format!(
            "resample target must be positive, got {target_w}x{target_h}"
        )));
    }
    Ok(dims)
}

pub fn bilinear_resample(grid: &Tensor, target_w: usize, target_h: usize) -> Result<Tensor> {
    let [src_h, src_w, c] = check_target(grid, target_w, target_h)?;
    let src = grid.data();
    let mut out = Tensor::zeros(&[target_h, target_w, c]);
    let dst = out.data_mut();
    for ty in 0..target_h {
        let sy = source_coord(ty, src_h, target_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        for tx in 0..target_w {
            let sx = source_coord(tx, src_w, target_w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            let taps = [
                ((y0 * src_w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * src_w + x1) * c, (1.0 - fy) * fx),
                ((y1 * src_w + x0) * c, fy * (1.0 - fx)),
                ((y1 * src_w + x1) * c, fy * fx),
            ];
            let cell = &mut dst[(ty * target_w + tx) * c..][..c];
            for (ch, o) in cell.iter_mut().enumerate() {
                let mut v = 0.0f64;
                for &(base, weight) in &taps {
                    if weight != 0.0 {
                        v += weight * src[base + ch] as f64;
                    }
                }
                *o = v as f32;
            }
        }
    }
    Ok(out)
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

fn cubic_taps(index: usize, src: usize, dst: usize) -> [(usize, f64); 4] {
    let s = source_coord(index, src, dst);
    let base = s.floor() as isize;
    let weights = catmull_rom(s - base as f64);
    let clamp = |i: isize| i.clamp(0, src as isize - 1) as usize;
    [
        (clamp(base - 1), weights[0]),
        (clamp(base), weights[1]),
        (clamp(base + 1), weights[2]),
        (clamp(base + 2), weights[3]),
    ]
}

pub fn bicubic_resample(grid: &Tensor, target_w: usize, target_h: usize) -> Result<Tensor> {
    let [src_h, src_w, c] = check_target(grid, target_w, target_h)?;
    let src = grid.data();
    let mut out = Tensor::zeros(&[target_h, target_w, c]);
    let dst = out.data_mut();
    let mut acc = vec![0.0f64; c];
    for ty in 0..target_h {
        let rows = cubic_taps(ty, src_h, target_h);
        for tx in 0..target_w {
            let cols = cubic_taps(tx, src_w, target_w);
            acc.fill(0.0);
            for &(y, wy) in &rows {
                for &(x, wx) in &cols {
                    let weight = wy * wx;
                    if weight == 0.0 {
                        continue;
                    }
                    let cell = &src[(y * src_w + x) * c..][..c];
                    for (a, &v) in acc.iter_mut().zip(cell) {
                        *a += weight * v as f64;
                    }
                }
            }
            for (o, &a) in dst[(ty * target_w + tx) * c..][..c].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    Ok(out)
}
