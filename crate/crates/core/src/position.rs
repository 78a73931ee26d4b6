//! Dynamic position embeddings.
//!
//! Learned embeddings are stored at a fixed grid resolution and resampled to
//! the token grid of each input. The class-token position vector is never
//! resampled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{resample, Interpolation};
use crate::tensor::Tensor;

/// How position embeddings are produced for a token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    #[default]
    Bilinear,
    Bicubic,
    /// No position information: all-zero embeddings.
    None,
    /// Conditional position encoding. Accepted by the config parser so
    /// ablation scripts fail loudly rather than silently.
    Conditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionEmbedding {
    cls_pos: Vec<f32>,
    /// `[h', w', dim]`
    grid: Tensor,
}

impl PositionEmbedding {
    pub fn new(cls_pos: Vec<f32>, grid: Tensor) -> Result<Self> {
        let [_, _, dim] = grid.dims("position grid")?;
        if cls_pos.len() != dim {
            return Err(Error::shape(format!(
                "class position has {} values, grid dim is {dim}",
                cls_pos.len()
            )));
        }
        Ok(Self { cls_pos, grid })
    }

    /// Builds the stored grid from a `[h' * w', dim]` sequence in row-major order.
    pub fn from_sequence(cls_pos: Vec<f32>, patches: &Tensor, w: usize, h: usize) -> Result<Self> {
        Self::new(cls_pos, unfold(patches, w, h)?)
    }

    pub fn cls_pos(&self) -> &[f32] {
        &self.cls_pos
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.cls_pos.len()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f32], &mut Tensor) {
        (&mut self.cls_pos, &mut self.grid)
    }

    /// Stored resolution `(w', h')`.
    pub fn resolution(&self) -> (usize, usize) {
        (self.grid.shape()[1], self.grid.shape()[0])
    }

    /// `(w*h + 1) × dim` position sequence for a `w × h` token grid.
    pub fn resample_positions(&self, w: usize, h: usize, mode: PositionMode) -> Result<Tensor> {
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!(
                "target resolution must be positive, got {w}x{h}"
            )));
        }
        let dim = self.dim();
        let patches = match mode {
            PositionMode::Bilinear => resample(&self.grid, w, h, Interpolation::Bilinear)?,
            PositionMode::Bicubic => resample(&self.grid, w, h, Interpolation::Bicubic)?,
            PositionMode::None => Tensor::zeros(&[h, w, dim]),
            PositionMode::Conditional => {
                return Err(Error::NotImplemented(
                    "conditional position encoding".into(),
                ))
            }
        };
        let cls = if mode == PositionMode::None {
            vec![0.0; dim]
        } else {
            self.cls_pos.clone()
        };
        let mut data = cls;
        data.extend_from_slice(fold(&patches)?.data());
        Tensor::new(vec![w * h + 1, dim], data)
    }
}

/// `[h, w, d]` map to a `[h*w, d]` sequence, rows of `w` cells in order.
pub fn fold(map: &Tensor) -> Result<Tensor> {
    let [h, w, d] = map.dims("fold input")?;
    map.clone().reshape(&[h * w, d])
}

/// `[h*w, d]` sequence back to a `[h, w, d]` map.
pub fn unfold(seq: &Tensor, w: usize, h: usize) -> Result<Tensor> {
    let [m, d] = seq.dims("unfold input")?;
    if m != w * h {
        return Err(Error::shape(format!(
            "cannot unfold {m} tokens into a {w}x{h} grid"
        )));
    }
    seq.clone().reshape(&[h, w, d])
}
