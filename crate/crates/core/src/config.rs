//! Model and pipeline configuration, serialized as a single JSON document.
//!
//! Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::position::PositionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Convolutional stem, one token per stem output cell.
    #[default]
    Stem,
    /// Raw non-overlapping patches with a linear projection.
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    NoneWithoutElm,
    NoneWithElm,
    Sum,
    Hadamard,
    Concat,
    FastNormalized,
    #[default]
    Orthogonal,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 7] = [
        FusionMethod::NoneWithoutElm,
        FusionMethod::NoneWithElm,
        FusionMethod::Sum,
        FusionMethod::Hadamard,
        FusionMethod::Concat,
        FusionMethod::FastNormalized,
        FusionMethod::Orthogonal,
    ];

    /// Channel multiplier of the fused map relative to its inputs.
    pub fn width_factor(self) -> usize {
        match self {
            FusionMethod::Concat | FusionMethod::Orthogonal => 2,
            _ => 1,
        }
    }

    pub fn uses_elm(self) -> bool {
        self != FusionMethod::NoneWithoutElm
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::NoneWithoutElm => "none_without_elm",
            FusionMethod::NoneWithElm => "none_with_elm",
            FusionMethod::Sum => "sum",
            FusionMethod::Hadamard => "hadamard",
            FusionMethod::Concat => "concat",
            FusionMethod::FastNormalized => "fast_normalized",
            FusionMethod::Orthogonal => "orthogonal",
        }
    }
}

impl std::str::FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tokenizer: Tokenizer,
    /// Total downsampling of the stem; a power of two, one stride-2 block per factor.
    pub stem_ratio: usize,
    pub patch_size: usize,
    /// Stored position-embedding resolution `[w', h']`.
    pub pos_grid: [usize; 2],
    pub position: PositionMode,
    pub layernorm_eps: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 12,
            heads: 4,
            mlp_ratio: 4,
            tokenizer: Tokenizer::Stem,
            stem_ratio: 16,
            patch_size: 16,
            pos_grid: [24, 24],
            position: PositionMode::Bilinear,
            layernorm_eps: 1e-6,
        }
    }
}

impl EncoderConfig {
    /// Pixels per token along each axis.
    pub fn downsampling(&self) -> usize {
        match self.tokenizer {
            Tokenizer::Stem => self.stem_ratio,
            Tokenizer::Patch => self.patch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElmConfig {
    pub irb: bool,
    pub aspp: bool,
    pub waveblock: bool,
    pub dilation_rates: Vec<usize>,
    /// IRB expansion factor `D' / D`.
    pub expansion: usize,
    pub wb_blocks: usize,
    pub wb_scale: f32,
}

impl Default for ElmConfig {
    fn default() -> Self {
        Self {
            irb: true,
            aspp: true,
            waveblock: true,
            dilation_rates: vec![6, 12, 18],
            expansion: 4,
            wb_blocks: 3,
            wb_scale: 0.5,
        }
    }
}

impl ElmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.is_empty() {
            return Err(Error::Config("dilation_rates must not be empty".into()));
        }
        if self.dilation_rates[0] == 0
            || self.dilation_rates.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "dilation_rates must be positive and strictly increasing, got {:?}",
                self.dilation_rates
            )));
        }
        if self.expansion < 1 {
            return Err(Error::Config("expansion must be at least 1".into()));
        }
        if self.wb_blocks < 1 {
            return Err(Error::Config("wb_blocks must be at least 1".into()));
        }
        if !(self.wb_scale > 0.0 && self.wb_scale <= 1.0) {
            return Err(Error::Config(format!(
                "wb_scale must lie in (0, 1], got {}",
                self.wb_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Number of trailing encoder layers pooled by both branches.
    pub k: usize,
    /// Descriptor dimension `N`.
    pub out_dim: usize,
    pub global_branch: bool,
    pub local_branch: bool,
    pub fusion: FusionMethod,
    pub fusion_eps: f32,
    pub elm: ElmConfig,
    /// Train-mode dropout probability before the output FC.
    pub dropout: f32,
    pub bn_eps: f32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            k: 6,
            out_dim: 1536,
            global_branch: true,
            local_branch: true,
            fusion: FusionMethod::Orthogonal,
            fusion_eps: 1e-4,
            elm: ElmConfig::default(),
            dropout: 0.2,
            bn_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Image scales averaged into one descriptor.
    pub scales: Vec<f32>,
    pub whitening: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0, std::f32::consts::FRAC_1_SQRT_2, 0.5],
            whitening: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub pipeline: PipelineConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let h = &self.head;
        if e.dim == 0 || e.heads == 0 || !e.dim.is_multiple_of(e.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                e.dim, e.heads
            )));
        }
        if e.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if e.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be at least 1".into()));
        }
        match e.tokenizer {
            Tokenizer::Stem => {
                if e.stem_ratio < 2 || !e.stem_ratio.is_power_of_two() {
                    return Err(Error::Config(format!(
                        "stem_ratio must be a power of two >= 2, got {}",
                        e.stem_ratio
                    )));
                }
            }
            Tokenizer::Patch => {
                if e.patch_size == 0 {
                    return Err(Error::Config("patch_size must be positive".into()));
                }
            }
        }
        if e.pos_grid.contains(&0) {
            return Err(Error::Config("pos_grid extents must be positive".into()));
        }
        if e.position == PositionMode::Conditional {
            return Err(Error::NotImplemented(
                "conditional position encoding".into(),
            ));
        }
        if e.layernorm_eps < 0.0 {
            return Err(Error::Config("layernorm_eps must be non-negative".into()));
        }
        if h.k == 0 || h.k > e.layers {
            return Err(Error::Config(format!(
                "k must lie in 1..={}, got {}",
                e.layers, h.k
            )));
        }
        if h.out_dim == 0 {
            return Err(Error::Config("out_dim must be positive".into()));
        }
        if !h.global_branch && !h.local_branch {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        if h.fusion == FusionMethod::FastNormalized && h.fusion_eps <= 0.0 {
            return Err(Error::Config(
                "fast_normalized fusion needs fusion_eps > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&h.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                h.dropout
            )));
        }
        h.elm.validate()?;
        let p = &self.pipeline;
        if p.scales.is_empty() || p.scales.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config(format!(
                "scales must be a non-empty list of positive numbers, got {:?}",
                p.scales
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}
