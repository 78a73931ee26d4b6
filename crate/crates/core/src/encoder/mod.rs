//! Hybrid vision-transformer encoder.
//!
//! Tokens come from a convolutional stem (or raw patches), a class token is
//! prepended, position embeddings resampled to the token grid are added, and
//! `L` pre-norm blocks (LN → MSA → residual, LN → MLP → residual) follow.
//! Every intermediate sequence is kept for multi-layer pooling.

mod tokenizer;

pub use tokenizer::{
    interleaved_to_planar, patchify, planar_to_interleaved, stem_forward, stem_widths,
};

use rand::Rng;

use crate::config::{EncoderConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::kernels::{self, gelu};
use crate::layers::{gaussian, gaussian_vec, Conv, Linear, Norm, INIT_STD};
use crate::position::{fold, PositionEmbedding};
use crate::tensor::Tensor;

/// `(M+1) × D` token sequence over a `w × h` grid; row 0 is the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub w: usize,
    pub h: usize,
}

impl TokenSequence {
    /// Prepends `cls` to the folded `[h, w, D]` patch map.
    pub fn from_map(cls: &[f32], map: &Tensor) -> Result<Self> {
        let [h, w, d] = map.dims("patch map")?;
        if cls.len() != d {
            return Err(Error::shape(format!(
                "class token has {} values, patch map has {d} channels",
                cls.len()
            )));
        }
        let mut data = cls.to_vec();
        data.extend_from_slice(fold(map)?.data());
        Ok(Self {
            tokens: Tensor::new(vec![w * h + 1, d], data)?,
            w,
            h,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenizerWeights {
    Stem(Vec<Conv>),
    Patch { size: usize, projection: Linear },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: Norm,
    /// Query/key/value/output projections, `D × D`; head `i` owns columns
    /// `i·D/H .. (i+1)·D/H` of the query, key and value maps.
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: Norm,
    pub mlp_expand: Linear,
    pub mlp_contract: Linear,
}

impl LayerWeights {
    pub fn zeros(dim: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: Norm::identity(dim),
            query: Linear::zeros(dim, dim),
            key: Linear::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            output: Linear::zeros(dim, dim),
            norm2: Norm::identity(dim),
            mlp_expand: Linear::zeros(dim, dim * mlp_ratio),
            mlp_contract: Linear::zeros(dim * mlp_ratio, dim),
        }
    }

    pub fn random(dim: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: Norm::identity(dim),
            query: Linear::random(dim, dim, INIT_STD, rng),
            key: Linear::random(dim, dim, INIT_STD, rng),
            value: Linear::random(dim, dim, INIT_STD, rng),
            output: Linear::random(dim, dim, INIT_STD, rng),
            norm2: Norm::identity(dim),
            mlp_expand: Linear::random(dim, dim * mlp_ratio, INIT_STD, rng),
            mlp_contract: Linear::random(dim * mlp_ratio, dim, INIT_STD, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub tokenizer: TokenizerWeights,
    pub cls_token: Vec<f32>,
    pub position: PositionEmbedding,
    pub layers: Vec<LayerWeights>,
}

/// Per-layer sequences `Z⁰..Z^L` and, when recorded, per-layer attention
/// weights as `[H, M+1, M+1]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutputs {
    pub layers: Vec<Tensor>,
    pub attention: Option<Vec<Tensor>>,
    pub w: usize,
    pub h: usize,
}

impl EncoderOutputs {
    /// Number of transformer layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }
}

impl EncoderWeights {
    /// Seeded initialization. Linear weights and embeddings are
    /// `N(0, 0.02²)`, biases zero, norms identity. Stem convolutions use
    /// He-normal scaling so the image signal survives the ReLU stack.
    pub fn random(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = config.dim;
        let tokenizer = match config.tokenizer {
            Tokenizer::Stem => {
                let mut cin = 3;
                let blocks = stem_widths(d, config.stem_ratio)
                    .into_iter()
                    .map(|c| {
                        let std = (2.0 / (9 * cin) as f32).sqrt();
                        let conv = Conv::random(3, cin, c, std, rng);
                        cin = c;
                        conv
                    })
                    .collect();
                TokenizerWeights::Stem(blocks)
            }
            Tokenizer::Patch => TokenizerWeights::Patch {
                size: config.patch_size,
                projection: Linear::random(
                    3 * config.patch_size * config.patch_size,
                    d,
                    INIT_STD,
                    rng,
                ),
            },
        };
        let cls_token = gaussian_vec(d, INIT_STD, rng);
        let [pw, ph] = config.pos_grid;
        let position = PositionEmbedding::new(
            gaussian_vec(d, INIT_STD, rng),
            gaussian(&[ph, pw, d], INIT_STD, rng),
        )?;
        let layers = (0..config.layers)
            .map(|_| LayerWeights::random(d, config.mlp_ratio, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            tokenizer,
            cls_token,
            position,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// `[h, w, D]` patch map of a `[3, H, W]` image.
    pub fn tokenize(&self, image: &Tensor) -> Result<Tensor> {
        match &self.tokenizer {
            TokenizerWeights::Stem(blocks) => stem_forward(image, blocks),
            TokenizerWeights::Patch { size, projection } => patchify(image, *size, projection),
        }
    }

    pub fn embed(&self, image: &Tensor) -> Result<TokenSequence> {
        TokenSequence::from_map(&self.cls_token, &self.tokenize(image)?)
    }

    /// Tokenize, add resampled position embeddings and run all layers.
    pub fn forward(&self, image: &Tensor, record_attention: bool) -> Result<EncoderOutputs> {
        let tokens = self.embed(image)?;
        let pos = self
            .position
            .resample_positions(tokens.w, tokens.h, self.config.position)?;
        self.encode(&tokens, &pos, record_attention)
    }

    pub fn encode(
        &self,
        tokens: &TokenSequence,
        pos: &Tensor,
        record_attention: bool,
    ) -> Result<EncoderOutputs> {
        if tokens.tokens.shape() != pos.shape() {
            return Err(Error::shape(format!(
                "tokens {:?} and position embeddings {:?} differ",
                tokens.tokens.shape(),
                pos.shape()
            )));
        }
        if tokens.dim() != self.dim() {
            return Err(Error::shape(format!(
                "tokens have dim {}, encoder expects {}",
                tokens.dim(),
                self.dim()
            )));
        }
        let z0: Vec<f32> = tokens
            .tokens
            .data()
            .iter()
            .zip(pos.data())
            .map(|(x, p)| x + p)
            .collect();
        let mut layers = vec![Tensor::new(tokens.tokens.shape().to_vec(), z0)?];
        let mut attention = record_attention.then(Vec::new);
        for weights in &self.layers {
            let prev = layers.last().expect("Z0 present");
            let (next, attn) = self.layer_forward(prev, weights)?;
            if let Some(maps) = attention.as_mut() {
                maps.push(attn);
            }
            layers.push(next);
        }
        Ok(EncoderOutputs {
            layers,
            attention,
            w: tokens.w,
            h: tokens.h,
        })
    }

    fn layer_forward(&self, z: &Tensor, wts: &LayerWeights) -> Result<(Tensor, Tensor)> {
        let [t, d] = z.dims("layer input")?;
        let heads = self.config.heads;
        let eps = self.config.layernorm_eps;
        let dh = d / heads;

        let mut normed = vec![0.0; t * d];
        for (row, out) in z.data().chunks_exact(d).zip(normed.chunks_exact_mut(d)) {
            kernels::layernorm_into(row, &wts.norm1.gamma, &wts.norm1.beta, eps, out)?;
        }
        let q = wts.query.forward_rows(&normed, t)?;
        let k = wts.key.forward_rows(&normed, t)?;
        let v = wts.value.forward_rows(&normed, t)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Tensor::zeros(&[heads, t, t]);
        let mut context = vec![0.0f32; t * d];
        let mut acc = vec![0.0f64; dh];
        for head in 0..heads {
            let off = head * dh;
            let weights = &mut attn.data_mut()[head * t * t..(head + 1) * t * t];
            for i in 0..t {
                let qi = &q[i * d + off..][..dh];
                let row = &mut weights[i * t..(i + 1) * t];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[j * d + off..][..dh];
                    *r = (kernels::dot(qi, kj) * scale) as f32;
                }
                kernels::softmax_in_place(row);
                acc.fill(0.0);
                for (j, &a) in row.iter().enumerate() {
                    let vj = &v[j * d + off..][..dh];
                    for (s, &x) in acc.iter_mut().zip(vj) {
                        *s += a as f64 * x as f64;
                    }
                }
                for (c, &s) in context[i * d + off..][..dh].iter_mut().zip(&acc) {
                    *c = s as f32;
                }
            }
        }
        let projected = wts.output.forward_rows(&context, t)?;
        let mut x: Vec<f32> = z.data().iter().zip(&projected).map(|(a, b)| a + b).collect();

        for (row, out) in x.chunks_exact(d).zip(normed.chunks_exact_mut(d)) {
            kernels::layernorm_into(row, &wts.norm2.gamma, &wts.norm2.beta, eps, out)?;
        }
        let mut hidden = wts.mlp_expand.forward_rows(&normed, t)?;
        for h in hidden.iter_mut() {
            *h = gelu(*h);
        }
        let mlp = wts.mlp_contract.forward_rows(&hidden, t)?;
        for (a, b) in x.iter_mut().zip(&mlp) {
            *a += b;
        }
        Ok((Tensor::new(vec![t, d], x)?, attn))
    }
}

/// Head-averaged attention from the class-token query to the `M` patch
/// keys of layer `layer` (1-based), as a `[h, w]` map. The class-to-class
/// weight is excluded, so the map sums to `1 - a[cls, cls]`.
pub fn cls_attention_map(outputs: &EncoderOutputs, layer: usize) -> Result<Tensor> {
    let maps = outputs
        .attention
        .as_ref()
        .ok_or_else(|| Error::invalid("encoder outputs carry no attention weights"))?;
    if layer == 0 || layer > maps.len() {
        return Err(Error::invalid(format!(
            "layer must lie in 1..={}, got {layer}",
            maps.len()
        )));
    }
    let [heads, t, _] = maps[layer - 1].dims("attention")?;
    let data = maps[layer - 1].data();
    let mut acc = vec![0.0f64; t - 1];
    for head in 0..heads {
        let row = &data[head * t * t..][..t];
        for (s, &a) in acc.iter_mut().zip(&row[1..]) {
            *s += a as f64;
        }
    }
    Tensor::new(
        vec![outputs.h, outputs.w],
        acc.into_iter().map(|s| (s / heads as f64) as f32).collect(),
    )
}
