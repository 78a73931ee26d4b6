//! Encoder and head bundled under one configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoder::{EncoderOutputs, EncoderWeights, LayerWeights, TokenizerWeights};
use crate::error::Result;
use crate::head::{HeadTrace, HeadWeights, Mode};
use crate::layers::{Conv, Linear, Norm};
use crate::tensor::Tensor;

/// Callback receiving each parameter's name, shape and mutable values.
pub type ParamVisitor<'a> = dyn FnMut(&str, &[usize], &mut [f32]) + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderWeights,
    pub head: HeadWeights,
}

impl Model {
    /// Validates the configuration and draws all weights from `config.seed`.
    pub fn random(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = EncoderWeights::random(&config.encoder, &mut rng)?;
        let head = HeadWeights::random(&config.head, config.encoder.dim, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            head,
        })
    }

    /// Extent multiple the input image must satisfy.
    pub fn downsampling(&self) -> usize {
        self.config.encoder.downsampling()
    }

    pub fn out_dim(&self) -> usize {
        self.config.head.out_dim
    }

    pub fn encode(&self, image: &Tensor, record_attention: bool) -> Result<EncoderOutputs> {
        self.encoder.forward(image, record_attention)
    }

    pub fn forward(&self, image: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<Vec<f32>> {
        let outputs = self.encode(image, false)?;
        self.head.forward(&outputs, mode, rng)
    }

    pub fn forward_traced(
        &self,
        image: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<HeadTrace> {
        let outputs = self.encode(image, false)?;
        self.head.forward_traced(&outputs, mode, rng)
    }

    /// Inference-mode output `u`; no randomness is consumed.
    pub fn infer(&self, image: &Tensor) -> Result<Vec<f32>> {
        self.forward(image, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Visits every parameter in a fixed order with a stable dotted name.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        let enc = &mut self.encoder;
        match &mut enc.tokenizer {
            TokenizerWeights::Stem(blocks) => {
                for (i, conv) in blocks.iter_mut().enumerate() {
                    visit_conv(&format!("encoder.stem.{i}"), conv, f);
                }
            }
            TokenizerWeights::Patch { projection, .. } => {
                visit_linear("encoder.patch", projection, f);
            }
        }
        let d = enc.cls_token.len();
        f("encoder.cls_token", &[d], &mut enc.cls_token);
        let (cls_pos, grid) = enc.position.parts_mut();
        f("encoder.position.cls", &[d], cls_pos);
        visit_tensor("encoder.position.grid", grid, f);
        for (i, layer) in enc.layers.iter_mut().enumerate() {
            visit_layer(&format!("encoder.layers.{i}"), layer, f);
        }

        let head = &mut self.head;
        if let Some(global) = &mut head.global {
            visit_linear("head.global", global, f);
        }
        if let Some(local) = &mut head.local {
            visit_linear("head.local.reduce", &mut local.reduce, f);
            let irb = &mut local.elm.irb;
            visit_linear("head.local.irb.expand", &mut irb.expand, f);
            visit_conv("head.local.irb.depthwise", &mut irb.depthwise, f);
            visit_linear("head.local.irb.squeeze", &mut irb.squeeze, f);
            for (i, conv) in local.elm.aspp.branches.iter_mut().enumerate() {
                visit_conv(&format!("head.local.aspp.{i}"), conv, f);
            }
            visit_linear("head.local.aspp.reduce", &mut local.elm.aspp.reduce, f);
            f("head.local.fusion.v1", &[1], std::slice::from_mut(&mut local.v1));
            f("head.local.fusion.v2", &[1], std::slice::from_mut(&mut local.v2));
            visit_linear("head.local.fc", &mut local.fc, f);
        }
        visit_linear("head.output", &mut head.output, f);
        let n = head.bn.mean.len();
        f("head.bn.mean", &[n], &mut head.bn.mean);
        f("head.bn.var", &[n], &mut head.bn.var);
        f("head.bn.gamma", &[n], &mut head.bn.gamma);
        f("head.bn.beta", &[n], &mut head.bn.beta);
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut copy = self.clone();
        let mut total = 0;
        copy.visit_params(&mut |_, _, v| total += v.len());
        total
    }
}

fn visit_tensor(name: &str, t: &mut Tensor, f: &mut ParamVisitor<'_>) {
    let shape = t.shape().to_vec();
    f(name, &shape, t.data_mut());
}

fn visit_linear(name: &str, l: &mut Linear, f: &mut ParamVisitor<'_>) {
    visit_tensor(&format!("{name}.weight"), &mut l.weight, f);
    let n = l.bias.len();
    f(&format!("{name}.bias"), &[n], &mut l.bias);
}

fn visit_conv(name: &str, c: &mut Conv, f: &mut ParamVisitor<'_>) {
    visit_tensor(&format!("{name}.weight"), &mut c.weight, f);
    let n = c.bias.len();
    f(&format!("{name}.bias"), &[n], &mut c.bias);
}

fn visit_norm(name: &str, n: &mut Norm, f: &mut ParamVisitor<'_>) {
    let d = n.gamma.len();
    f(&format!("{name}.gamma"), &[d], &mut n.gamma);
    f(&format!("{name}.beta"), &[d], &mut n.beta);
}

fn visit_layer(name: &str, l: &mut LayerWeights, f: &mut ParamVisitor<'_>) {
    visit_norm(&format!("{name}.norm1"), &mut l.norm1, f);
    visit_linear(&format!("{name}.query"), &mut l.query, f);
    visit_linear(&format!("{name}.key"), &mut l.key, f);
    visit_linear(&format!("{name}.value"), &mut l.value, f);
    visit_linear(&format!("{name}.output"), &mut l.output, f);
    visit_norm(&format!("{name}.norm2"), &mut l.norm2, f);
    visit_linear(&format!("{name}.mlp_expand"), &mut l.mlp_expand, f);
    visit_linear(&format!("{name}.mlp_contract"), &mut l.mlp_contract, f);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderConfig, HeadConfig};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                dim: 16,
                layers: 3,
                heads: 2,
                stem_ratio: 4,
                pos_grid: [4, 4],
                ..EncoderConfig::default()
            },
            head: HeadConfig {
                k: 2,
                out_dim: 8,
                ..HeadConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = tiny_config();
        assert_eq!(Model::random(&cfg).unwrap(), Model::random(&cfg).unwrap());
        let other = ModelConfig { seed: 1, ..cfg.clone() };
        assert_ne!(Model::random(&cfg).unwrap(), Model::random(&other).unwrap());
    }

    #[test]
    fn infer_shape() {
        let model = Model::random(&tiny_config()).unwrap();
        let img = Tensor::full(&[3, 16, 24], 0.5);
        let u = model.infer(&img).unwrap();
        assert_eq!(u.len(), 8);
        assert!(u.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn param_names_unique() {
        let mut model = Model::random(&tiny_config()).unwrap();
        let mut names = Vec::new();
        model.visit_params(&mut |name, shape, values| {
            assert_eq!(shape.iter().product::<usize>(), values.len());
            names.push(name.to_string());
        });
        let count = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), count);
        assert!(names.contains(&"head.bn.var".to_string()));
        assert!(model.param_count() > 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny_config();
        cfg.head.k = 9;
        assert!(Model::random(&cfg).is_err());
    }
}
