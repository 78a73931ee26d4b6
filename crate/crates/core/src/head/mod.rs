//! Deep token pooling head.
//!
//! The global branch embeds the class tokens of the last `k` layers with one
//! FC layer. The local branch reduces the stacked patch maps of the same
//! layers with a 1×1 conv, runs the locality module, fuses its input and
//! output, and pools with GAP + FC. The two branch outputs are concatenated
//! and mapped to the descriptor; batch norm is skipped at inference.

pub mod elm;
pub mod fusion;

use rand::Rng;

pub use elm::{aspp, elm, elm_traced, irb, waveblock, waveblock_with_block, ElmStage, ElmWeights};
pub use fusion::{fuse, project, FusionParams};

use crate::config::{FusionMethod, HeadConfig};
use crate::encoder::EncoderOutputs;
use crate::error::{Error, Result};
use crate::kernels::{self, BatchNormParams};
use crate::layers::{Linear, INIT_STD};
use crate::position::unfold;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Infer,
}

/// Class tokens `[k, D]` and patch maps `[k, h, w, D]` of layers
/// `L-k+1..=L`, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerFeatures {
    pub cls: Tensor,
    pub patches: Tensor,
    pub k: usize,
}

pub fn collect_multilayer(outputs: &EncoderOutputs, k: usize) -> Result<MultiLayerFeatures> {
    let depth = outputs.depth();
    if k == 0 || k > depth {
        return Err(Error::invalid(format!(
            "k must lie in 1..={depth}, got {k}"
        )));
    }
    let d = outputs.layers[0].shape()[1];
    let (w, h) = (outputs.w, outputs.h);
    let mut cls = Vec::with_capacity(k * d);
    let mut patches = Vec::with_capacity(k * w * h * d);
    for z in &outputs.layers[depth - k + 1..] {
        cls.extend_from_slice(&z.data()[..d]);
        patches.extend_from_slice(&z.data()[d..]);
    }
    Ok(MultiLayerFeatures {
        cls: Tensor::new(vec![k, d], cls)?,
        patches: Tensor::new(vec![k, h, w, d], patches)?,
        k,
    })
}

/// `fc(flatten(cls))`.
pub fn global_branch(cls: &Tensor, fc: &Linear) -> Result<Vec<f32>> {
    cls.dims::<2>("class features")?;
    fc.forward(cls.data())
}

/// 1×1 conv over the channel concatenation of the `k` patch maps.
pub fn reduce_channels(patches: &Tensor, reduce: &Linear) -> Result<Tensor> {
    let [k, h, w, d] = patches.dims("patch features")?;
    let mut cat = Vec::with_capacity(h * w * k * d);
    for cell in 0..h * w {
        for layer in 0..k {
            cat.extend_from_slice(&patches.slab(layer)[cell * d..(cell + 1) * d]);
        }
    }
    reduce.forward_map(&Tensor::new(vec![h, w, k * d], cat)?)
}

/// `fc(gap(fused))`.
pub fn local_branch(fused: &Tensor, fc: &Linear) -> Result<Vec<f32>> {
    fc.forward(&kernels::gap(fused)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(dim: usize, eps: f32) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps,
        }
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        kernels::batchnorm_inference(
            x,
            &BatchNormParams {
                mean: &self.mean,
                var: &self.var,
                gamma: &self.gamma,
                beta: &self.beta,
                eps: self.eps,
            },
        )
    }
}

/// Train mode: `bn(fc(dropout([u_c; u_p])))`. Infer mode: `fc([u_c; u_p])`.
/// Either branch may be absent for single-branch variants.
pub fn output_head(
    u_c: Option<&[f32]>,
    u_p: Option<&[f32]>,
    fc: &Linear,
    bn: &BatchNorm,
    dropout: f32,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    let mut joined: Vec<f32> = u_c.into_iter().chain(u_p).flatten().copied().collect();
    if joined.is_empty() {
        return Err(Error::invalid("output head needs at least one branch"));
    }
    match mode {
        Mode::Infer => fc.forward(&joined),
        Mode::Train => {
            if dropout > 0.0 {
                let keep = 1.0 - dropout;
                for v in joined.iter_mut() {
                    *v = if rng.random::<f32>() < keep { *v / keep } else { 0.0 };
                }
            }
            bn.forward(&fc.forward(&joined)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalBranchWeights {
    pub reduce: Linear,
    pub elm: ElmWeights,
    pub v1: f32,
    pub v2: f32,
    pub fc: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub config: HeadConfig,
    pub global: Option<Linear>,
    pub local: Option<LocalBranchWeights>,
    pub output: Linear,
    pub bn: BatchNorm,
}

/// Intermediate values of one head evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub u_c: Option<Vec<f32>>,
    pub u_p: Option<Vec<f32>>,
    pub u: Vec<f32>,
}

impl HeadWeights {
    pub fn random(config: &HeadConfig, dim: usize, rng: &mut impl Rng) -> Self {
        let n = config.out_dim;
        let k = config.k;
        let global = config
            .global_branch
            .then(|| Linear::random(k * dim, n, INIT_STD, rng));
        let local = config.local_branch.then(|| LocalBranchWeights {
            reduce: Linear::random(k * dim, dim, INIT_STD, rng),
            elm: ElmWeights::random(dim, &config.elm, rng),
            v1: 1.0,
            v2: 1.0,
            fc: Linear::random(dim * config.fusion.width_factor(), n, INIT_STD, rng),
        });
        let branches = usize::from(config.global_branch) + usize::from(config.local_branch);
        Self {
            config: config.clone(),
            global,
            local,
            output: Linear::random(branches * n, n, INIT_STD, rng),
            bn: BatchNorm::identity(n, config.bn_eps),
        }
    }

    pub fn fusion_params(&self) -> FusionParams {
        let (v1, v2) = self
            .local
            .as_ref()
            .map_or((1.0, 1.0), |l| (l.v1, l.v2));
        FusionParams {
            method: self.config.fusion,
            v1,
            v2,
            eps: self.config.fusion_eps,
        }
    }

    pub fn forward(
        &self,
        outputs: &EncoderOutputs,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Vec<f32>> {
        Ok(self.forward_traced(outputs, mode, rng)?.u)
    }

    pub fn forward_traced(
        &self,
        outputs: &EncoderOutputs,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<HeadTrace> {
        let features = collect_multilayer(outputs, self.config.k)?;
        let u_c = self
            .global
            .as_ref()
            .map(|fc| global_branch(&features.cls, fc))
            .transpose()?;
        let u_p = self
            .local
            .as_ref()
            .map(|local| -> Result<Vec<f32>> {
                let y = reduce_channels(&features.patches, &local.reduce)?;
                let fused = if self.config.fusion == FusionMethod::NoneWithoutElm {
                    y
                } else {
                    let u = elm(&y, &local.elm, &self.config.elm, mode, rng)?;
                    fuse(&y, &u, &self.fusion_params())?
                };
                local_branch(&fused, &local.fc)
            })
            .transpose()?;
        let u = output_head(
            u_c.as_deref(),
            u_p.as_deref(),
            &self.output,
            &self.bn,
            self.config.dropout,
            mode,
            rng,
        )?;
        Ok(HeadTrace { u_c, u_p, u })
    }
}

/// `[h, w, D]` patch map of one layer's sequence, skipping the class token.
pub fn patch_map(sequence: &Tensor, w: usize, h: usize) -> Result<Tensor> {
    let [t, d] = sequence.dims("sequence")?;
    let patches = Tensor::new(vec![t - 1, d], sequence.data()[d..].to_vec())?;
    unfold(&patches, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Outputs whose layer `l` is filled with value `l` (class row `100 + l`).
    fn tagged_outputs(layers: usize, w: usize, h: usize, d: usize) -> EncoderOutputs {
        let t = w * h + 1;
        let layers = (0..=layers)
            .map(|l| {
                let mut z = Tensor::full(&[t, d], l as f32);
                z.data_mut()[..d].fill(100.0 + l as f32);
                z
            })
            .collect();
        EncoderOutputs {
            layers,
            attention: None,
            w,
            h,
        }
    }

    #[test]
    fn collect_order() {
        let out = tagged_outputs(2, 2, 1, 3);
        let f = collect_multilayer(&out, 2).unwrap();
        assert_eq!(f.cls.data(), &[101.0, 101.0, 101.0, 102.0, 102.0, 102.0]);
        assert_eq!(f.patches.shape(), &[2, 1, 2, 3]);
        assert!(f.patches.slab(0).iter().all(|&v| v == 1.0));
        assert!(f.patches.slab(1).iter().all(|&v| v == 2.0));
        let last = collect_multilayer(&out, 1).unwrap();
        assert_eq!(last.cls.data(), &[102.0; 3]);
        assert!(collect_multilayer(&out, 3).is_err());
        assert!(collect_multilayer(&out, 0).is_err());
        let deep = collect_multilayer(&tagged_outputs(12, 2, 2, 4), 6).unwrap();
        assert_eq!(deep.cls.shape(), &[6, 4]);
        assert_eq!(deep.cls.data()[0], 107.0);
    }

    #[test]
    fn global_branch_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fc = Linear::random(12, 5, 1.0, &mut rng);
        let zero = global_branch(&Tensor::zeros(&[3, 4]), &fc).unwrap();
        assert_eq!(zero, vec![0.0; 5]);
        let cls = gaussian(&[1, 4], 1.0, &mut rng);
        assert_eq!(global_branch(&cls, &Linear::identity(4)).unwrap(), cls.data());
        assert!(global_branch(&gaussian(&[2, 4], 1.0, &mut rng), &fc).is_err());
    }

    #[test]
    fn reduce_matches_per_position_fc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = gaussian(&[3, 2, 4, 5], 1.0, &mut rng);
        let reduce = Linear::random(15, 5, 1.0, &mut rng);
        let y = reduce_channels(&patches, &reduce).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5]);
        for cell in 0..8 {
            let mut concat = Vec::new();
            for layer in 0..3 {
                concat.extend_from_slice(&patches.slab(layer)[cell * 5..(cell + 1) * 5]);
            }
            let expected = reduce.forward(&concat).unwrap();
            assert_eq!(&y.data()[cell * 5..(cell + 1) * 5], expected.as_slice());
        }
        let single = gaussian(&[1, 2, 2, 3], 1.0, &mut rng);
        let id = reduce_channels(&single, &Linear::identity(3)).unwrap();
        assert_eq!(id.data(), single.data());
        let zero = reduce_channels(&patches, &Linear::zeros(15, 5)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn local_branch_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fc = Linear::random(4, 3, 1.0, &mut rng);
        let c = Tensor::full(&[3, 2, 4], 0.25);
        assert_eq!(
            local_branch(&c, &fc).unwrap(),
            fc.forward(&[0.25; 4]).unwrap()
        );
        let mut biased = Linear::zeros(4, 3);
        biased.bias = vec![1.0, 2.0, 3.0];
        assert_eq!(
            local_branch(&Tensor::zeros(&[2, 2, 4]), &biased).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        let y = gaussian(&[3, 3, 4], 1.0, &mut rng);
        let mut mean = vec![0.0f64; 4];
        for cell in y.data().chunks(4) {
            for (m, &v) in mean.iter_mut().zip(cell) {
                *m += v as f64 / 9.0;
            }
        }
        let mean: Vec<f32> = mean.into_iter().map(|m| m as f32).collect();
        let expected = fc.forward(&mean).unwrap();
        for (a, b) in local_branch(&y, &fc).unwrap().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn output_head_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut fc = Linear::random(4, 2, 1.0, &mut rng);
        fc.bias = vec![0.5, -0.5];
        let bn = BatchNorm::identity(2, 1e-5);
        let u = output_head(Some(&[0.0; 2]), Some(&[0.0; 2]), &fc, &bn, 0.2, Mode::Infer, &mut rng)
            .unwrap();
        assert_eq!(u, vec![0.5, -0.5]);

        // Identity-block FC exposes the concatenation order.
        let mut order = Linear::zeros(4, 4);
        for i in 0..4 {
            order.weight.data_mut()[i * 4 + i] = 1.0;
        }
        let u = output_head(
            Some(&[1.0, 2.0]),
            Some(&[3.0, 4.0]),
            &order,
            &BatchNorm::identity(4, 0.0),
            0.0,
            Mode::Infer,
            &mut rng,
        )
        .unwrap();
        assert_eq!(u, vec![1.0, 2.0, 3.0, 4.0]);

        let a = output_head(Some(&[0.3, 0.1]), Some(&[0.2, 0.9]), &fc, &bn, 0.5, Mode::Infer, &mut rng);
        let b = output_head(Some(&[0.3, 0.1]), Some(&[0.2, 0.9]), &fc, &bn, 0.5, Mode::Infer, &mut rng);
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn train_mode_applies_batchnorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fc = Linear::random(4, 2, 1.0, &mut rng);
        let bn = BatchNorm {
            mean: vec![0.5, -1.0],
            var: vec![4.0, 0.25],
            gamma: vec![2.0, 1.0],
            beta: vec![0.1, 0.2],
            eps: 0.0,
        };
        let x = [0.3, -0.7, 1.1, 0.4];
        let infer = output_head(Some(&x[..2]), Some(&x[2..]), &fc, &bn, 0.0, Mode::Infer, &mut rng)
            .unwrap();
        let train = output_head(Some(&x[..2]), Some(&x[2..]), &fc, &bn, 0.0, Mode::Train, &mut rng)
            .unwrap();
        let raw = fc.forward(&x).unwrap();
        assert_eq!(infer, raw);
        for i in 0..2 {
            let hand = bn.gamma[i] * (raw[i] - bn.mean[i]) / bn.var[i].sqrt() + bn.beta[i];
            assert!((train[i] - hand).abs() < 1e-6);
        }
        assert_ne!(infer, train);
    }

    fn small_config(fusion: FusionMethod) -> HeadConfig {
        HeadConfig {
            k: 2,
            out_dim: 6,
            fusion,
            ..HeadConfig::default()
        }
    }

    fn random_outputs(layers: usize, w: usize, h: usize, d: usize, rng: &mut ChaCha8Rng) -> EncoderOutputs {
        EncoderOutputs {
            layers: (0..=layers).map(|_| gaussian(&[w * h + 1, d], 1.0, rng)).collect(),
            attention: None,
            w,
            h,
        }
    }

    #[test]
    fn shape_chain_for_every_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = random_outputs(3, 4, 3, 8, &mut rng);
        for method in FusionMethod::ALL {
            let head = HeadWeights::random(&small_config(method), 8, &mut rng);
            let u = head.forward(&out, Mode::Infer, &mut rng).unwrap();
            assert_eq!(u.len(), 6, "{method:?}");
            let train = head.forward(&out, Mode::Train, &mut rng).unwrap();
            assert_eq!(train.len(), 6);
        }
    }

    #[test]
    fn single_branch_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = random_outputs(3, 3, 3, 8, &mut rng);
        let global_only = HeadConfig {
            local_branch: false,
            ..small_config(FusionMethod::Orthogonal)
        };
        let head = HeadWeights::random(&global_only, 8, &mut rng);
        assert_eq!(head.output.inputs(), 6);
        let trace = head.forward_traced(&out, Mode::Infer, &mut rng).unwrap();
        assert!(trace.u_p.is_none());
        assert_eq!(trace.u, head.output.forward(trace.u_c.as_ref().unwrap()).unwrap());

        let local_only = HeadConfig {
            global_branch: false,
            ..small_config(FusionMethod::Orthogonal)
        };
        let head = HeadWeights::random(&local_only, 8, &mut rng);
        let trace = head.forward_traced(&out, Mode::Infer, &mut rng).unwrap();
        assert!(trace.u_c.is_none());
        assert_eq!(trace.u, head.output.forward(trace.u_p.as_ref().unwrap()).unwrap());
    }

    #[test]
    fn global_branch_reads_only_class_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut out = random_outputs(3, 2, 2, 8, &mut rng);
        let head = HeadWeights::random(&small_config(FusionMethod::Sum), 8, &mut rng);
        let before = head.forward_traced(&out, Mode::Infer, &mut rng).unwrap();
        for z in &mut out.layers {
            for v in &mut z.data_mut()[8..] {
                *v += 1.0;
            }
        }
        let after = head.forward_traced(&out, Mode::Infer, &mut rng).unwrap();
        assert_eq!(before.u_c, after.u_c);
        assert_ne!(before.u_p, after.u_p);
    }

    #[test]
    fn inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = random_outputs(3, 3, 3, 8, &mut rng);
        let head = HeadWeights::random(&small_config(FusionMethod::Orthogonal), 8, &mut rng);
        let a = head.forward(&out, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = head.forward(&out, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patch_map_drops_class_row() {
        let seq = Tensor::new(vec![3, 2], vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let map = patch_map(&seq, 2, 1).unwrap();
        assert_eq!(map.shape(), &[1, 2, 2]);
        assert_eq!(map.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
