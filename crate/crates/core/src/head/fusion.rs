use crate::config::FusionMethod;
use crate::error::{Error, Result};
use crate::kernels::dot;
use crate::tensor::Tensor;

/// Below this squared norm a direction is treated as degenerate and the
/// projection onto it is zero.
pub const PROJECTION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub method: FusionMethod,
    /// Learnable scalars of fast-normalized fusion; weights are `relu(v)`.
    pub v1: f32,
    pub v2: f32,
    pub eps: f32,
}

impl FusionParams {
    pub fn new(method: FusionMethod) -> Self {
        Self {
            method,
            v1: 1.0,
            v2: 1.0,
            eps: 1e-4,
        }
    }
}

/// Projection of `y` onto the line spanned by `u`.
pub fn project(y: &[f32], u: &[f32]) -> Vec<f32> {
    let uu = dot(u, u);
    if uu < PROJECTION_FLOOR {
        return vec![0.0; y.len()];
    }
    let coef = dot(y, u) / uu;
    u.iter().map(|&v| (coef * v as f64) as f32).collect()
}

/// Fuses the locality-module input `y` with its output `u`, both `[h, w, d]`.
/// Concatenating methods return `[h, w, 2d]` with `y`-derived channels first.
pub fn fuse(y: &Tensor, u: &Tensor, params: &FusionParams) -> Result<Tensor> {
    let [h, w, d] = y.dims("fusion input")?;
    if u.shape() != y.shape() {
        return Err(Error::shape(format!(
            "fusion inputs differ: {:?} vs {:?}",
            y.shape(),
            u.shape()
        )));
    }
    let elementwise = |f: &dyn Fn(f32, f32) -> f32| {
        Tensor::new(
            y.shape().to_vec(),
            y.data().iter().zip(u.data()).map(|(&a, &b)| f(a, b)).collect(),
        )
    };
    match params.method {
        FusionMethod::NoneWithoutElm => Ok(y.clone()),
        FusionMethod::NoneWithElm => Ok(u.clone()),
        FusionMethod::Sum => elementwise(&|a, b| a + b),
        FusionMethod::Hadamard => elementwise(&|a, b| a * b),
        FusionMethod::FastNormalized => {
            let w1 = params.v1.max(0.0) as f64;
            let w2 = params.v2.max(0.0) as f64;
            let denom = w1 + w2 + params.eps as f64;
            if denom <= 0.0 {
                return Err(Error::Numerical(
                    "fast-normalized fusion weights and eps are all zero".into(),
                ));
            }
            elementwise(&|a, b| ((w1 * a as f64 + w2 * b as f64) / denom) as f32)
        }
        FusionMethod::Concat | FusionMethod::Orthogonal => {
            let orthogonal = params.method == FusionMethod::Orthogonal;
            let mut out = Vec::with_capacity(h * w * 2 * d);
            for (yc, uc) in y.data().chunks_exact(d).zip(u.data().chunks_exact(d)) {
                if orthogonal {
                    let p = project(yc, uc);
                    out.extend(yc.iter().zip(&p).map(|(a, b)| a - b));
                } else {
                    out.extend_from_slice(yc);
                }
                out.extend_from_slice(uc);
            }
            Tensor::new(vec![h, w, 2 * d], out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::gaussian;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(method: FusionMethod) -> FusionParams {
        FusionParams::new(method)
    }

    #[test]
    fn orthogonal_hand_case() {
        let y = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let u = Tensor::new(vec![1, 1, 2], vec![2.0, 0.0]).unwrap();
        let out = fuse(&y, &u, &params(FusionMethod::Orthogonal)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4]);
        assert_eq!(out.data(), &[0.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn degenerate_direction_projects_to_zero() {
        let y = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let u = Tensor::zeros(&[1, 1, 2]);
        let out = fuse(&y, &u, &params(FusionMethod::Orthogonal)).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn simple_methods() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = gaussian(&[2, 3, 4], 1.0, &mut rng);
        let u = gaussian(&[2, 3, 4], 1.0, &mut rng);
        assert_eq!(fuse(&y, &u, &params(FusionMethod::NoneWithoutElm)).unwrap(), y);
        assert_eq!(fuse(&y, &u, &params(FusionMethod::NoneWithElm)).unwrap(), u);
        let ones = Tensor::full(&[2, 3, 4], 1.0);
        assert_eq!(fuse(&y, &ones, &params(FusionMethod::Hadamard)).unwrap(), y);
        let cat = fuse(&y, &u, &params(FusionMethod::Concat)).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 8]);
        assert_eq!(&cat.data()[..4], &y.data()[..4]);
        assert_eq!(&cat.data()[4..8], &u.data()[..4]);
        for m in [FusionMethod::Sum, FusionMethod::Hadamard] {
            assert_eq!(fuse(&y, &u, &params(m)).unwrap(), fuse(&u, &y, &params(m)).unwrap());
        }
        assert!(fuse(&y, &Tensor::zeros(&[2, 3, 5]), &params(FusionMethod::Sum)).is_err());
    }

    #[test]
    fn fast_normalized_equal_weights() {
        let y = Tensor::new(vec![1, 1, 2], vec![1.0, -3.0]).unwrap();
        let u = Tensor::new(vec![1, 1, 2], vec![5.0, 2.0]).unwrap();
        let p = FusionParams {
            v1: 0.8,
            v2: 0.8,
            eps: 1e-4,
            ..params(FusionMethod::FastNormalized)
        };
        let out = fuse(&y, &u, &p).unwrap();
        let w = 0.8f64;
        for i in 0..2 {
            let hand = w * (y.data()[i] as f64 + u.data()[i] as f64) / (2.0 * w + 1e-4);
            assert!((out.data()[i] as f64 - hand).abs() < 1e-6);
        }
        let dead = FusionParams {
            v1: -1.0,
            v2: 0.0,
            eps: 0.0,
            ..params(FusionMethod::FastNormalized)
        };
        assert!(matches!(fuse(&y, &u, &dead), Err(Error::Numerical(_))));
    }

    proptest! {
        #[test]
        fn orthogonal_residual_is_orthogonal(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = gaussian(&[3, 3, 6], 1.0, &mut rng);
            let u = gaussian(&[3, 3, 6], 1.0, &mut rng);
            let out = fuse(&y, &u, &params(FusionMethod::Orthogonal)).unwrap();
            for ((cell, yc), uc) in out.data().chunks(12).zip(y.data().chunks(6)).zip(u.data().chunks(6)) {
                let residual = &cell[..6];
                prop_assert_eq!(&cell[6..], uc);
                let bound = 1e-5 * (dot(yc, yc).sqrt() * dot(uc, uc).sqrt());
                prop_assert!(dot(residual, uc).abs() <= bound);
            }
        }

        #[test]
        fn fast_normalized_within_envelope(seed in 0u64..500, v1 in -1.0f32..2.0, v2 in 0.01f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = gaussian(&[2, 2, 3], 1.0, &mut rng);
            let u = gaussian(&[2, 2, 3], 1.0, &mut rng);
            let p = FusionParams { v1, v2, eps: 1e-4, method: FusionMethod::FastNormalized };
            let out = fuse(&y, &u, &p).unwrap();
            let wsum = v1.max(0.0) as f64 + v2 as f64;
            let shrink = wsum / (wsum + 1e-4);
            for i in 0..out.len() {
                let (a, b) = (y.data()[i] as f64, u.data()[i] as f64);
                let lo = (a.min(b) * shrink).min(a.min(b));
                let hi = (a.max(b) * shrink).max(a.max(b));
                let v = out.data()[i] as f64;
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }
}
