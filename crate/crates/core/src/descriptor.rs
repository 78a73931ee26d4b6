//! Multi-scale descriptor extraction and learned whitening.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::encoder::{interleaved_to_planar, planar_to_interleaved};
use crate::error::{Error, Result};
use crate::kernels::{bilinear_resample, l2_normalize};
use crate::model::Model;
use crate::tensor::Tensor;

/// Relative eigenvalue floor of the pair-difference covariance.
pub const WHITENING_FLOOR: f64 = 1e-6;

/// Target extent for `extent · scale`: the nearest multiple of `multiple`
/// (halves round up), never below `multiple`.
pub fn scaled_extent(extent: usize, scale: f32, multiple: usize) -> Result<usize> {
    let scaled = extent as f64 * scale as f64;
    if scaled.is_nan() || scaled < 1.0 {
        return Err(Error::invalid(format!(
            "extent {extent} at scale {scale} is below one pixel"
        )));
    }
    let m = multiple as f64;
    let units = (scaled / m + 0.5).floor() as usize;
    Ok(units.max(1) * multiple)
}

/// Bilinear resize of a channel-planar `[c, H, W]` image.
pub fn resize_image(image: &Tensor, width: usize, height: usize) -> Result<Tensor> {
    let [_, h, w] = image.dims("image")?;
    if (w, h) == (width, height) {
        return Ok(image.clone());
    }
    let interleaved = planar_to_interleaved(image)?;
    interleaved_to_planar(&bilinear_resample(&interleaved, width, height)?)
}

/// Per-scale inference outputs, each L2-normalized, averaged and
/// renormalized.
pub fn extract_descriptor(image: &Tensor, model: &Model, scales: &[f32]) -> Result<Vec<f32>> {
    if scales.is_empty() {
        return Err(Error::invalid("at least one scale is required"));
    }
    let [_, h, w] = image.dims("image")?;
    let multiple = model.downsampling();
    let mut sum = vec![0.0f64; model.out_dim()];
    for &s in scales {
        let tw = scaled_extent(w, s, multiple)?;
        let th = scaled_extent(h, s, multiple)?;
        let resized = resize_image(image, tw, th)?;
        let u = l2_normalize(&model.infer(&resized)?)?;
        for (acc, v) in sum.iter_mut().zip(&u) {
            *acc += *v as f64;
        }
    }
    let n = scales.len() as f64;
    let mean: Vec<f32> = sum.iter().map(|v| (v / n) as f32).collect();
    l2_normalize(&mean)
}

/// Affine map `x ↦ projection · (x − mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    /// `[N, N]`, row-major; row `i` produces output coordinate `i`.
    pub projection: Tensor,
    pub mean: Vec<f32>,
}

impl WhiteningTransform {
    pub fn new(projection: Tensor, mean: Vec<f32>) -> Result<Self> {
        let [rows, cols] = projection.dims("whitening projection")?;
        if rows != cols || cols != mean.len() {
            return Err(Error::shape(format!(
                "whitening projection {rows}x{cols} does not match mean of length {}",
                mean.len()
            )));
        }
        if !projection.is_finite() || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("whitening transform is not finite".into()));
        }
        Ok(Self { projection, mean })
    }

    pub fn identity(dim: usize) -> Self {
        let mut projection = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            projection.data_mut()[i * dim + i] = 1.0;
        }
        Self {
            projection,
            mean: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// The affine map without normalization.
    pub fn transform(&self, d: &[f32]) -> Result<Vec<f32>> {
        let n = self.dim();
        if d.len() != n {
            return Err(Error::shape(format!(
                "descriptor has {} values, whitening expects {n}",
                d.len()
            )));
        }
        let centered: Vec<f64> = d
            .iter()
            .zip(&self.mean)
            .map(|(&x, &m)| x as f64 - m as f64)
            .collect();
        Ok(self
            .projection
            .data()
            .chunks_exact(n)
            .map(|row| {
                row.iter()
                    .zip(&centered)
                    .map(|(&p, &c)| p as f64 * c)
                    .sum::<f64>() as f32
            })
            .collect())
    }

    pub fn apply(&self, d: &[f32]) -> Result<Vec<f32>> {
        l2_normalize(&self.transform(d)?)
    }

    /// Packs the transform as an `[N + 1, N]` tensor with the mean last.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.dim();
        let mut data = self.projection.data().to_vec();
        data.extend_from_slice(&self.mean);
        Tensor::new(vec![n + 1, n], data).expect("consistent whitening shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [rows, n] = t.dims("whitening tensor")?;
        if rows != n + 1 {
            return Err(Error::shape(format!(
                "whitening tensor must be (N+1)xN, got {rows}x{n}"
            )));
        }
        let (proj, mean) = t.data().split_at(n * n);
        Self::new(Tensor::new(vec![n, n], proj.to_vec())?, mean.to_vec())
    }
}

/// Eigenpairs sorted by descending eigenvalue, each eigenvector signed so
/// its largest-magnitude component is positive.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    (values, vectors)
}

/// Learns a discriminative whitening from descriptors and index pairs of
/// matching descriptors.
///
/// The pair-difference covariance `C_S` is inverted at the square root
/// (eigenvalues floored at `WHITENING_FLOOR · trace / N`), the centered
/// descriptor covariance is mapped through it, and the result is rotated
/// into that covariance's eigenbasis, largest variance first.
pub fn learn_whitening(descriptors: &[Vec<f32>], pairs: &[(usize, usize)]) -> Result<WhiteningTransform> {
    if descriptors.len() < 2 {
        return Err(Error::invalid(format!(
            "whitening needs at least 2 descriptors, got {}",
            descriptors.len()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("whitening needs at least one matching pair"));
    }
    let n = descriptors[0].len();
    if n == 0 || descriptors.iter().any(|d| d.len() != n) {
        return Err(Error::shape("descriptors must share one nonzero dimension"));
    }
    if let Some(&(a, b)) = pairs
        .iter()
        .find(|(a, b)| *a >= descriptors.len() || *b >= descriptors.len())
    {
        return Err(Error::invalid(format!(
            "pair ({a}, {b}) refers past {} descriptors",
            descriptors.len()
        )));
    }

    let count = descriptors.len() as f64;
    let mut mean = vec![0.0f64; n];
    for d in descriptors {
        for (m, &v) in mean.iter_mut().zip(d) {
            *m += v as f64 / count;
        }
    }

    let mut cs = DMatrix::<f64>::zeros(n, n);
    for &(a, b) in pairs {
        let diff = nalgebra::DVector::from_iterator(
            n,
            descriptors[a]
                .iter()
                .zip(&descriptors[b])
                .map(|(&x, &y)| x as f64 - y as f64),
        );
        cs.ger(1.0 / pairs.len() as f64, &diff, &diff, 1.0);
    }
    let trace = cs.trace();
    if trace.is_nan() || trace <= 0.0 {
        return Err(Error::Numerical(
            "all matching pairs are identical; pair-difference covariance is zero".into(),
        ));
    }
    let floor = WHITENING_FLOOR * trace / n as f64;
    let (values, vectors) = sorted_eigen(cs);
    let inv_sqrt = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n,
        values.iter().map(|&l| 1.0 / l.max(floor).sqrt()),
    ));
    let cs_inv_sqrt = &vectors * inv_sqrt * vectors.transpose();

    let mut cov = DMatrix::<f64>::zeros(n, n);
    for d in descriptors {
        let c = nalgebra::DVector::from_iterator(
            n,
            d.iter().zip(&mean).map(|(&x, &m)| x as f64 - m),
        );
        cov.ger(1.0 / count, &c, &c, 1.0);
    }
    let projected = &cs_inv_sqrt * cov * &cs_inv_sqrt;
    let projected = (&projected + projected.transpose()) * 0.5;
    let (_, rotation) = sorted_eigen(projected);
    let p = rotation.transpose() * cs_inv_sqrt;

    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(p[(i, j)] as f32);
        }
    }
    WhiteningTransform::new(
        Tensor::new(vec![n, n], data)?,
        mean.into_iter().map(|m| m as f32).collect(),
    )
}

/// All index pairs within each class, for classes given per descriptor.
pub fn pairs_from_labels<T: PartialEq>(labels: &[T]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}
