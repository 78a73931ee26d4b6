//! Layer similarity via linear centered kernel alignment.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

fn centered_columns(x: &Tensor, what: &str) -> Result<(usize, usize, Vec<f64>)> {
    let [n, d] = x.dims(what)?;
    if n < 2 {
        return Err(Error::invalid(format!("{what} needs at least 2 samples, got {n}")));
    }
    let mut mean = vec![0.0f64; d];
    for row in x.data().chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = x
        .data()
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(&v, &m)| v as f64 - m))
        .collect();
    Ok((n, d, centered))
}

/// Squared Frobenius norm of `aᵀ b` for `[n, da]` and `[n, db]` matrices.
fn cross_frobenius_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut total = 0.0;
    let mut col = vec![0.0f64; db];
    for i in 0..da {
        col.iter_mut().for_each(|c| *c = 0.0);
        for r in 0..n {
            let av = a[r * da + i];
            if av == 0.0 {
                continue;
            }
            for (c, &bv) in col.iter_mut().zip(&b[r * db..(r + 1) * db]) {
                *c += av * bv;
            }
        }
        total += col.iter().map(|c| c * c).sum::<f64>();
    }
    total
}

/// `‖AᵀB‖²_F / (‖AᵀA‖_F ‖BᵀB‖_F)` over column-centered `[n, d]` features.
pub fn linear_cka(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, da, ac) = centered_columns(a, "first features")?;
    let (nb, db, bc) = centered_columns(b, "second features")?;
    if na != nb {
        return Err(Error::shape(format!("sample counts differ: {na} vs {nb}")));
    }
    let aa = cross_frobenius_sq(&ac, da, &ac, da, na).sqrt();
    let bb = cross_frobenius_sq(&bc, db, &bc, db, nb).sqrt();
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Numerical(
            "features have zero variance across samples".into(),
        ));
    }
    Ok(cross_frobenius_sq(&ac, da, &bc, db, na) / (aa * bb))
}

/// Symmetric `L × L` layer-similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaHeatmap {
    pub matrix: Vec<f64>,
    pub labels: Vec<String>,
}

impl CkaHeatmap {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.size() + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        let l = self.size();
        Tensor::new(vec![l, l], self.matrix.iter().map(|&v| v as f32).collect())
            .expect("square heatmap")
    }

    /// Header row of labels, then one labelled row per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for label in &self.labels {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
        for (i, label) in self.labels.iter().enumerate() {
            out.push_str(label);
            for j in 0..self.size() {
                out.push_str(&format!(",{:.6}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Mean-pooled token embedding of every encoder layer `1..=L` for one
/// image; `patch_only` leaves the class token out of the mean.
pub fn layer_features(model: &Model, image: &Tensor, patch_only: bool) -> Result<Vec<Vec<f32>>> {
    let outputs = model.encode(image, false)?;
    outputs.layers[1..]
        .iter()
        .map(|z| {
            let [t, d] = z.dims("layer output")?;
            let skip = usize::from(patch_only);
            let mut mean = vec![0.0f64; d];
            for row in z.data().chunks_exact(d).skip(skip) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v as f64;
                }
            }
            let count = (t - skip) as f64;
            Ok(mean.into_iter().map(|m| (m / count) as f32).collect())
        })
        .collect()
}

/// Heatmap over per-image layer features (`features[image][layer]`). With
/// `minibatch`, CKA is computed per consecutive chunk of images and
/// averaged; a trailing chunk smaller than 2 joins the previous one.
pub fn heatmap_from_features(features: &[Vec<Vec<f32>>], minibatch: Option<usize>) -> Result<CkaHeatmap> {
    if features.len() < 2 {
        return Err(Error::invalid(format!(
            "CKA needs at least 2 images, got {}",
            features.len()
        )));
    }
    let layers = features[0].len();
    if layers == 0 || features.iter().any(|f| f.len() != layers) {
        return Err(Error::shape("images disagree on the number of layers"));
    }
    let size = minibatch.unwrap_or(features.len()).max(2);
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < features.len() {
        let mut end = (start + size).min(features.len());
        if features.len() - end < 2 {
            end = features.len();
        }
        bounds.push((start, end));
        start = end;
    }

    let mut matrix = vec![0.0f64; layers * layers];
    for &(lo, hi) in &bounds {
        let stacked = (0..layers)
            .map(|l| {
                let d = features[lo][l].len();
                let data: Vec<f32> = features[lo..hi].iter().flat_map(|f| f[l].iter().copied()).collect();
                Tensor::new(vec![hi - lo, d], data)
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..layers {
            for j in i..layers {
                let v = linear_cka(&stacked[i], &stacked[j])?;
                matrix[i * layers + j] += v / bounds.len() as f64;
                if i != j {
                    matrix[j * layers + i] += v / bounds.len() as f64;
                }
            }
        }
    }
    Ok(CkaHeatmap {
        matrix,
        labels: (1..=layers).map(|l| format!("layer{l}")).collect(),
    })
}

pub fn cka_heatmap(
    model: &Model,
    images: &[Tensor],
    patch_only: bool,
    minibatch: Option<usize>,
) -> Result<CkaHeatmap> {
    let features = images
        .iter()
        .map(|img| layer_features(model, img, patch_only))
        .collect::<Result<Vec<_>>>()?;
    heatmap_from_features(&features, minibatch)
}
