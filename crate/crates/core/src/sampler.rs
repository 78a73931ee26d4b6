//! Aspect-ratio grouped batch planning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch target extents are multiples of this.
pub const SIZE_MULTIPLE: usize = 16;
pub const DEFAULT_RATIO_BINS: usize = 8;
pub const DEFAULT_BASE_AREA: usize = 384 * 384;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

impl ImageMeta {
    pub fn new(id: impl Into<String>, width: usize, height: usize) -> Self {
        Self {
            id: id.into(),
            width,
            height,
        }
    }

    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchGroup {
    pub ids: Vec<String>,
    pub target_w: usize,
    pub target_h: usize,
    pub bucket: usize,
}

fn round_to_multiple(v: f64) -> usize {
    let m = SIZE_MULTIPLE as f64;
    (((v / m) + 0.5).floor() as usize).max(1) * SIZE_MULTIPLE
}

/// Size of area about `base_area` with aspect `w / h = aspect`, both
/// extents rounded to multiples of 16.
pub fn target_size(aspect: f64, base_area: usize) -> (usize, usize) {
    let h = (base_area as f64 / aspect).sqrt();
    (round_to_multiple(h * aspect), round_to_multiple(h))
}

fn validate(metas: &[ImageMeta], batch_size: usize) -> Result<()> {
    if metas.is_empty() {
        return Err(Error::invalid("no images to batch"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if let Some(m) = metas.iter().find(|m| m.width == 0 || m.height == 0) {
        return Err(Error::invalid(format!("image {} has a zero extent", m.id)));
    }
    Ok(())
}

/// Sorts images into `ratio_bins` equal-population aspect buckets, shuffles
/// each bucket, cuts it into batches and shuffles the batch order. Every
/// batch shares the bucket's target size.
pub fn group_batches(
    metas: &[ImageMeta],
    batch_size: usize,
    base_area: usize,
    ratio_bins: usize,
    seed: u64,
) -> Result<Vec<BatchGroup>> {
    validate(metas, batch_size)?;
    if ratio_bins == 0 {
        return Err(Error::invalid("ratio_bins must be at least 1"));
    }
    if base_area == 0 {
        return Err(Error::invalid("base_area must be positive"));
    }
    let mut order: Vec<usize> = (0..metas.len()).collect();
    order.sort_by(|&a, &b| metas[a].aspect().total_cmp(&metas[b].aspect()).then(a.cmp(&b)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = order.len();
    let mut batches = Vec::new();
    for bucket in 0..ratio_bins {
        let members = &order[bucket * n / ratio_bins..(bucket + 1) * n / ratio_bins];
        if members.is_empty() {
            continue;
        }
        let mid = members.len() / 2;
        let median = if members.len() % 2 == 1 {
            metas[members[mid]].aspect()
        } else {
            (metas[members[mid - 1]].aspect() + metas[members[mid]].aspect()) / 2.0
        };
        let (target_w, target_h) = target_size(median, base_area);
        let mut shuffled = members.to_vec();
        shuffled.shuffle(&mut rng);
        for chunk in shuffled.chunks(batch_size) {
            batches.push(BatchGroup {
                ids: chunk.iter().map(|&i| metas[i].id.clone()).collect(),
                target_w,
                target_h,
                bucket,
            });
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Seeded shuffle into batches that all share one target size.
pub fn fixed_batches(
    metas: &[ImageMeta],
    batch_size: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<BatchGroup>> {
    validate(metas, batch_size)?;
    let (w, h) = size;
    if w == 0 || h == 0 || w % SIZE_MULTIPLE != 0 || h % SIZE_MULTIPLE != 0 {
        return Err(Error::invalid(format!(
            "fixed size {w}x{h} must be positive multiples of {SIZE_MULTIPLE}"
        )));
    }
    let mut order: Vec<usize> = (0..metas.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| BatchGroup {
            ids: chunk.iter().map(|&i| metas[i].id.clone()).collect(),
            target_w: w,
            target_h: h,
            bucket: 0,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn square(n: usize) -> Vec<ImageMeta> {
        (0..n).map(|i| ImageMeta::new(format!("img{i}"), 500, 500)).collect()
    }

    #[test]
    fn target_sizes() {
        assert_eq!(target_size(1.0, 384 * 384), (384, 384));
        assert_eq!(target_size(2.0, 294912), (768, 384));
        assert_eq!(target_size(0.5, 294912), (384, 768));
        assert_eq!(target_size(100.0, 256), (160, 16));
    }

    #[test]
    fn square_images_get_384() {
        let batches = group_batches(&square(20), 4, DEFAULT_BASE_AREA, DEFAULT_RATIO_BINS, 0).unwrap();
        assert!(batches.iter().all(|b| (b.target_w, b.target_h) == (384, 384)));
        let fixed = fixed_batches(&square(20), 4, (384, 384), 0).unwrap();
        assert_eq!(fixed.len(), 5);
        assert!(fixed.iter().all(|b| (b.target_w, b.target_h) == (384, 384)));
    }

    #[test]
    fn one_image_per_bucket() {
        let metas: Vec<ImageMeta> = (0..4)
            .map(|i| ImageMeta::new(format!("{i}"), 100 * (i + 1), 100))
            .collect();
        let batches = group_batches(&metas, 8, DEFAULT_BASE_AREA, 4, 1).unwrap();
        assert_eq!(batches.len(), 4);
        assert!(batches.iter().all(|b| b.ids.len() == 1));
    }

    #[test]
    fn fixed_single_batch_and_determinism() {
        let metas = square(7);
        assert_eq!(fixed_batches(&metas, 10, (384, 384), 3).unwrap().len(), 1);
        assert_eq!(
            fixed_batches(&metas, 2, (384, 384), 3).unwrap(),
            fixed_batches(&metas, 2, (384, 384), 3).unwrap()
        );
        assert!(fixed_batches(&metas, 2, (380, 384), 3).is_err());
    }

    #[test]
    fn errors() {
        assert!(group_batches(&[], 2, 100, 2, 0).is_err());
        assert!(group_batches(&square(2), 0, 100, 2, 0).is_err());
        assert!(group_batches(&square(2), 2, 100, 0, 0).is_err());
    }

    fn metas_strategy() -> impl Strategy<Value = Vec<ImageMeta>> {
        prop::collection::vec((32usize..2000, 32usize..2000), 1..80).prop_map(|dims| {
            dims.into_iter()
                .enumerate()
                .map(|(i, (w, h))| ImageMeta::new(format!("id{i}"), w, h))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn partition_and_sizes(metas in metas_strategy(), batch in 1usize..9, bins in 1usize..10, seed in 0u64..1000) {
            let batches = group_batches(&metas, batch, DEFAULT_BASE_AREA, bins, seed).unwrap();
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for b in &batches {
                prop_assert!(!b.ids.is_empty() && b.ids.len() <= batch);
                prop_assert!(b.target_w >= 16 && b.target_w % 16 == 0);
                prop_assert!(b.target_h >= 16 && b.target_h % 16 == 0);
                for id in &b.ids {
                    *counts.entry(id.as_str()).or_default() += 1;
                }
            }
            prop_assert_eq!(counts.len(), metas.len());
            prop_assert!(counts.values().all(|&c| c == 1));
            prop_assert_eq!(&batches, &group_batches(&metas, batch, DEFAULT_BASE_AREA, bins, seed).unwrap());
        }

        #[test]
        fn within_batch_spread_bounded(metas in metas_strategy(), seed in 0u64..100) {
            let aspect: HashMap<&str, f64> = metas.iter().map(|m| (m.id.as_str(), m.aspect())).collect();
            let spread = |ids: &mut dyn Iterator<Item = f64>| {
                let v: Vec<f64> = ids.collect();
                v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
            };
            let global = spread(&mut metas.iter().map(|m| m.aspect()));
            for b in group_batches(&metas, 4, DEFAULT_BASE_AREA, 4, seed).unwrap() {
                let local = spread(&mut b.ids.iter().map(|id| aspect[id.as_str()]));
                prop_assert!(local <= global);
            }
        }
    }
}
