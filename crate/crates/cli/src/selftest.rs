//! Oracle checks runnable from the installed binary.

use std::collections::HashSet;
use std::process::ExitCode;

use dtop_core::analysis::linear_cka;
use dtop_core::config::{ElmConfig, EncoderConfig, FusionMethod};
use dtop_core::descriptor::learn_whitening;
use dtop_core::encoder::{EncoderWeights, TokenSequence};
use dtop_core::head::{fuse, waveblock, FusionParams, Mode};
use dtop_core::io::{decode_tensor, encode_tensor};
use dtop_core::kernels::bilinear_resample;
use dtop_core::position::{PositionEmbedding, PositionMode};
use dtop_core::retrieval::{compute_ap, search};
use dtop_core::sampler::{group_batches, ImageMeta};
use dtop_core::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = fn() -> std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn ap_oracle() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let n = rng.random_range(1..=20);
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.shuffle(&mut rng);
        let mut pos: HashSet<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        if pos.is_empty() {
            pos.insert(rng.random_range(0..n));
        }
        let junk: HashSet<usize> = (0..n)
            .filter(|i| !pos.contains(i) && rng.random_bool(0.2))
            .collect();
        let cleaned: Vec<usize> = ranked.iter().copied().filter(|i| !junk.contains(i)).collect();
        let mut expected = 0.0;
        let mut j = 0.0;
        for (r, id) in cleaned.iter().enumerate() {
            if pos.contains(id) {
                let r = r as f64;
                let before = if r == 0.0 { 1.0 } else { j / r };
                expected += 0.5 * (before + (j + 1.0) / (r + 1.0));
                j += 1.0;
            }
        }
        expected /= pos.len() as f64;
        let got = compute_ap(&ranked, &pos, &junk).map_err(|e| e.to_string())?;
        ensure((got - expected).abs() <= 1e-12, || {
            format!("trial {trial}: {got} vs {expected}")
        })?;
    }
    Ok(())
}

fn search_oracle() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let db = gaussian(&[20, 8], &mut rng);
    let q = gaussian(&[8], &mut rng);
    let ranked = search(&db, q.data()).map_err(|e| e.to_string())?;
    let mut brute: Vec<(f64, usize)> = db
        .data()
        .chunks(8)
        .enumerate()
        .map(|(i, row)| (row.iter().zip(q.data()).map(|(a, b)| *a as f64 * *b as f64).sum(), i))
        .collect();
    brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ensure(
        ranked.ids == brute.iter().map(|b| b.1).collect::<Vec<_>>(),
        || "ranking differs from brute-force sort".into(),
    )
}

fn dpe_identity() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = gaussian(&[4, 5, 6], &mut rng);
    let cls = gaussian(&[6], &mut rng).into_data();
    let pe = PositionEmbedding::new(cls.clone(), grid.clone()).map_err(|e| e.to_string())?;
    let same = pe
        .resample_positions(5, 4, PositionMode::Bilinear)
        .map_err(|e| e.to_string())?;
    ensure(&same.data()[6..] == grid.data(), || "stored size is not identity".into())?;
    for (w, h) in [(1, 1), (3, 7), (9, 2)] {
        let p = pe
            .resample_positions(w, h, PositionMode::Bicubic)
            .map_err(|e| e.to_string())?;
        ensure(p.data()[..6] == cls[..], || format!("class row changed at {w}x{h}"))?;
    }
    let line = Tensor::new(vec![1, 2, 1], vec![2.0, 4.0]).expect("shape");
    let up = bilinear_resample(&line, 3, 1).map_err(|e| e.to_string())?;
    ensure(up.data() == [2.0, 3.0, 4.0], || format!("got {:?}", up.data()))
}

fn attention_rows() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = EncoderConfig {
        dim: 16,
        layers: 2,
        heads: 4,
        pos_grid: [3, 3],
        ..EncoderConfig::default()
    };
    let enc = EncoderWeights::random(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let map = gaussian(&[3, 3, 16], &mut rng);
    let tokens = TokenSequence::from_map(&enc.cls_token, &map).map_err(|e| e.to_string())?;
    let pos = enc
        .position
        .resample_positions(3, 3, PositionMode::Bilinear)
        .map_err(|e| e.to_string())?;
    let out = enc.encode(&tokens, &pos, true).map_err(|e| e.to_string())?;
    for attn in out.attention.unwrap_or_default() {
        let t = attn.shape()[2];
        for row in attn.data().chunks(t) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            ensure((s - 1.0).abs() < 1e-5, || format!("row sums to {s}"))?;
        }
    }
    Ok(())
}

fn fusion_orthogonal() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = gaussian(&[3, 3, 8], &mut rng);
    let u = gaussian(&[3, 3, 8], &mut rng);
    let out = fuse(&y, &u, &FusionParams::new(FusionMethod::Orthogonal)).map_err(|e| e.to_string())?;
    for ((cell, yc), uc) in out.data().chunks(16).zip(y.data().chunks(8)).zip(u.data().chunks(8)) {
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
        let bound = 1e-5 * dot(yc, yc).sqrt() * dot(uc, uc).sqrt();
        ensure(dot(&cell[..8], uc).abs() <= bound, || "residual not orthogonal".into())?;
    }
    Ok(())
}

fn waveblock_identity() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y = gaussian(&[7, 7, 4], &mut rng);
    let out = waveblock(&y, &ElmConfig::default(), Mode::Infer, &mut rng).map_err(|e| e.to_string())?;
    ensure(out == y, || "inference WaveBlock changed its input".into())
}

fn cka_invariance() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = gaussian(&[40, 3], &mut rng);
    let theta = 0.7f32;
    let (c, s) = (theta.cos(), theta.sin());
    let rotated: Vec<f32> = x
        .data()
        .chunks(3)
        .flat_map(|r| [3.0 * (c * r[0] - s * r[1]), 3.0 * (s * r[0] + c * r[1]), 3.0 * r[2]])
        .collect();
    let rotated = Tensor::new(vec![40, 3], rotated).expect("shape");
    let v = linear_cka(&x, &rotated).map_err(|e| e.to_string())?;
    ensure((v - 1.0).abs() < 1e-6, || format!("CKA under scaled rotation = {v}"))
}

fn whitening_scalar() -> std::result::Result<(), String> {
    let d: Vec<Vec<f32>> = [0.0f32, 2.0, 1.0, 3.0].iter().map(|&v| vec![v]).collect();
    let t = learn_whitening(&d, &[(0, 1), (2, 3)]).map_err(|e| e.to_string())?;
    let p = t.projection.data()[0];
    ensure((p - 0.5).abs() < 1e-6, || format!("scale {p}, expected 0.5"))
}

fn dtt_round_trip() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = gaussian(&[3, 4, 5], &mut rng);
    let back = decode_tensor(&encode_tensor(&t)).map_err(|e| e.to_string())?;
    ensure(back == t, || "round trip differs".into())
}

fn sampler_partition() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let metas: Vec<ImageMeta> = (0..50)
        .map(|i| ImageMeta::new(format!("{i}"), rng.random_range(100..900), rng.random_range(100..900)))
        .collect();
    let batches: Result<_> = group_batches(&metas, 6, 384 * 384, 8, 0);
    let batches = batches.map_err(|e| e.to_string())?;
    let mut seen = HashSet::new();
    for b in &batches {
        ensure(b.target_w % 16 == 0 && b.target_h % 16 == 0, || "size not a multiple of 16".into())?;
        for id in &b.ids {
            ensure(seen.insert(id.clone()), || format!("{id} appears twice"))?;
        }
    }
    ensure(seen.len() == metas.len(), || "images missing from batches".into())
}

const CHECKS: &[(&str, Check)] = &[
    ("ap-oracle", ap_oracle),
    ("search-oracle", search_oracle),
    ("position-resampling", dpe_identity),
    ("attention-normalization", attention_rows),
    ("orthogonal-fusion", fusion_orthogonal),
    ("waveblock-inference", waveblock_identity),
    ("cka-invariance", cka_invariance),
    ("whitening-scalar", whitening_scalar),
    ("tensor-round-trip", dtt_round_trip),
    ("sampler-partition", sampler_partition),
];

pub fn run() -> Result<ExitCode> {
    let mut failed = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => println!("pass {name}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    println!("selftest: {} passed, {failed} failed", CHECKS.len() - failed);
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
