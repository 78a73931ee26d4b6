use dtop_core::config::{EncoderConfig, FusionMethod, HeadConfig, ModelConfig, Tokenizer};
use dtop_core::descriptor::{extract_descriptor, learn_whitening, pairs_from_labels, WhiteningTransform};
use dtop_core::io::{decode_model, decode_ppm, encode_model, encode_ppm, read_database, write_database};
use dtop_core::model::Model;
use dtop_core::retrieval::{crop_query, evaluate, GroundTruth, Protocol};
use dtop_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(tokenizer: Tokenizer, fusion: FusionMethod) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            dim: 16,
            layers: 3,
            heads: 2,
            tokenizer,
            stem_ratio: 8,
            patch_size: 8,
            pos_grid: [4, 4],
            ..EncoderConfig::default()
        },
        head: HeadConfig {
            k: 2,
            out_dim: 24,
            fusion,
            ..HeadConfig::default()
        },
        seed: 21,
        ..ModelConfig::default()
    }
}

fn random_image(w: usize, h: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn model_bytes_reproduce_descriptors() {
    let model = Model::random(&small_config(Tokenizer::Stem, FusionMethod::Orthogonal)).unwrap();
    let restored = decode_model(&encode_model(&model)).unwrap();
    let image = random_image(40, 56, 1);
    let scales = [1.0, 0.5];
    assert_eq!(
        extract_descriptor(&image, &model, &scales).unwrap(),
        extract_descriptor(&image, &restored, &scales).unwrap()
    );
}

#[test]
fn every_fusion_and_tokenizer_yields_unit_descriptors() {
    for tokenizer in [Tokenizer::Stem, Tokenizer::Patch] {
        for fusion in FusionMethod::ALL {
            let model = Model::random(&small_config(tokenizer, fusion)).unwrap();
            let d = extract_descriptor(&random_image(48, 32, 2), &model, &[1.0, std::f32::consts::FRAC_1_SQRT_2]).unwrap();
            assert_eq!(d.len(), 24);
            let norm: f64 = d.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "{tokenizer:?} {fusion:?}: {norm}");
        }
    }
}

#[test]
fn ppm_round_trip_preserves_quantized_pixels() {
    let image = random_image(9, 5, 3);
    let once = decode_ppm(&encode_ppm(&image).unwrap()).unwrap();
    let twice = decode_ppm(&encode_ppm(&once).unwrap()).unwrap();
    assert_eq!(once, twice);
    for (a, b) in image.data().iter().zip(once.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn database_round_trip_and_self_retrieval() {
    let model = Model::random(&small_config(Tokenizer::Stem, FusionMethod::Sum)).unwrap();
    let ids: Vec<String> = (0..6).map(|i| format!("img{i}")).collect();
    let rows: Vec<f32> = (0..6)
        .flat_map(|i| extract_descriptor(&random_image(32, 32, 10 + i), &model, &[1.0]).unwrap())
        .collect();
    let db = Tensor::new(vec![6, 24], rows).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("db");
    write_database(&base, &db, &ids).unwrap();
    let (back, back_ids) = read_database(&base).unwrap();
    assert_eq!(back, db);
    assert_eq!(back_ids, ids);

    let gt = GroundTruth::from_json(
        r#"{"queries": [{"id": "img2", "easy": ["img2"], "hard": [], "junk": []},
                        {"id": "img4", "easy": [], "hard": ["img4"], "junk": ["img0"]}]}"#,
    )
    .unwrap();
    let queries = Tensor::new(vec![2, 24], [db.slab(2), db.slab(4)].concat()).unwrap();
    let eval = evaluate(&db, &ids, &queries, &gt, Protocol::Medium).unwrap();
    assert_eq!(eval.map, 1.0);
    assert_eq!(eval.mp_at_10, 1.0);
}

#[test]
fn whitening_serializes_and_keeps_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<usize> = (0..40).map(|i| i / 4).collect();
    let descriptors: Vec<Vec<f32>> = labels
        .iter()
        .map(|&c| (0..6).map(|j| (c * 7 + j) as f32 * 0.1 + rng.random_range(-0.2..0.2)).collect())
        .collect();
    let t = learn_whitening(&descriptors, &pairs_from_labels(&labels)).unwrap();
    let back = WhiteningTransform::from_tensor(&t.to_tensor()).unwrap();
    for d in &descriptors {
        let a = t.apply(d).unwrap();
        assert_eq!(a, back.apply(d).unwrap());
        let norm: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}

#[test]
fn crop_then_extract_uses_the_box() {
    let image = random_image(50, 40, 7);
    let crop = crop_query(&image, [10.2, 5.0, 41.5, 37.9]).unwrap();
    assert_eq!(crop.shape(), [3, 33, 32]);
    assert_eq!(crop.data()[0], image.data()[5 * 50 + 10]);
    let model = Model::random(&small_config(Tokenizer::Stem, FusionMethod::Concat)).unwrap();
    assert_eq!(extract_descriptor(&crop, &model, &[1.0]).unwrap().len(), 24);
    assert!(crop_query(&image, [0.0, 0.0, 51.0, 10.0]).is_err());
}
