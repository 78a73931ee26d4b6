use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use dtop_core::analysis::{heatmap_from_features, layer_features};
use dtop_core::config::ModelConfig;
use dtop_core::descriptor::{extract_descriptor, learn_whitening, pairs_from_labels, WhiteningTransform};
use dtop_core::encoder::cls_attention_map;
use dtop_core::io::{
    read_database, read_image_ppm, read_model_file, read_tensor_file, write_database,
    write_model_file, write_tensor_file,
};
use dtop_core::model::Model;
use dtop_core::retrieval::{crop_query, evaluate as score, search as rank, GroundTruth};
use dtop_core::sampler::{fixed_batches, group_batches, ImageMeta};
use dtop_core::{Error, Result, Tensor};
use log::{debug, info};
use rayon::prelude::*;

use crate::{
    AttentionArgs, CkaArgs, EvaluateArgs, ExtractArgs, ImageInputs, IndexArgs, InitModelArgs,
    PlanBatchesArgs, SearchArgs,
};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn whitening_path(index: &Path) -> PathBuf {
    with_suffix(index, ".whiten.dtt")
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {threads} threads: {e}")))
}

fn image_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::InvalidArgument(format!("cannot derive an id from {}", path.display())))
}

/// `(id, path)` pairs: directory entries by name, then explicit files.
fn collect_images(inputs: &ImageInputs) -> Result<Vec<(String, PathBuf)>> {
    let mut paths = Vec::new();
    if let Some(dir) = &inputs.image_dir {
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        found.sort();
        paths.extend(found);
    }
    paths.extend(inputs.images.iter().cloned());
    if paths.is_empty() {
        return Err(Error::InvalidArgument(
            "no input images; pass files or --image-dir".into(),
        ));
    }
    let mut seen = HashSet::new();
    paths
        .into_iter()
        .map(|p| {
            let id = image_id(&p)?;
            if !seen.insert(id.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate image id {id}")));
            }
            Ok((id, p))
        })
        .collect()
}

fn rows_to_tensor(rows: &[Vec<f32>]) -> Result<Tensor> {
    let dim = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![rows.len(), dim], rows.concat())
}

fn rows_of(t: &Tensor) -> Vec<Vec<f32>> {
    let dim = t.shape()[1];
    t.data().chunks_exact(dim).map(<[f32]>::to_vec).collect()
}

/// Loads each image, optionally transforms it, and extracts its descriptor.
/// Results follow input order whatever the thread count.
fn extract_many<F>(
    model: &Model,
    jobs: &[(String, PathBuf)],
    scales: &[f32],
    threads: usize,
    prepare: F,
) -> Result<Vec<Vec<f32>>>
where
    F: Fn(&str, Tensor) -> Result<Tensor> + Sync,
{
    thread_pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|(id, path)| {
                let image = prepare(id, read_image_ppm(path)?)?;
                debug!("extracting {id} ({:?})", image.shape());
                extract_descriptor(&image, model, scales).map_err(|e| match e {
                    Error::Io { .. } => e,
                    other => Error::InvalidArgument(format!("{id}: {other}")),
                })
            })
            .collect()
    })
}

pub fn init_model(a: InitModelArgs) -> Result<ExitCode> {
    let mut config = match &a.config {
        Some(path) => ModelConfig::load(path)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(fusion) = a.fusion {
        config.head.fusion = fusion;
    }
    if let Some(k) = a.k {
        config.head.k = k;
    }
    let model = Model::random(&config)?;
    write_model_file(&a.out, &model)?;
    info!(
        "wrote {} with {} parameters",
        a.out.display(),
        model.param_count()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn extract(a: ExtractArgs) -> Result<ExitCode> {
    let model = read_model_file(&a.model)?;
    let scales = a.scales.unwrap_or_else(|| model.config.pipeline.scales.clone());
    let jobs = collect_images(&a.inputs)?;
    info!("extracting {} images at scales {scales:?}", jobs.len());
    let rows = extract_many(&model, &jobs, &scales, a.threads, |_, img| Ok(img))?;
    let ids: Vec<String> = jobs.into_iter().map(|(id, _)| id).collect();
    write_database(&a.out, &rows_to_tensor(&rows)?, &ids)?;
    Ok(ExitCode::SUCCESS)
}

fn read_labels(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: HashMap<String, serde_json::Value> = serde_json::from_str(&text)?;
    Ok(raw
        .into_iter()
        .map(|(k, v)| {
            let label = match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            (k, label)
        })
        .collect())
}

pub fn index(a: IndexArgs) -> Result<ExitCode> {
    let (descriptors, ids) = read_database(&a.db)?;
    let enabled = match &a.config {
        Some(path) => ModelConfig::load(path)?.pipeline.whitening,
        None => true,
    };
    let whiten_file = whitening_path(&a.out);
    let rows = rows_of(&descriptors);
    let indexed = match (&a.labels, enabled) {
        (Some(path), true) => {
            let labels = read_labels(path)?;
            let (members, classes): (Vec<usize>, Vec<&String>) = ids
                .iter()
                .enumerate()
                .filter_map(|(i, id)| labels.get(id).map(|l| (i, l)))
                .unzip();
            let pairs: Vec<(usize, usize)> = pairs_from_labels(&classes)
                .into_iter()
                .map(|(x, y)| (members[x], members[y]))
                .collect();
            info!(
                "learning whitening from {} labelled descriptors, {} pairs",
                members.len(),
                pairs.len()
            );
            let transform = learn_whitening(&rows, &pairs)?;
            write_tensor_file(&whiten_file, &transform.to_tensor())?;
            rows.iter()
                .map(|r| transform.apply(r))
                .collect::<Result<Vec<_>>>()?
        }
        _ => {
            if whiten_file.exists() {
                fs::remove_file(&whiten_file).map_err(|e| Error::io(&whiten_file, e))?;
            }
            rows
        }
    };
    write_database(&a.out, &rows_to_tensor(&indexed)?, &ids)?;
    Ok(ExitCode::SUCCESS)
}

fn load_whitening(index: &Path) -> Result<Option<WhiteningTransform>> {
    let path = whitening_path(index);
    if !path.exists() {
        return Ok(None);
    }
    info!("applying whitening from {}", path.display());
    Ok(Some(WhiteningTransform::from_tensor(&read_tensor_file(&path)?)?))
}

fn whiten_rows(rows: Vec<Vec<f32>>, w: Option<&WhiteningTransform>) -> Result<Vec<Vec<f32>>> {
    match w {
        Some(w) => rows.iter().map(|r| w.apply(r)).collect(),
        None => Ok(rows),
    }
}

pub fn search(a: SearchArgs) -> Result<ExitCode> {
    let (db, db_ids) = read_database(&a.index)?;
    let (queries, query_ids) = read_database(&a.queries)?;
    let whitening = load_whitening(&a.index)?;
    let queries = whiten_rows(rows_of(&queries), whitening.as_ref())?;
    let mut out = String::from("query_id,rank,db_id,score\n");
    for (qid, q) in query_ids.iter().zip(&queries) {
        let ranked = rank(&db, q)?;
        for (r, (&i, s)) in ranked.ids.iter().zip(&ranked.scores).take(a.top).enumerate() {
            writeln!(out, "{qid},{},{},{s:.6}", r + 1, db_ids[i]).expect("string write");
        }
    }
    emit(a.out.as_deref(), &out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let gt = GroundTruth::load(&a.gt)?;
    let (db, db_ids) = read_database(&a.index)?;
    let rows = match (&a.queries, &a.model, &a.query_dir) {
        (Some(base), _, _) => {
            let (q, ids) = read_database(base)?;
            let by_id: HashMap<&str, usize> =
                ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let all = rows_of(&q);
            gt.queries
                .iter()
                .map(|qt| {
                    by_id.get(qt.id.as_str()).map(|&i| all[i].clone()).ok_or_else(|| {
                        Error::InvalidArgument(format!("no descriptor for query {}", qt.id))
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        (None, Some(model_path), Some(dir)) => {
            let model = read_model_file(model_path)?;
            let scales = a
                .scales
                .clone()
                .unwrap_or_else(|| model.config.pipeline.scales.clone());
            let jobs: Vec<(String, PathBuf)> = gt
                .queries
                .iter()
                .map(|q| (q.id.clone(), dir.join(format!("{}.ppm", q.id))))
                .collect();
            let boxes: HashMap<&str, [f64; 4]> = gt
                .queries
                .iter()
                .filter_map(|q| q.bbox.map(|b| (q.id.as_str(), b)))
                .collect();
            let crop = !a.no_crop;
            extract_many(&model, &jobs, &scales, a.threads, |id, img| {
                match boxes.get(id).filter(|_| crop) {
                    Some(&b) => crop_query(&img, b),
                    None => Ok(img),
                }
            })?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "pass either --queries or both --model and --query-dir".into(),
            ))
        }
    };
    let whitening = load_whitening(&a.index)?;
    let rows = whiten_rows(rows, whitening.as_ref())?;
    let result = score(&db, &db_ids, &rows_to_tensor(&rows)?, &gt, a.protocol)?;

    let mut out = String::from("query_id,ap\n");
    for q in &result.per_query {
        match q.ap {
            Some(ap) => writeln!(out, "{},{ap:.6}", q.id).expect("string write"),
            None => info!("query {} has no positives under {:?}", q.id, a.protocol),
        }
    }
    writeln!(out, "mAP,{:.6}", result.map).expect("string write");
    writeln!(out, "mP@10,{:.6}", result.mp_at_10).expect("string write");
    emit(a.out.as_deref(), &out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn cka(a: CkaArgs) -> Result<ExitCode> {
    let model = read_model_file(&a.model)?;
    let jobs = collect_images(&a.inputs)?;
    let features = thread_pool(a.threads)?.install(|| {
        jobs.par_iter()
            .map(|(_, path)| layer_features(&model, &read_image_ppm(path)?, a.patch_only))
            .collect::<Result<Vec<_>>>()
    })?;
    let heatmap = heatmap_from_features(&features, a.minibatch)?;
    write_tensor_file(&with_suffix(&a.out, ".dtt"), &heatmap.to_tensor())?;
    write_text(
        &with_suffix(&a.out, ".labels.txt"),
        &(heatmap.labels.join("\n") + "\n"),
    )?;
    write_text(&with_suffix(&a.out, ".csv"), &heatmap.to_csv())?;
    Ok(ExitCode::SUCCESS)
}

pub fn attention(a: AttentionArgs) -> Result<ExitCode> {
    let model = read_model_file(&a.model)?;
    let mut image = read_image_ppm(&a.image)?;
    let m = model.downsampling();
    let [_, h, w] = image.dims("image")?;
    if h % m != 0 || w % m != 0 {
        let tw = dtop_core::descriptor::scaled_extent(w, 1.0, m)?;
        let th = dtop_core::descriptor::scaled_extent(h, 1.0, m)?;
        image = dtop_core::descriptor::resize_image(&image, tw, th)?;
    }
    let outputs = model.encode(&image, true)?;
    let map = cls_attention_map(&outputs, a.layer.unwrap_or(outputs.depth()))?;
    write_tensor_file(&with_suffix(&a.out, ".dtt"), &map)?;
    let cols = map.shape()[1];
    let mut csv = String::new();
    for row in map.data().chunks_exact(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write_text(&with_suffix(&a.out, ".csv"), &csv)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("size {s:?} is not of the form WxH"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

pub fn plan_batches(a: PlanBatchesArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.metas).map_err(|e| Error::io(&a.metas, e))?;
    let metas: Vec<ImageMeta> = serde_json::from_str(&text)?;
    let batches = match &a.fixed {
        Some(size) => fixed_batches(&metas, a.batch_size, parse_size(size)?, a.seed)?,
        None => group_batches(&metas, a.batch_size, a.base_area, a.ratio_bins, a.seed)?,
    };
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&batches)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}
