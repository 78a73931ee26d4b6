//! Exact cosine search and revisited-benchmark evaluation.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::dot;
use crate::tensor::Tensor;

/// Database indices ordered by descending similarity, ties by ascending index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub ids: Vec<usize>,
    pub scores: Vec<f32>,
}

/// Ranks every row of the `[n, N]` database against `query`.
pub fn search(database: &Tensor, query: &[f32]) -> Result<RankedList> {
    let [n, dim] = database.dims("database")?;
    if n == 0 {
        return Err(Error::invalid("database is empty"));
    }
    if query.len() != dim {
        return Err(Error::shape(format!(
            "query has {} values, database rows have {dim}",
            query.len()
        )));
    }
    let scores: Vec<f32> = database
        .data()
        .chunks_exact(dim)
        .map(|row| dot(row, query) as f32)
        .collect();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let scores = ids.iter().map(|&i| scores[i]).collect();
    Ok(RankedList { ids, scores })
}

/// Average precision with junk removed and trapezoidal interpolation
/// between consecutive positives.
pub fn compute_ap(ranked: &[usize], positives: &HashSet<usize>, junk: &HashSet<usize>) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut found = 0usize;
    let mut ap = 0.0f64;
    for (rank, id) in ranked.iter().filter(|id| !junk.contains(id)).enumerate() {
        if !positives.contains(id) {
            continue;
        }
        let j = found as f64;
        let r = rank as f64;
        let before = if rank > 0 { j / r } else { 1.0 };
        ap += (before + (j + 1.0) / (r + 1.0)) / 2.0;
        found += 1;
    }
    Ok(ap / positives.len() as f64)
}

/// Positives in the junk-cleaned top `k`, over `min(k, |positives|)`.
pub fn precision_at(
    ranked: &[usize],
    positives: &HashSet<usize>,
    junk: &HashSet<usize>,
    k: usize,
) -> Result<f64> {
    if positives.is_empty() || k == 0 {
        return Err(Error::invalid("precision needs positives and k > 0"));
    }
    let hits = ranked
        .iter()
        .filter(|id| !junk.contains(id))
        .take(k)
        .filter(|id| positives.contains(id))
        .count();
    Ok(hits as f64 / k.min(positives.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Medium,
    Hard,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(Self::Medium),
            "hard" => Ok(Self::Hard),
            other => Err(Error::invalid(format!(
                "unknown protocol {other:?}; expected medium or hard"
            ))),
        }
    }
}

/// Labels of one query. Ids name database entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryTruth {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default)]
    pub easy: Vec<String>,
    #[serde(default)]
    pub hard: Vec<String>,
    #[serde(default)]
    pub junk: Vec<String>,
}

impl QueryTruth {
    /// `(positives, junk)` under `protocol`.
    pub fn split(&self, protocol: Protocol) -> (Vec<&str>, Vec<&str>) {
        match protocol {
            Protocol::Medium => {
                let mut pos = as_strs(&self.easy);
                pos.extend(as_strs(&self.hard));
                (pos, as_strs(&self.junk))
            }
            Protocol::Hard => {
                let mut junk = as_strs(&self.junk);
                junk.extend(as_strs(&self.easy));
                (as_strs(&self.hard), junk)
            }
        }
    }
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub queries: Vec<QueryTruth>,
}

impl GroundTruth {
    pub fn from_json(text: &str) -> Result<Self> {
        let gt: Self = serde_json::from_str(text)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks that the label sets of every query are pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        for q in &self.queries {
            let mut seen = HashSet::new();
            for id in q.easy.iter().chain(&q.hard).chain(&q.junk) {
                if !seen.insert(id) {
                    return Err(Error::Format(format!(
                        "query {}: id {id} appears in more than one label set",
                        q.id
                    )));
                }
            }
            if let Some([x0, y0, x1, y1]) = q.bbox {
                if !(x0 < x1 && y0 < y1) {
                    return Err(Error::Format(format!("query {}: degenerate bbox", q.id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub id: String,
    /// `None` when the query has no positives under the protocol.
    pub ap: Option<f64>,
    pub precision_at_10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_query: Vec<QueryResult>,
    pub map: f64,
    pub mp_at_10: f64,
}

/// Ranks the database for each query row (aligned with `gt.queries`) and
/// averages AP and precision@10 over queries that have positives.
pub fn evaluate(
    database: &Tensor,
    database_ids: &[String],
    queries: &Tensor,
    gt: &GroundTruth,
    protocol: Protocol,
) -> Result<Evaluation> {
    let rankings = gt
        .queries
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let [_, dim] = queries.dims("queries")?;
            let row = queries
                .data()
                .get(i * dim..(i + 1) * dim)
                .ok_or_else(|| Error::shape("fewer query descriptors than ground-truth queries"))?;
            Ok(search(database, row)?.ids)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_rankings(&rankings, database_ids, gt, protocol)
}

/// Evaluation over precomputed rankings of database indices.
pub fn evaluate_rankings(
    rankings: &[Vec<usize>],
    database_ids: &[String],
    gt: &GroundTruth,
    protocol: Protocol,
) -> Result<Evaluation> {
    if rankings.len() != gt.queries.len() {
        return Err(Error::shape(format!(
            "{} rankings for {} ground-truth queries",
            rankings.len(),
            gt.queries.len()
        )));
    }
    let index: HashMap<&str, usize> = database_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let resolve = |q: &QueryTruth, ids: Vec<&str>| -> Result<HashSet<usize>> {
        ids.into_iter()
            .map(|id| {
                index.get(id).copied().ok_or_else(|| {
                    Error::Format(format!("query {}: unknown database id {id:?}", q.id))
                })
            })
            .collect()
    };

    let mut per_query = Vec::with_capacity(rankings.len());
    let (mut ap_sum, mut p_sum, mut used) = (0.0f64, 0.0f64, 0usize);
    for (q, ranked) in gt.queries.iter().zip(rankings) {
        let (pos, junk) = q.split(protocol);
        let positives = resolve(q, pos)?;
        let junk = resolve(q, junk)?;
        if positives.is_empty() {
            per_query.push(QueryResult {
                id: q.id.clone(),
                ap: None,
                precision_at_10: None,
            });
            continue;
        }
        let ap = compute_ap(ranked, &positives, &junk)?;
        let p10 = precision_at(ranked, &positives, &junk, 10)?;
        ap_sum += ap;
        p_sum += p10;
        used += 1;
        per_query.push(QueryResult {
            id: q.id.clone(),
            ap: Some(ap),
            precision_at_10: Some(p10),
        });
    }
    if used == 0 {
        return Err(Error::invalid(
            "no query has positives under the selected protocol",
        ));
    }
    Ok(Evaluation {
        per_query,
        map: ap_sum / used as f64,
        mp_at_10: p_sum / used as f64,
    })
}

/// Pixel sub-image of a `[c, H, W]` image for the box `(x0, y0, x1, y1)`.
/// Fractional coordinates widen outward to whole pixels.
pub fn crop_query(image: &Tensor, bbox: [f64; 4]) -> Result<Tensor> {
    let [c, h, w] = image.dims("image")?;
    let [x0, y0, x1, y1] = bbox;
    if bbox.iter().any(|v| !v.is_finite()) || !(x0 < x1 && y0 < y1) {
        return Err(Error::invalid(format!("degenerate crop box {bbox:?}")));
    }
    let (x0, y0, x1, y1) = (x0.floor(), y0.floor(), x1.ceil(), y1.ceil());
    if x0 < 0.0 || y0 < 0.0 || x1 > w as f64 || y1 > h as f64 {
        return Err(Error::invalid(format!(
            "crop box {bbox:?} leaves the {w}x{h} image"
        )));
    }
    let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
    let mut data = Vec::with_capacity(c * (y1 - y0) * (x1 - x0));
    for plane in image.data().chunks_exact(h * w) {
        for row in y0..y1 {
            data.extend_from_slice(&plane[row * w + x0..row * w + x1]);
        }
    }
    Tensor::new(vec![c, y1 - y0, x1 - x0], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::l2_normalize;
    use crate::layers::gaussian_vec;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(ids: &[usize]) -> HashSet<usize> {
        ids.iter().copied().collect()
    }

    fn unit_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend(l2_normalize(&gaussian_vec(dim, 1.0, rng)).unwrap());
        }
        Tensor::new(vec![n, dim], data).unwrap()
    }

    #[test]
    fn self_match_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let db = unit_rows(10, 8, &mut rng);
        let q = db.data()[3 * 8..4 * 8].to_vec();
        let r = search(&db, &q).unwrap();
        assert_eq!(r.ids[0], 3);
        assert!((r.scores[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_database() {
        let mut db = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            db.data_mut()[i * 3 + i] = 1.0;
        }
        let r = search(&db, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(r.ids, vec![1, 0, 2]);
        assert_eq!(r.scores, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn search_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let db = unit_rows(20, 6, &mut rng);
        let q = l2_normalize(&gaussian_vec(6, 1.0, &mut rng)).unwrap();
        let r = search(&db, &q).unwrap();
        let mut brute: Vec<(f64, usize)> = (0..20)
            .map(|i| {
                let s: f64 = (0..6).map(|c| db.data()[i * 6 + c] as f64 * q[c] as f64).sum();
                (s, i)
            })
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        assert_eq!(r.ids, brute.iter().map(|p| p.1).collect::<Vec<_>>());
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn ties_break_by_index() {
        let db = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(search(&db, &[1.0, 0.0]).unwrap().ids, vec![0, 2, 1]);
    }

    #[test]
    fn search_errors() {
        assert!(search(&Tensor::zeros(&[2, 3]), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn ap_hand_cases() {
        let ranked: Vec<usize> = (0..6).collect();
        assert_eq!(compute_ap(&ranked, &set(&[0, 1, 2]), &set(&[])).unwrap(), 1.0);
        let ap = compute_ap(&ranked, &set(&[0, 2]), &set(&[])).unwrap();
        assert!((ap - (1.0 + (0.5 + 2.0 / 3.0) / 2.0) / 2.0).abs() < 1e-15);
        // Junk at rank 0 lifts the positive at rank 1 to the top.
        assert_eq!(compute_ap(&ranked, &set(&[1]), &set(&[0])).unwrap(), 1.0);
        assert!(compute_ap(&ranked, &set(&[]), &set(&[])).is_err());
    }

    #[test]
    fn precision_denominator() {
        let ranked: Vec<usize> = (0..20).collect();
        assert_eq!(precision_at(&ranked, &set(&[0, 1, 2]), &set(&[]), 10).unwrap(), 1.0);
        let many: Vec<usize> = (5..20).collect();
        assert_eq!(precision_at(&ranked, &set(&many), &set(&[]), 10).unwrap(), 0.5);
        assert_eq!(precision_at(&ranked, &set(&[10]), &set(&[0]), 10).unwrap(), 1.0);
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn protocol_split() {
        let q = QueryTruth {
            id: "q".into(),
            bbox: None,
            easy: ids(&["a"]),
            hard: ids(&["b"]),
            junk: ids(&["c"]),
        };
        let (pos, junk) = q.split(Protocol::Medium);
        assert_eq!((pos, junk), (vec!["a", "b"], vec!["c"]));
        let (pos, junk) = q.split(Protocol::Hard);
        assert_eq!((pos, junk), (vec!["b"], vec!["c", "a"]));
    }

    #[test]
    fn medium_beats_hard_on_toy() {
        let db_ids = ids(&["0", "1", "2", "3", "4"]);
        let gt = GroundTruth {
            queries: vec![QueryTruth {
                id: "q".into(),
                bbox: None,
                easy: ids(&["0"]),
                hard: ids(&["3"]),
                junk: vec![],
            }],
        };
        let ranking = vec![(0..5).collect::<Vec<_>>()];
        let med = evaluate_rankings(&ranking, &db_ids, &gt, Protocol::Medium).unwrap();
        let hard = evaluate_rankings(&ranking, &db_ids, &gt, Protocol::Hard).unwrap();
        // Medium: ranks {0, 3} → (1 + (1/3 + 2/4)/2)/2; hard: rank 2 after junking 0.
        assert!((med.map - (1.0 + (1.0 / 3.0 + 0.5) / 2.0) / 2.0).abs() < 1e-15);
        assert!((hard.map - (0.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(med.map > hard.map);
    }

    #[test]
    fn easy_only_query_skipped_under_hard() {
        let db_ids = ids(&["a", "b"]);
        let gt = GroundTruth {
            queries: vec![
                QueryTruth { id: "q1".into(), bbox: None, easy: ids(&["a"]), hard: vec![], junk: vec![] },
                QueryTruth { id: "q2".into(), bbox: None, easy: vec![], hard: ids(&["b"]), junk: vec![] },
            ],
        };
        let rankings = vec![vec![0, 1], vec![1, 0]];
        let e = evaluate_rankings(&rankings, &db_ids, &gt, Protocol::Hard).unwrap();
        assert_eq!(e.per_query[0].ap, None);
        assert_eq!(e.map, 1.0);
        let only_easy = GroundTruth { queries: vec![gt.queries[0].clone()] };
        assert!(evaluate_rankings(&rankings[..1], &db_ids, &only_easy, Protocol::Hard).is_err());
    }

    #[test]
    fn perfect_single_query() {
        let db_ids = ids(&["a", "b", "c", "d"]);
        let gt = GroundTruth {
            queries: vec![QueryTruth {
                id: "q".into(),
                bbox: None,
                easy: ids(&["a", "b"]),
                hard: ids(&["c"]),
                junk: vec![],
            }],
        };
        let e = evaluate_rankings(&[vec![0, 1, 2, 3]], &db_ids, &gt, Protocol::Medium).unwrap();
        assert_eq!((e.map, e.mp_at_10), (1.0, 1.0));
    }

    #[test]
    fn ground_truth_json() {
        let text = r#"{"queries":[{"id":"q","bbox":[1,2,3,4],"easy":["a"],"hard":[],"junk":["b"]}]}"#;
        let gt = GroundTruth::from_json(text).unwrap();
        assert_eq!(gt.queries[0].bbox, Some([1.0, 2.0, 3.0, 4.0]));
        let overlap = r#"{"queries":[{"id":"q","easy":["a"],"hard":["a"],"junk":[]}]}"#;
        assert!(GroundTruth::from_json(overlap).is_err());
        let typo = r#"{"queries":[{"id":"q","easy":[],"hrad":[],"junk":[]}]}"#;
        assert!(GroundTruth::from_json(typo).is_err());
        let unknown = GroundTruth::from_json(r#"{"queries":[{"id":"q","easy":["zz"]}]}"#).unwrap();
        assert!(evaluate_rankings(&[vec![0]], &ids(&["a"]), &unknown, Protocol::Medium).is_err());
    }

    #[test]
    fn crop_cases() {
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        assert_eq!(crop_query(&img, [0.0, 0.0, 4.0, 4.0]).unwrap(), img);
        let c = crop_query(&img, [1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(c.shape(), &[1, 2, 2]);
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
        let wide = crop_query(&img, [0.5, 1.0, 1.5, 2.0]).unwrap();
        assert_eq!(wide.data(), &[4.0, 5.0]);
        assert!(crop_query(&img, [2.0, 0.0, 2.0, 1.0]).is_err());
        assert!(crop_query(&img, [0.0, 0.0, 5.0, 1.0]).is_err());
        assert!(crop_query(&img, [-1.0, 0.0, 2.0, 1.0]).is_err());
    }

    /// Direct AP definition: walk the cleaned ranking and accumulate the
    /// trapezoid between precision before and after each positive.
    fn brute_ap(ranked: &[usize], pos: &HashSet<usize>, junk: &HashSet<usize>) -> f64 {
        let cleaned: Vec<usize> = ranked.iter().copied().filter(|i| !junk.contains(i)).collect();
        let ranks: Vec<usize> = cleaned
            .iter()
            .enumerate()
            .filter(|(_, id)| pos.contains(id))
            .map(|(r, _)| r)
            .collect();
        let mut total = 0.0;
        for (j, &r) in ranks.iter().enumerate() {
            let prec_before = if r == 0 { 1.0 } else { j as f64 / r as f64 };
            let prec_after = (j + 1) as f64 / (r + 1) as f64;
            total += 0.5 * (prec_before + prec_after);
        }
        total / pos.len() as f64
    }

    proptest! {
        #[test]
        fn ap_matches_brute_force(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 2 + (seed as usize % 19);
            let mut ranked: Vec<usize> = (0..n).collect();
            ranked.shuffle(&mut rng);
            let labels: Vec<u8> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
            let mut pos: HashSet<usize> = (0..n).filter(|&i| labels[i] == 0).collect();
            if pos.is_empty() {
                pos.insert(ranked[n - 1]);
            }
            let junk: HashSet<usize> = (0..n).filter(|i| labels[*i] == 1 && !pos.contains(i)).collect();
            let ap = compute_ap(&ranked, &pos, &junk).unwrap();
            prop_assert!((ap - brute_ap(&ranked, &pos, &junk)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn monotone_score_transform_keeps_ranking(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let db = unit_rows(12, 5, &mut rng);
            let q = l2_normalize(&gaussian_vec(5, 1.0, &mut rng)).unwrap();
            let r = search(&db, &q).unwrap();
            let mut transformed: Vec<(f32, usize)> =
                r.ids.iter().zip(&r.scores).map(|(&i, &s)| ((s * 3.0).exp(), i)).collect();
            transformed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            prop_assert_eq!(transformed.iter().map(|p| p.1).collect::<Vec<_>>(), r.ids);
        }
    }
}
