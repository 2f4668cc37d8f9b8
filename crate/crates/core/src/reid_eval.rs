//! Retrieval metrics for re-identification: gallery ranking, average
//! precision, mAP and CMC.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub vehicle_ids: Vec<u64>,
    pub camera_ids: Vec<u32>,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>, vehicle_ids: Vec<u64>, camera_ids: Vec<u32>) -> Result<Self> {
        let n = features.nrows();
        if vehicle_ids.len() != n || camera_ids.len() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows but {} vehicle ids and {} camera ids",
                vehicle_ids.len(),
                camera_ids.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            vehicle_ids,
            camera_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            vehicle_ids: rows.iter().map(|&r| self.vehicle_ids[r]).collect(),
            camera_ids: rows.iter().map(|&r| self.camera_ids[r]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// `1 - cos` on L2-normalized vectors.
    Cosine,
    SquaredEuclidean,
}

/// Repeated evaluation against a gallery of one random image per identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryResampling {
    pub trials: usize,
    pub seed: u64,
}

fn default_ranks() -> Vec<usize> {
    vec![1, 5, 10]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub distance: DistanceKind,
    /// Drop gallery items sharing both vehicle and camera with the query.
    pub exclude_same_camera: bool,
    #[serde(default = "default_ranks")]
    pub cmc_ranks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gallery_resampling: Option<GalleryResampling>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            distance: DistanceKind::Cosine,
            exclude_same_camera: true,
            cmc_ranks: default_ranks(),
            gallery_resampling: None,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.cmc_ranks.is_empty() {
            return Err(Error::InvalidConfig("cmc_ranks must not be empty".into()));
        }
        if self.cmc_ranks[0] == 0 || self.cmc_ranks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "cmc_ranks must be strictly ascending and at least 1".into(),
            ));
        }
        if let Some(r) = self.gallery_resampling {
            if r.trials == 0 {
                return Err(Error::InvalidConfig("gallery resampling needs trials >= 1".into()));
            }
        }
        Ok(())
    }

    fn max_rank(&self) -> usize {
        *self.cmc_ranks.last().unwrap_or(&1)
    }
}

/// Valid gallery items ordered by ascending distance to a query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedGallery {
    /// Gallery indices, nearest first; masked items are absent.
    pub order: Vec<usize>,
    /// Distances aligned with `order`.
    pub distances: Vec<f64>,
    /// Per gallery row: false when the protocol filtered it out.
    pub valid: Vec<bool>,
}

struct PreparedGallery<'a> {
    set: &'a FeatureSet,
    /// Row-normalized copy for cosine ranking.
    normalized: Option<Array2<f64>>,
}

fn normalized_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

fn normalized_vec(v: ArrayView1<f64>) -> Vec<f64> {
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

impl<'a> PreparedGallery<'a> {
    fn new(set: &'a FeatureSet, distance: DistanceKind) -> Self {
        let normalized = match distance {
            DistanceKind::Cosine => Some(normalized_rows(&set.features)),
            DistanceKind::SquaredEuclidean => None,
        };
        Self { set, normalized }
    }

    fn rank(
        &self,
        query: ArrayView1<f64>,
        meta: (u64, u32),
        protocol: &EvalProtocol,
    ) -> RankedGallery {
        let g = self.set;
        let distances: Vec<f64> = match &self.normalized {
            Some(norm) => {
                let q = normalized_vec(query);
                norm.axis_iter(Axis(0))
                    .map(|row| 1.0 - row.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            }
            None => g
                .features
                .axis_iter(Axis(0))
                .map(|row| row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect(),
        };
        let valid: Vec<bool> = (0..g.len())
            .map(|i| {
                !(protocol.exclude_same_camera
                    && g.vehicle_ids[i] == meta.0
                    && g.camera_ids[i] == meta.1)
            })
            .collect();
        let mut order: Vec<usize> = (0..g.len()).filter(|&i| valid[i]).collect();
        // stable: equal distances keep gallery index order
        order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
        let ranked = order.iter().map(|&i| distances[i]).collect();
        RankedGallery {
            order,
            distances: ranked,
            valid,
        }
    }
}

fn check_dims(query_dim: usize, gallery: &FeatureSet) -> Result<()> {
    if query_dim != gallery.dim() {
        return Err(Error::Shape(format!(
            "query dimension {query_dim} does not match gallery dimension {}",
            gallery.dim()
        )));
    }
    Ok(())
}

/// Ranks `gallery` for one query described by `(vehicle_id, camera_id)`.
pub fn rank_gallery(
    query: &[f64],
    query_meta: (u64, u32),
    gallery: &FeatureSet,
    protocol: &EvalProtocol,
) -> Result<RankedGallery> {
    check_dims(query.len(), gallery)?;
    let prepared = PreparedGallery::new(gallery, protocol.distance);
    Ok(prepared.rank(ArrayView1::from(query), query_meta, protocol))
}

/// Mean of precision at each hit. `None` when nothing is relevant, which
/// callers treat as a skipped query rather than a zero.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// `cmc[r - 1]` = share of queries with at least one relevant item whose first
/// hit lies within the top `r`.
pub fn cmc_curve(ranked_relevance: &[Vec<bool>], max_rank: usize) -> Vec<f64> {
    let mut counts = vec![0usize; max_rank];
    let mut valid = 0usize;
    for rel in ranked_relevance {
        if let Some(first) = rel.iter().position(|&r| r) {
            valid += 1;
            if first < max_rank {
                counts[first] += 1;
            }
        }
    }
    if valid == 0 {
        return vec![0.0; max_rank];
    }
    let mut acc = 0usize;
    counts
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / valid as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmcPoint {
    pub rank: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Accuracy at each protocol rank.
    pub cmc: Vec<CmcPoint>,
    /// Full curve for ranks `1..=max(cmc_ranks)`.
    pub cmc_curve: Vec<f64>,
    /// `None` for queries without a valid match.
    pub per_query_ap: Vec<Option<f64>>,
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn rank(&self, r: usize) -> Option<f64> {
        self.cmc.iter().find(|p| p.rank == r).map(|p| p.accuracy)
    }
}

fn relevance(ranked: &RankedGallery, gallery: &FeatureSet, vehicle: u64) -> Vec<bool> {
    ranked
        .order
        .iter()
        .map(|&g| gallery.vehicle_ids[g] == vehicle)
        .collect()
}

pub fn evaluate(queries: &FeatureSet, gallery: &FeatureSet, protocol: &EvalProtocol) -> Result<EvalReport> {
    protocol.validate()?;
    check_dims(queries.dim(), gallery)?;
    let prepared = PreparedGallery::new(gallery, protocol.distance);
    let relevances: Vec<Vec<bool>> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let meta = (queries.vehicle_ids[q], queries.camera_ids[q]);
            let ranked = prepared.rank(queries.features.row(q), meta, protocol);
            relevance(&ranked, gallery, meta.0)
        })
        .collect();

    let per_query_ap: Vec<Option<f64>> = relevances.iter().map(|r| average_precision(r)).collect();
    let aps: Vec<f64> = per_query_ap.iter().flatten().copied().collect();
    if aps.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let curve = cmc_curve(&relevances, protocol.max_rank());
    let cmc = protocol
        .cmc_ranks
        .iter()
        .map(|&rank| CmcPoint {
            rank,
            accuracy: curve[rank - 1],
        })
        .collect();
    Ok(EvalReport {
        map,
        cmc,
        cmc_curve: curve,
        skipped_queries: per_query_ap.len() - aps.len(),
        per_query_ap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampledReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: Vec<CmcPoint>,
    pub trials: Vec<EvalReport>,
}

/// One gallery image per identity, drawn `resampling.trials` times; metrics
/// are averaged across trials.
pub fn evaluate_resampled(
    queries: &FeatureSet,
    gallery: &FeatureSet,
    protocol: &EvalProtocol,
    resampling: GalleryResampling,
) -> Result<ResampledReport> {
    protocol.validate()?;
    if resampling.trials == 0 {
        return Err(Error::InvalidConfig("gallery resampling needs trials >= 1".into()));
    }
    let mut by_id: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &v) in gallery.vehicle_ids.iter().enumerate() {
        by_id.entry(v).or_default().push(i);
    }
    let mut trials = Vec::with_capacity(resampling.trials);
    for t in 0..resampling.trials {
        let mut rng = rng::stream(resampling.seed, t as u64);
        let rows: Vec<usize> = by_id
            .values()
            .map(|rows| rows[rng.random_range(0..rows.len())])
            .collect();
        trials.push(evaluate(queries, &gallery.select(&rows), protocol)?);
    }
    let n = trials.len() as f64;
    let map = trials.iter().map(|r| r.map).sum::<f64>() / n;
    let cmc = protocol
        .cmc_ranks
        .iter()
        .enumerate()
        .map(|(i, &rank)| CmcPoint {
            rank,
            accuracy: trials.iter().map(|r| r.cmc[i].accuracy).sum::<f64>() / n,
        })
        .collect();
    Ok(ResampledReport { map, cmc, trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(features: Array2<f64>, ids: &[u64], cams: &[u32]) -> FeatureSet {
        FeatureSet::new(features, ids.to_vec(), cams.to_vec()).unwrap()
    }

    #[test]
    fn self_match_ranks_first() {
        let g = set(array![[0.3, 0.4]], &[1], &[0]);
        let r = rank_gallery(&[0.3, 0.4], (1, 1), &g, &EvalProtocol::default()).unwrap();
        assert_eq!(r.order, vec![0]);
        assert!(r.distances[0].abs() < 1e-15);
    }

    #[test]
    fn orthogonal_ties_keep_index_order() {
        let g = set(array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], &[1, 2], &[0, 0]);
        let r = rank_gallery(&[1.0, 0.0, 0.0], (9, 9), &g, &EvalProtocol::default()).unwrap();
        assert_eq!(r.order, vec![0, 1]);
        assert_eq!(r.distances, vec![1.0, 1.0]);
    }

    #[test]
    fn same_camera_same_id_masked() {
        let g = set(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], &[1, 1, 2], &[0, 1, 0]);
        let r = rank_gallery(&[1.0, 0.0], (1, 0), &g, &EvalProtocol::default()).unwrap();
        assert_eq!(r.valid, vec![false, true, true]);
        assert_eq!(r.order, vec![1, 2]);
        let off = EvalProtocol {
            exclude_same_camera: false,
            ..Default::default()
        };
        assert_eq!(rank_gallery(&[1.0, 0.0], (1, 0), &g, &off).unwrap().order, vec![0, 1, 2]);
    }

    #[test]
    fn dimension_mismatch() {
        let g = set(array![[1.0, 0.0]], &[1], &[0]);
        let err = rank_gallery(&[1.0], (1, 0), &g, &EvalProtocol::default()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[true]), Some(1.0));
        assert_eq!(average_precision(&[true, false, true]), Some((1.0 + 2.0 / 3.0) / 2.0));
        assert!((average_precision(&[true, false, true]).unwrap() - 0.833333).abs() < 1e-6);
        assert_eq!(average_precision(&[false, true]), Some(0.5));
        assert_eq!(average_precision(&[]), None);
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn cmc_hand_cases() {
        assert_eq!(cmc_curve(&[vec![true], vec![true, false]], 1), vec![1.0]);
        let two = vec![vec![true, false, false], vec![false, false, true]];
        assert_eq!(cmc_curve(&two, 3), vec![0.5, 0.5, 1.0]);
        // queries without hits do not count
        let with_skip = vec![vec![true], vec![false, false]];
        assert_eq!(cmc_curve(&with_skip, 2), vec![1.0, 1.0]);
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let f = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]];
        let s = set(f, &[1, 1, 2, 2], &[0, 1, 0, 1]);
        let p = EvalProtocol {
            exclude_same_camera: false,
            ..Default::default()
        };
        let r = evaluate(&s, &s, &p).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank(1), Some(1.0));
        assert_eq!(r.skipped_queries, 0);
    }

    #[test]
    fn no_valid_match_is_an_error() {
        let q = set(array![[1.0, 0.0]], &[1], &[0]);
        let g = set(array![[1.0, 0.0]], &[1], &[0]);
        assert!(matches!(
            evaluate(&q, &g, &EvalProtocol::default()),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn resampling_keeps_one_per_identity() {
        let g = set(
            array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.2, 0.8]],
            &[1, 1, 2, 2],
            &[1, 2, 1, 2],
        );
        let q = set(array![[1.0, 0.05], [0.05, 1.0]], &[1, 2], &[0, 0]);
        let rs = GalleryResampling { trials: 3, seed: 4 };
        let r = evaluate_resampled(&q, &g, &EvalProtocol::default(), rs).unwrap();
        assert_eq!(r.trials.len(), 3);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn protocol_validation() {
        let bad = EvalProtocol {
            cmc_ranks: vec![5, 1],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
