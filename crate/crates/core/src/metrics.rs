//! Retrieval math: descriptors, pairwise Euclidean distances and the
//! mAP/CMC evaluator with the cross-camera junk-filter protocol.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::scalar::f64math;
use crate::Result;

/// Gallery/query entry: the concatenated global + part embedding with its
/// provenance labels. Stored in f32 so persisted and in-memory evaluation
/// paths see identical numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub vector: Vec<f32>,
    pub person_id: usize,
    pub camera_id: usize,
    pub key: String,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalResult {
    #[cfg_attr(feature = "serde", serde(rename = "mAP"))]
    pub map: f64,
    /// `cmc[k-1]` = fraction of valid queries with a positive in the top k.
    pub cmc: Vec<f64>,
    pub num_valid_queries: usize,
}

impl EvalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k - 1]
    }
}

/// Exact Euclidean distance matrix between row sets, via the squared-norm
/// expansion. `Q x G`, f64 accumulation.
pub fn pairwise_distances(queries: &[Vec<f32>], gallery: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    if queries.is_empty() || gallery.is_empty() {
        return Ok(vec![vec![]; queries.len()]);
    }
    let d = queries[0].len();
    for (i, q) in queries.iter().enumerate() {
        if q.len() != d {
            return Err(CoreError::shape(format!("query {i} width {} != {d}", q.len())));
        }
    }
    for (j, g) in gallery.iter().enumerate() {
        if g.len() != d {
            return Err(CoreError::shape(format!(
                "gallery {j} width {} != query width {d}",
                g.len()
            )));
        }
    }
    let sq = |v: &[f32]| -> f64 { v.iter().map(|&x| (x as f64) * (x as f64)).sum() };
    let q_sq: Vec<f64> = queries.iter().map(|q| sq(q)).collect();
    let g_sq: Vec<f64> = gallery.iter().map(|g| sq(g)).collect();
    let mut out = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let mut row = Vec::with_capacity(gallery.len());
        for (gj, g) in gallery.iter().enumerate() {
            let mut dot = 0.0f64;
            for (&a, &b) in q.iter().zip(g) {
                dot += a as f64 * b as f64;
            }
            let d2 = (q_sq[qi] + g_sq[gj] - 2.0 * dot).max(0.0);
            row.push(f64math::sqrt(d2));
        }
        out.push(row);
    }
    Ok(out)
}

/// mAP and CMC under the cross-camera protocol: for each query, gallery
/// entries with the same identity AND the same camera are excluded; the
/// remainder is ranked by ascending distance with ties broken by gallery
/// index. Queries left without any positive are dropped from the averages.
pub fn evaluate(
    dist: &[Vec<f64>],
    query_ids: &[usize],
    query_cams: &[usize],
    gallery_ids: &[usize],
    gallery_cams: &[usize],
    max_rank: usize,
) -> Result<EvalResult> {
    let q = dist.len();
    if query_ids.len() != q || query_cams.len() != q {
        return Err(CoreError::shape("query label arrays must match matrix rows"));
    }
    let g = gallery_ids.len();
    if gallery_cams.len() != g {
        return Err(CoreError::shape("gallery label arrays must match"));
    }
    for (i, row) in dist.iter().enumerate() {
        if row.len() != g {
            return Err(CoreError::shape(format!(
                "distance row {i} has {} entries for {g} gallery items",
                row.len()
            )));
        }
    }
    let max_rank = max_rank.max(1);
    let mut ap_sum = 0.0f64;
    let mut cmc_hits = vec![0usize; max_rank];
    let mut valid = 0usize;
    for qi in 0..q {
        // keep gallery entries that survive the same-id+same-cam exclusion
        let mut order: Vec<usize> = (0..g)
            .filter(|&gj| !(gallery_ids[gj] == query_ids[qi] && gallery_cams[gj] == query_cams[qi]))
            .collect();
        order.sort_by(|&a, &b| {
            dist[qi][a]
                .partial_cmp(&dist[qi][b])
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        let mut positives = 0usize;
        let mut precision_sum = 0.0f64;
        let mut first_hit: Option<usize> = None;
        for (rank0, &gj) in order.iter().enumerate() {
            if gallery_ids[gj] == query_ids[qi] {
                positives += 1;
                precision_sum += positives as f64 / (rank0 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank0);
                }
            }
        }
        if positives == 0 {
            continue; // query has no valid positive: dropped
        }
        valid += 1;
        ap_sum += precision_sum / positives as f64;
        let hit = first_hit.unwrap();
        if hit < max_rank {
            for slot in cmc_hits.iter_mut().skip(hit) {
                *slot += 1;
            }
        }
    }
    if valid == 0 {
        return Err(CoreError::AllQueriesDropped);
    }
    Ok(EvalResult {
        map: ap_sum / valid as f64,
        cmc: cmc_hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        num_valid_queries: valid,
    })
}
