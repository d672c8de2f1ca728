//! Retrieval metrics over a query/gallery split: mean Average Precision and
//! the CMC curve (Rank-1 and beyond). Single-query protocol, no re-ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankingResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub cmc: Vec<f64>,
    pub num_queries: usize,
}

/// Gallery indices per query, Euclidean distance ascending, ties broken by
/// gallery index.
pub fn rank_gallery(query: &Tensor, gallery: &Tensor) -> Result<Vec<Vec<usize>>> {
    if query.cols() != gallery.cols() {
        return Err(Error::ShapeMismatch {
            op: "rank_gallery",
            lhs: query.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    if gallery.rows() == 0 {
        return Err(Error::InvalidParameter("empty gallery".into()));
    }
    let mut out = Vec::with_capacity(query.rows());
    for i in 0..query.rows() {
        let qrow = query.row(i);
        let mut order: Vec<(f64, usize)> = (0..gallery.rows())
            .map(|j| {
                let d: f64 = qrow
                    .iter()
                    .zip(gallery.row(j))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                (d, j)
            })
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(order.into_iter().map(|(_, j)| j).collect());
    }
    Ok(out)
}

/// Mean over queries of AP, with AP the mean of precision-at-k at each
/// positive rank k. Queries without any gallery positive are excluded; the
/// count of exclusions is returned for surfacing as a warning.
pub fn compute_map(
    rankings: &[Vec<usize>],
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<(f64, usize)> {
    if rankings.len() != query_labels.len() {
        return Err(Error::InvalidParameter("rankings/labels length mismatch".into()));
    }
    let mut sum_ap = 0.0;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for (ranking, &qy) in rankings.iter().zip(query_labels) {
        let total_pos = ranking.iter().filter(|&&g| gallery_labels[g] == qy).count();
        if total_pos == 0 {
            excluded += 1;
            continue;
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (k, &g) in ranking.iter().enumerate() {
            if gallery_labels[g] == qy {
                hits += 1;
                ap += hits as f64 / (k + 1) as f64;
            }
        }
        sum_ap += ap / total_pos as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::InvalidParameter("no query has a gallery positive".into()));
    }
    Ok((sum_ap / counted as f64, excluded))
}

/// CMC[r] = fraction of queries with a positive within the top r+1 entries.
pub fn compute_cmc(
    rankings: &[Vec<usize>],
    query_labels: &[usize],
    gallery_labels: &[usize],
    max_rank: usize,
) -> Vec<f64> {
    let mut curve = vec![0.0; max_rank];
    let mut counted = 0usize;
    for (ranking, &qy) in rankings.iter().zip(query_labels) {
        let first_hit = ranking
            .iter()
            .position(|&g| gallery_labels[g] == qy);
        let Some(pos) = first_hit else {
            continue;
        };
        counted += 1;
        for (r, slot) in curve.iter_mut().enumerate() {
            if pos <= r {
                *slot += 1.0;
            }
        }
    }
    if counted > 0 {
        for v in &mut curve {
            *v /= counted as f64;
        }
    }
    curve
}

pub fn evaluate(
    query: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    max_rank: usize,
) -> Result<RankingResult> {
    let rankings = rank_gallery(query, gallery)?;
    let (map, _excluded) = compute_map(&rankings, query_labels, gallery_labels)?;
    let cmc = compute_cmc(&rankings, query_labels, gallery_labels, max_rank);
    Ok(RankingResult {
        map,
        rank1: cmc.first().copied().unwrap_or(0.0),
        cmc,
        num_queries: query.rows(),
    })
}
