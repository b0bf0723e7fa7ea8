//! Region scoring and the two region-level selections: the active-learning
//! query batch (highest-scoring regions) and the self-training candidate pool
//! (lowest-scoring regions).
//!
//! Everything here works on row indices into the vectors that were clustered;
//! the engine maps them back to pool indices.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::clustering::RegionPartition;
use crate::error::{ActuneError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub cluster_id: usize,
    pub size: usize,
    /// Mean member uncertainty.
    pub avg_uncertainty: f64,
    /// Entropy of the pseudo-label frequencies within the region.
    pub class_diversity: f64,
    /// `avg_uncertainty + beta * class_diversity`.
    pub total: f64,
}

/// Scores every nonempty region. Returns the scores in cluster-id order and
/// the number of empty clusters that were skipped.
pub fn score_regions(
    partition: &RegionPartition,
    scores: &[f64],
    pseudo_labels: &[usize],
    beta: f64,
    class_count: usize,
) -> Result<(Vec<RegionScore>, usize)> {
    let n = partition.assignment.len();
    if scores.len() != n || pseudo_labels.len() != n {
        return Err(ActuneError::DimensionMismatch {
            expected: n,
            actual: scores.len().min(pseudo_labels.len()),
        });
    }
    let mut out = Vec::with_capacity(partition.k);
    let mut empty = 0;
    for (cluster_id, members) in partition.members.iter().enumerate() {
        if members.is_empty() {
            empty += 1;
            continue;
        }
        let size = members.len();
        let avg_uncertainty = members.iter().map(|&i| scores[i]).sum::<f64>() / size as f64;
        let mut counts = vec![0usize; class_count];
        for &i in members {
            let c = pseudo_labels[i];
            if c >= class_count {
                return Err(ActuneError::LabelOutOfRange {
                    index: i,
                    label: c,
                    class_count,
                });
            }
            counts[c] += 1;
        }
        let class_diversity = frequency_entropy(&counts, size);
        out.push(RegionScore {
            cluster_id,
            size,
            avg_uncertainty,
            class_diversity,
            total: region_total(avg_uncertainty, class_diversity, beta),
        });
    }
    if empty > 0 {
        log::warn!("{empty} empty clusters excluded from region scoring");
    }
    Ok((out, empty))
}

pub fn region_total(avg_uncertainty: f64, class_diversity: f64, beta: f64) -> f64 {
    avg_uncertainty + beta * class_diversity
}

fn frequency_entropy(counts: &[usize], size: usize) -> f64 {
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let f = c as f64 / size as f64;
            -f * f.ln()
        })
        .sum();
    h.max(0.0)
}

/// Highest total first, lower cluster id on ties.
fn rank_descending(scores: &[RegionScore]) -> Vec<&RegionScore> {
    let mut ranked: Vec<&RegionScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.total
            .partial_cmp(&a.total)
            .unwrap_or(Ordering::Equal)
            .then(a.cluster_id.cmp(&b.cluster_id))
    });
    ranked
}

/// Lowest total first, lower cluster id on ties.
fn rank_ascending(scores: &[RegionScore]) -> Vec<&RegionScore> {
    let mut ranked: Vec<&RegionScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        a.total
            .partial_cmp(&b.total)
            .unwrap_or(Ordering::Equal)
            .then(a.cluster_id.cmp(&b.cluster_id))
    });
    ranked
}

/// Members of a cluster ordered by decreasing uncertainty, lower index on ties.
fn most_uncertain_first(members: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut m = members.to_vec();
    m.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    m
}

/// The cluster ids of the `m` highest-scoring regions.
pub fn top_regions(region_scores: &[RegionScore], m: usize) -> Vec<usize> {
    rank_descending(region_scores)
        .into_iter()
        .take(m)
        .map(|r| r.cluster_id)
        .collect()
}

/// The cluster ids of the `m` lowest-scoring regions.
pub fn bottom_regions(region_scores: &[RegionScore], m: usize) -> Vec<usize> {
    rank_ascending(region_scores)
        .into_iter()
        .take(m)
        .map(|r| r.cluster_id)
        .collect()
}

/// Hierarchical query selection.
///
/// The `m` highest-scoring regions each get `floor(budget / m)` slots, with
/// the remainder going to the top region. Regions are visited in rank order
/// and contribute their most uncertain members; a region that cannot fill
/// its slots passes the shortfall to the next region in rank order, which may
/// reach past the first `m` regions. Whatever is still missing after the
/// last region is taken from leftover members, again in rank order.
pub fn select_query_batch(
    region_scores: &[RegionScore],
    partition: &RegionPartition,
    scores: &[f64],
    m: usize,
    budget: usize,
) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(ActuneError::InvalidArgument("M must be positive".into()));
    }
    if budget == 0 {
        return Err(ActuneError::InvalidArgument("B must be positive".into()));
    }
    let ranked = rank_descending(region_scores);
    let m = m.min(ranked.len());
    if m == 0 {
        return Ok(Vec::new());
    }
    let per_region = budget / m;
    let remainder = budget - per_region * m;

    let ordered: Vec<Vec<usize>> = ranked
        .iter()
        .map(|r| most_uncertain_first(&partition.members[r.cluster_id], scores))
        .collect();
    let mut taken = vec![0usize; ordered.len()];
    let mut batch = Vec::with_capacity(budget);
    let mut carry = 0usize;
    for (rank, members) in ordered.iter().enumerate() {
        if batch.len() >= budget {
            break;
        }
        let mut quota = carry;
        if rank < m {
            quota += per_region;
        }
        if rank == 0 {
            quota += remainder;
        }
        if quota == 0 {
            break;
        }
        let take = quota.min(members.len());
        batch.extend_from_slice(&members[..take]);
        taken[rank] = take;
        carry = quota - take;
    }
    // A shortfall left after the last region goes back to regions that still
    // have members, in rank order.
    for (rank, members) in ordered.iter().enumerate() {
        let want = budget - batch.len();
        if want == 0 {
            break;
        }
        let extra = want.min(members.len() - taken[rank]);
        batch.extend_from_slice(&members[taken[rank]..taken[rank] + extra]);
        taken[rank] += extra;
    }
    Ok(batch)
}

/// Union of the members of the `m` lowest-scoring regions, ascending.
pub fn select_selftrain_candidates(
    region_scores: &[RegionScore],
    partition: &RegionPartition,
    m: usize,
) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(ActuneError::InvalidArgument("M must be positive".into()));
    }
    let mut out: Vec<usize> = bottom_regions(region_scores, m)
        .into_iter()
        .flat_map(|c| partition.members[c].iter().copied())
        .collect();
    out.sort_unstable();
    Ok(out)
}
