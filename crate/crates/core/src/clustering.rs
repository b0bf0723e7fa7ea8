//! Uncertainty-weighted K-means over the unlabeled pool.
//!
//! Assignment is the usual nearest-centroid rule; the centroid update is the
//! weighted mean of the members, so high-uncertainty samples pull centroids
//! toward themselves. Seeding is standard (unweighted) K-Means++.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ActuneError, Result};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub k: usize,
    /// `k x d` centroid matrix.
    pub centroids: Array2<f64>,
    /// Cluster id per input row.
    pub assignment: Vec<usize>,
    /// Row indices per cluster, ascending.
    pub members: Vec<Vec<usize>>,
    pub weighted_inertia: f64,
    /// Weighted inertia after the initial assignment and after every
    /// subsequent assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl RegionPartition {
    pub fn live_clusters(&self) -> usize {
        self.members.iter().filter(|m| !m.is_empty()).count()
    }
}

#[inline]
fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_vectors(vectors: &ArrayView2<f64>, k: usize) -> Result<()> {
    let n = vectors.nrows();
    if k == 0 {
        return Err(ActuneError::InvalidArgument("K must be positive".into()));
    }
    if k > n {
        return Err(ActuneError::InvalidArgument(format!(
            "K = {k} exceeds the {n} vectors to cluster"
        )));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(ActuneError::InvalidArgument(
            "vectors must be finite".into(),
        ));
    }
    Ok(())
}

/// K-Means++ seeding: returns the row indices chosen as initial centers, in
/// selection order.
pub fn kmeanspp_indices<R: Rng + ?Sized>(
    vectors: ArrayView2<f64>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_vectors(&vectors, k)?;
    let n = vectors.nrows();
    let mut chosen = Vec::with_capacity(k);
    let mut is_chosen = vec![false; n];

    let first = rng.random_range(0..n);
    chosen.push(first);
    is_chosen[first] = true;
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(vectors.row(i), vectors.row(first)))
        .collect();

    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 && total.is_finite() {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                last_positive = Some(i);
                acc += w;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.or(last_positive)
                .expect("positive total has a positive entry")
        } else {
            // Every remaining point coincides with a center.
            let free: Vec<usize> = (0..n).filter(|&i| !is_chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        is_chosen[next] = true;
        let center = vectors.row(next);
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            let nd = sq_dist(vectors.row(i), center);
            if nd < *d {
                *d = nd;
            }
        });
    }
    Ok(chosen)
}

/// K-Means++ seeding: returns the `k x d` matrix of initial centers.
pub fn kmeanspp_init<R: Rng + ?Sized>(
    vectors: ArrayView2<f64>,
    k: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let idx = kmeanspp_indices(vectors, k, rng)?;
    Ok(vectors.select(ndarray::Axis(0), &idx))
}

/// Runs weighted K-means from a K-Means++ seeding.
pub fn weighted_kmeans<R: Rng + ?Sized>(
    vectors: ArrayView2<f64>,
    weights: &[f64],
    k: usize,
    max_iter: usize,
    tol: f64,
    rng: &mut R,
) -> Result<RegionPartition> {
    check_weights(&vectors, weights)?;
    let init = kmeanspp_init(vectors, k, rng)?;
    weighted_kmeans_from(vectors, weights, init, max_iter, tol)
}

fn check_weights(vectors: &ArrayView2<f64>, weights: &[f64]) -> Result<()> {
    if weights.len() != vectors.nrows() {
        return Err(ActuneError::DimensionMismatch {
            expected: vectors.nrows(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ActuneError::InvalidArgument(
            "weights must be finite and nonnegative".into(),
        ));
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(ActuneError::InvalidArgument("weights are all zero".into()));
    }
    Ok(())
}

/// Lloyd iterations with weighted centroids from a given initialization.
///
/// Stops when the assignment is a fixed point, when the relative improvement
/// of the weighted inertia drops below `tol`, or after `max_iter` updates.
pub fn weighted_kmeans_from(
    vectors: ArrayView2<f64>,
    weights: &[f64],
    init: Array2<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<RegionPartition> {
    let k = init.nrows();
    check_vectors(&vectors, k)?;
    check_weights(&vectors, weights)?;
    if init.ncols() != vectors.ncols() {
        return Err(ActuneError::DimensionMismatch {
            expected: vectors.ncols(),
            actual: init.ncols(),
        });
    }

    let mut centroids = init;
    let (mut assignment, mut dists) = assign(vectors, centroids.view());
    let mut inertia = weighted_inertia(&dists, weights);
    let mut trace = vec![inertia];
    let mut iterations = 0;
    let mut fixed_point = false;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        update_centroids(vectors, weights, &assignment, &dists, &mut centroids, true);
        let (next, next_dists) = assign(vectors, centroids.view());
        let next_inertia = weighted_inertia(&next_dists, weights);
        trace.push(next_inertia);

        let unchanged = next == assignment;
        let prev = inertia;
        assignment = next;
        dists = next_dists;
        inertia = next_inertia;

        if unchanged {
            fixed_point = true;
            converged = true;
            break;
        }
        if prev <= 0.0 || prev - inertia < tol * prev {
            converged = true;
            break;
        }
    }

    if !fixed_point {
        // Bring centroids in line with the final assignment.
        update_centroids(vectors, weights, &assignment, &dists, &mut centroids, false);
        dists = (0..vectors.nrows())
            .into_par_iter()
            .map(|i| sq_dist(vectors.row(i), centroids.row(assignment[i])))
            .collect();
        inertia = weighted_inertia(&dists, weights);
        trace.push(inertia);
    }

    let mut members = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        members[c].push(i);
    }

    Ok(RegionPartition {
        k,
        centroids,
        assignment,
        members,
        weighted_inertia: inertia,
        inertia_trace: trace,
        iterations,
        converged,
    })
}

/// Nearest centroid per row (lowest id on ties) and the squared distance to it.
fn assign(vectors: ArrayView2<f64>, centroids: ArrayView2<f64>) -> (Vec<usize>, Vec<f64>) {
    (0..vectors.nrows())
        .into_par_iter()
        .map(|i| {
            let v = vectors.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, mu) in centroids.outer_iter().enumerate() {
                let d = sq_dist(v, mu);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            (best, best_d)
        })
        .unzip()
}

fn weighted_inertia(dists: &[f64], weights: &[f64]) -> f64 {
    dists.iter().zip(weights).map(|(d, w)| d * w).sum()
}

fn update_centroids(
    vectors: ArrayView2<f64>,
    weights: &[f64],
    assignment: &[usize],
    dists: &[f64],
    centroids: &mut Array2<f64>,
    reseed_empty: bool,
) {
    let k = centroids.nrows();
    let d = vectors.ncols();
    let mut members = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        members[c].push(i);
    }

    // Each cluster sums its members in index order, so the result does not
    // depend on the worker count.
    let updated: Vec<Option<Vec<f64>>> = members
        .par_iter()
        .map(|m| {
            if m.is_empty() {
                return None;
            }
            let total_w: f64 = m.iter().map(|&i| weights[i]).sum();
            let mut acc = vec![0.0; d];
            if total_w > 0.0 {
                for &i in m {
                    let w = weights[i];
                    for (a, v) in acc.iter_mut().zip(vectors.row(i)) {
                        *a += w * v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= total_w);
            } else {
                for &i in m {
                    for (a, v) in acc.iter_mut().zip(vectors.row(i)) {
                        *a += v;
                    }
                }
                let len = m.len() as f64;
                acc.iter_mut().for_each(|a| *a /= len);
            }
            Some(acc)
        })
        .collect();

    let mut taken = vec![false; vectors.nrows()];
    for (c, mean) in updated.into_iter().enumerate() {
        match mean {
            Some(mean) => centroids.row_mut(c).assign(&ArrayView1::from(&mean)),
            None if reseed_empty => {
                // Largest weighted residual not already used as a reseed.
                let mut best: Option<(usize, f64)> = None;
                for i in 0..vectors.nrows() {
                    if taken[i] {
                        continue;
                    }
                    let r = weights[i] * dists[i];
                    if best.is_none_or(|(_, br)| r > br) {
                        best = Some((i, r));
                    }
                }
                if let Some((i, _)) = best {
                    taken[i] = true;
                    centroids.row_mut(c).assign(&vectors.row(i));
                }
            }
            None => {}
        }
    }
}
