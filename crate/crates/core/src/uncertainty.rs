//! Per-sample uncertainty scores and pseudo-labels computed from predictive
//! distributions.
//!
//! Two measures are supported: predictive entropy and a contrastive score that
//! averages the KL divergence between a candidate's prediction and the
//! predictions of its nearest labeled neighbors in embedding space.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ActuneError, Result};

/// Tolerance on `|sum(p) - 1|` for a vector to count as a probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Floor applied to candidate probabilities inside the KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

pub const DEFAULT_K_NN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMeasure {
    Entropy,
    #[serde(alias = "CAL")]
    Cal,
}

impl std::fmt::Display for UncertaintyMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UncertaintyMeasure::Entropy => write!(f, "entropy"),
            UncertaintyMeasure::Cal => write!(f, "cal"),
        }
    }
}

/// A validated probability vector over `C` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs)?;
        Ok(ProbVector(probs))
    }

    pub fn uniform(class_count: usize) -> Self {
        ProbVector(vec![1.0 / class_count as f64; class_count])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = ActuneError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

pub fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(ActuneError::InvalidSimplex("empty vector".into()));
    }
    let mut sum = 0.0;
    for (j, &v) in p.iter().enumerate() {
        if !v.is_finite() || !(-1e-12..=1.0 + 1e-12).contains(&v) {
            return Err(ActuneError::InvalidSimplex(format!(
                "entry {j} = {v} is outside [0, 1]"
            )));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(ActuneError::InvalidSimplex(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    // Rounding can leave -0.0 or a hair below zero on one-hot inputs.
    h.max(0.0)
}

/// `KL(p || q)` in nats, with `q` floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| pj * (pj.ln() - qj.max(KL_FLOOR).ln()))
        .sum();
    kl.max(0.0)
}

/// Hard pseudo-label: the argmax class (lowest index on ties) and its probability.
pub fn pseudo_label(p: &[f64]) -> Result<(usize, f64)> {
    check_simplex(p)?;
    Ok(argmax(p))
}

pub(crate) fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for j in 1..p.len() {
        if p[j] > p[best] {
            best = j;
        }
    }
    (best, p[best])
}

/// Indices (into `labeled`) of the `k` labeled samples nearest to `point`,
/// ordered by distance then by sample index.
fn nearest_labeled(
    point: &[f64],
    embeddings: &ArrayView2<f64>,
    labeled: &[usize],
    k: usize,
) -> Vec<usize> {
    let mut dists: Vec<(f64, usize)> = labeled
        .iter()
        .map(|&j| {
            let row = embeddings.row(j);
            let d: f64 = row.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, j)
        })
        .collect();
    let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dists.len() {
        dists.select_nth_unstable_by(k, by_dist);
        dists.truncate(k);
    }
    dists.sort_by(by_dist);
    dists.into_iter().map(|(_, j)| j).collect()
}

/// Contrastive score for sample `i`: mean over its `k_nn` nearest labeled
/// neighbors of `KL(p_neighbor || p_i)`.
pub fn cal_score(
    i: usize,
    embeddings: ArrayView2<f64>,
    preds: ArrayView2<f64>,
    labeled: &[usize],
    k_nn: usize,
) -> Result<f64> {
    let p_i = preds.row(i);
    let p_i = p_i
        .as_slice()
        .ok_or_else(|| ActuneError::InvalidArgument("predictions must be row-major".into()))?;
    check_simplex(p_i)?;
    cal_score_for(p_i, i, embeddings, preds, labeled, k_nn)
}

/// Same as [`cal_score`] but with an explicit candidate distribution, e.g. a
/// momentum-aggregated one.
pub fn cal_score_for(
    candidate: &[f64],
    i: usize,
    embeddings: ArrayView2<f64>,
    preds: ArrayView2<f64>,
    labeled: &[usize],
    k_nn: usize,
) -> Result<f64> {
    if labeled.is_empty() {
        return Err(ActuneError::InvalidArgument(
            "contrastive score needs a nonempty labeled set".into(),
        ));
    }
    if k_nn == 0 || k_nn > labeled.len() {
        return Err(ActuneError::InvalidArgument(format!(
            "k_nn = {k_nn} must be in [1, {}]",
            labeled.len()
        )));
    }
    let point = embeddings.row(i).to_vec();
    let neighbors = nearest_labeled(&point, &embeddings, labeled, k_nn);
    let total: f64 = neighbors
        .iter()
        .map(|&j| {
            let pj = preds.row(j);
            kl_divergence(pj.as_slice().expect("row-major predictions"), candidate)
        })
        .sum();
    Ok(total / k_nn as f64)
}

/// Scores every sample in `candidates` with `measure`, in candidate order.
///
/// For the contrastive measure, `k_nn` is clamped to the labeled set size.
pub fn score_samples(
    measure: UncertaintyMeasure,
    embeddings: ArrayView2<f64>,
    preds: ArrayView2<f64>,
    candidates: &[usize],
    labeled: &[usize],
    k_nn: usize,
) -> Result<Vec<f64>> {
    match measure {
        UncertaintyMeasure::Entropy => candidates
            .par_iter()
            .map(|&i| {
                let row = preds.row(i);
                entropy(row.as_slice().expect("row-major predictions"))
            })
            .collect(),
        UncertaintyMeasure::Cal => {
            let k = k_nn.min(labeled.len());
            candidates
                .par_iter()
                .map(|&i| cal_score(i, embeddings, preds, labeled, k))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(entropy(&[0.25; 4]).unwrap(), 4f64.ln(), epsilon = 1e-12);
        // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1), evaluated independently.
        assert_abs_diff_eq!(
            entropy(&[0.7, 0.2, 0.1]).unwrap(),
            0.801_818_552_543_337_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn entropy_rejects_non_simplex() {
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[-0.5, 1.5]).is_err());
        assert!(entropy(&[]).is_err());
        assert!(entropy(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        assert_eq!(pseudo_label(&[0.1, 0.8, 0.1]).unwrap(), (1, 0.8));
        assert_eq!(pseudo_label(&[0.5, 0.5]).unwrap(), (0, 0.5));
        assert_eq!(pseudo_label(&[1.0, 0.0, 0.0]).unwrap(), (0, 1.0));
        assert!(pseudo_label(&[0.3, 0.3]).is_err());
    }

    #[test]
    fn cal_examples() {
        let emb = array![[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]];
        // sample 0 is the candidate; 1 and 2 are equidistant labeled neighbors.
        let preds = array![[0.5, 0.5], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let ln2 = 2f64.ln();

        let one = cal_score(0, emb.view(), preds.view(), &[1], 1).unwrap();
        assert_abs_diff_eq!(one, ln2, epsilon = 1e-12);

        let two = cal_score(0, emb.view(), preds.view(), &[1, 2], 2).unwrap();
        assert_abs_diff_eq!(two, ln2, epsilon = 1e-12);

        // Neighbor 3 predicts exactly p_0.
        let same = cal_score(0, emb.view(), preds.view(), &[3], 1).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn cal_picks_nearest_neighbors() {
        let emb = array![[0.0], [0.1], [10.0]];
        let preds = array![[0.5, 0.5], [0.5, 0.5], [1.0, 0.0]];
        let s = cal_score(0, emb.view(), preds.view(), &[1, 2], 1).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn cal_errors() {
        let emb = array![[0.0], [1.0]];
        let preds = array![[0.5, 0.5], [0.5, 0.5]];
        assert!(cal_score(0, emb.view(), preds.view(), &[], 1).is_err());
        assert!(cal_score(0, emb.view(), preds.view(), &[1], 2).is_err());
        assert!(cal_score(0, emb.view(), preds.view(), &[1], 0).is_err());
    }

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_filter_map("nonzero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_log_c(p in simplex(5)) {
            let h = entropy(&p).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= 5f64.ln() + 1e-12);
        }

        #[test]
        fn entropy_permutation_invariant(p in simplex(4), rot in 0usize..4) {
            let mut q = p.clone();
            q.rotate_left(rot);
            prop_assert!((entropy(&p).unwrap() - entropy(&q).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn cal_permutation_invariant(a in simplex(3), b in simplex(3), c in simplex(3), rot in 0usize..3) {
            let emb = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]];
            let mut preds = ndarray::Array2::zeros((3, 3));
            for (r, p) in [&a, &b, &c].into_iter().enumerate() {
                for j in 0..3 {
                    preds[[r, j]] = p[j];
                }
            }
            let mut permuted = preds.clone();
            for r in 0..3 {
                let mut row = preds.row(r).to_vec();
                row.rotate_left(rot);
                for j in 0..3 {
                    permuted[[r, j]] = row[j];
                }
            }
            let s1 = cal_score(0, emb.view(), preds.view(), &[1, 2], 2).unwrap();
            let s2 = cal_score(0, emb.view(), permuted.view(), &[1, 2], 2).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
        }
    }
}
