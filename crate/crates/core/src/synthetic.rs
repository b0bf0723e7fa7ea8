//! Gaussian-mixture pools for simulation.
//!
//! Class `c` is centered at `separation * e_c` when `C <= d`, otherwise at a
//! random direction scaled to `separation`; every class has unit isotropic
//! noise. Optional redundancy groups append tight clusters of near-duplicate
//! samples, which stress batch diversity.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ActuneError, Result};
use crate::pool::Pool;

/// Noise scale of the near-duplicates inside a redundancy group.
pub const DUPLICATE_JITTER: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub redundancy_groups: usize,
    pub group_size: usize,
    /// Held-out samples per class for test accuracy.
    pub test_per_class: usize,
    /// Data seed; the experiment seed is used when absent.
    pub seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            per_class: 500,
            dim: 16,
            separation: 3.0,
            redundancy_groups: 0,
            group_size: 20,
            test_per_class: 250,
            seed: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GaussianMixture {
    means: Array2<f64>,
}

impl GaussianMixture {
    pub fn new<R: Rng + ?Sized>(
        classes: usize,
        dim: usize,
        separation: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 || dim == 0 {
            return Err(ActuneError::InvalidArgument(format!(
                "need at least 2 classes and d >= 1 (got {classes}, {dim})"
            )));
        }
        if !(separation >= 0.0 && separation.is_finite()) {
            return Err(ActuneError::InvalidArgument(format!(
                "separation {separation} must be finite and nonnegative"
            )));
        }
        let mut means = Array2::zeros((classes, dim));
        if classes <= dim {
            for c in 0..classes {
                means[[c, c]] = separation;
            }
        } else {
            for c in 0..classes {
                let v: Array1<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.dot(&v).sqrt().max(1e-12);
                means.row_mut(c).assign(&(v * (separation / norm)));
            }
        }
        Ok(GaussianMixture { means })
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Draws `per_class` samples from every class, grouped by class.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        per_class: usize,
        rng: &mut R,
    ) -> (Array2<f64>, Vec<usize>) {
        let (c, d) = self.means.dim();
        let n = c * per_class;
        let mut x = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for class in 0..c {
            for k in 0..per_class {
                let row = class * per_class + k;
                for j in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    x[[row, j]] = self.means[[class, j]] + noise;
                }
                labels.push(class);
            }
        }
        (x, labels)
    }

    /// Draws `groups` clusters of `size` near-identical samples each; every
    /// group copies one fresh draw from a uniformly chosen class.
    pub fn sample_redundant<R: Rng + ?Sized>(
        &self,
        groups: usize,
        size: usize,
        rng: &mut R,
    ) -> (Array2<f64>, Vec<usize>) {
        let d = self.dim();
        let mut x = Array2::zeros((groups * size, d));
        let mut labels = Vec::with_capacity(groups * size);
        for g in 0..groups {
            let class = rng.random_range(0..self.classes());
            let base: Vec<f64> = (0..d)
                .map(|j| self.means[[class, j]] + rng.sample::<f64, _>(StandardNormal))
                .collect();
            for k in 0..size {
                for j in 0..d {
                    let jitter: f64 = rng.sample(StandardNormal);
                    x[[g * size + k, j]] = base[j] + DUPLICATE_JITTER * jitter;
                }
                labels.push(class);
            }
        }
        (x, labels)
    }
}

/// A pool with oracle labels drawn from a fresh mixture.
pub fn make_synthetic_pool<R: Rng + ?Sized>(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    redundancy_groups: usize,
    rng: &mut R,
) -> Result<Pool> {
    let cfg = SyntheticConfig {
        classes,
        per_class,
        dim,
        separation,
        redundancy_groups,
        test_per_class: 0,
        ..SyntheticConfig::default()
    };
    Ok(make_synthetic(&cfg, rng)?.0)
}

/// Pool plus a held-out test split drawn from the same mixture.
pub fn make_synthetic<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    rng: &mut R,
) -> Result<(Pool, Array2<f64>, Vec<usize>)> {
    if cfg.per_class == 0 {
        return Err(ActuneError::InvalidArgument(
            "per_class must be at least 1".into(),
        ));
    }
    if cfg.redundancy_groups > 0 && cfg.group_size == 0 {
        return Err(ActuneError::InvalidArgument(
            "group_size must be at least 1".into(),
        ));
    }
    let mixture = GaussianMixture::new(cfg.classes, cfg.dim, cfg.separation, rng)?;
    let (mut x, mut labels) = mixture.sample(cfg.per_class, rng);
    if cfg.redundancy_groups > 0 {
        let (rx, rl) = mixture.sample_redundant(cfg.redundancy_groups, cfg.group_size, rng);
        x = ndarray::concatenate![ndarray::Axis(0), x, rx];
        labels.extend(rl);
    }
    let (tx, tl) = mixture.sample(cfg.test_per_class, rng);
    let pool = Pool::new(x, cfg.classes)?.with_oracle(labels)?;
    Ok((pool, tx, tl))
}
