//! Momentum memory bank.
//!
//! Keeps, per pool sample, an exponential moving average across rounds of
//! either the predicted distribution or the uncertainty value. Self-training
//! samples are then drawn by their aggregated uncertainty, which penalizes
//! samples whose predictions flip between rounds.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{ActuneError, Result};
use crate::uncertainty::{argmax, check_simplex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    /// Aggregate predicted distributions.
    Prediction,
    /// Aggregate scalar uncertainty values.
    Value,
}

impl std::fmt::Display for BankMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BankMode::Prediction => write!(f, "prediction"),
            BankMode::Value => write!(f, "value"),
        }
    }
}

/// `m_t = (1 - t/T) m_low + (t/T) m_high`.
pub fn momentum_coefficient(t: usize, rounds: usize, m_low: f64, m_high: f64) -> Result<f64> {
    if rounds == 0 || t > rounds {
        return Err(ActuneError::InvalidArgument(format!(
            "momentum round t = {t} must lie in [0, T = {rounds}] with T >= 1"
        )));
    }
    if !(m_low > 0.0 && m_low <= m_high && m_high <= 1.0) {
        return Err(ActuneError::InvalidArgument(format!(
            "momentum endpoints must satisfy 0 < m_low <= m_high <= 1 (got {m_low}, {m_high})"
        )));
    }
    if t == 0 {
        return Ok(m_low);
    }
    if t == rounds {
        return Ok(m_high);
    }
    let frac = t as f64 / rounds as f64;
    Ok((1.0 - frac) * m_low + frac * m_high)
}

/// One self-training sample with its pseudo-label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainPick {
    pub index: usize,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    mode: BankMode,
    /// Entry width: `C` in prediction mode, 1 in value mode.
    width: usize,
    /// Flat `n x width` storage.
    values: Vec<f64>,
    present: Vec<bool>,
    last_update_round: usize,
}

impl MemoryBank {
    pub fn new(mode: BankMode, n: usize, class_count: usize) -> Self {
        let width = match mode {
            BankMode::Prediction => class_count,
            BankMode::Value => 1,
        };
        MemoryBank {
            mode,
            width,
            values: vec![0.0; n * width],
            present: vec![false; n],
            last_update_round: 0,
        }
    }

    pub fn mode(&self) -> BankMode {
        self.mode
    }

    pub fn last_update_round(&self) -> usize {
        self.last_update_round
    }

    pub fn set_round(&mut self, t: usize) {
        self.last_update_round = t;
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn is_initialized(&self, i: usize) -> bool {
        self.present.get(i).copied().unwrap_or(false)
    }

    /// The aggregated distribution for `i` (prediction mode).
    pub fn prediction(&self, i: usize) -> Option<&[f64]> {
        (self.mode == BankMode::Prediction && self.is_initialized(i))
            .then(|| &self.values[i * self.width..(i + 1) * self.width])
    }

    /// The aggregated uncertainty for `i` (value mode).
    pub fn value(&self, i: usize) -> Option<f64> {
        (self.mode == BankMode::Value && self.is_initialized(i)).then(|| self.values[i])
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(ActuneError::IndexOutOfRange {
                index: i,
                n: self.len(),
            });
        }
        Ok(())
    }

    fn check_momentum(m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(ActuneError::InvalidArgument(format!(
                "momentum {m} outside [0, 1]"
            )));
        }
        Ok(())
    }

    /// `g <- m f + (1 - m) g`.
    pub fn update_prediction(&mut self, i: usize, current: &[f64], m: f64) -> Result<()> {
        if self.mode != BankMode::Prediction {
            return Err(ActuneError::Bank(
                "prediction update on a value bank".into(),
            ));
        }
        self.check_index(i)?;
        Self::check_momentum(m)?;
        if !self.present[i] {
            return Err(ActuneError::Bank(format!("entry {i} is not initialized")));
        }
        if current.len() != self.width {
            return Err(ActuneError::DimensionMismatch {
                expected: self.width,
                actual: current.len(),
            });
        }
        check_simplex(current)?;
        let g = &mut self.values[i * self.width..(i + 1) * self.width];
        for (gj, &fj) in g.iter_mut().zip(current) {
            *gj = (m * fj + (1.0 - m) * *gj).max(0.0);
        }
        Ok(())
    }

    /// `g <- m a + (1 - m) g`.
    pub fn update_value(&mut self, i: usize, current: f64, m: f64) -> Result<()> {
        if self.mode != BankMode::Value {
            return Err(ActuneError::Bank(
                "value update on a prediction bank".into(),
            ));
        }
        self.check_index(i)?;
        Self::check_momentum(m)?;
        if !self.present[i] {
            return Err(ActuneError::Bank(format!("entry {i} is not initialized")));
        }
        if !current.is_finite() || current < 0.0 {
            return Err(ActuneError::InvalidArgument(format!(
                "uncertainty {current} must be finite and nonnegative"
            )));
        }
        self.values[i] = m * current + (1.0 - m) * self.values[i];
        Ok(())
    }

    /// Stores `current` as-is, i.e. an update with `m = 1`.
    pub fn init_prediction(&mut self, i: usize, current: &[f64]) -> Result<()> {
        if self.mode != BankMode::Prediction {
            return Err(ActuneError::Bank("prediction init on a value bank".into()));
        }
        self.check_index(i)?;
        if current.len() != self.width {
            return Err(ActuneError::DimensionMismatch {
                expected: self.width,
                actual: current.len(),
            });
        }
        check_simplex(current)?;
        self.values[i * self.width..(i + 1) * self.width].copy_from_slice(current);
        self.present[i] = true;
        Ok(())
    }

    pub fn init_value(&mut self, i: usize, current: f64) -> Result<()> {
        if self.mode != BankMode::Value {
            return Err(ActuneError::Bank("value init on a prediction bank".into()));
        }
        self.check_index(i)?;
        if !current.is_finite() || current < 0.0 {
            return Err(ActuneError::InvalidArgument(format!(
                "uncertainty {current} must be finite and nonnegative"
            )));
        }
        self.values[i] = current;
        self.present[i] = true;
        Ok(())
    }

    /// Updates an initialized entry, or initializes it on first sight.
    pub fn observe_prediction(&mut self, i: usize, current: &[f64], m: f64) -> Result<()> {
        if self.is_initialized(i) {
            self.update_prediction(i, current, m)
        } else {
            self.init_prediction(i, current)
        }
    }

    pub fn observe_value(&mut self, i: usize, current: f64, m: f64) -> Result<()> {
        if self.is_initialized(i) {
            self.update_value(i, current, m)
        } else {
            self.init_value(i, current)
        }
    }

    /// Bottom-`k` selection over `candidates` by aggregated uncertainty.
    ///
    /// In prediction mode each candidate is scored by `uncertainty_of(i, g_i)`
    /// and pseudo-labeled with the argmax of `g_i`. In value mode candidates
    /// are ranked by the stored value and pseudo-labeled with the argmax of
    /// `current_pred(i)`. Ties go to the lower index.
    pub fn select_selftrain_set<'a, U, P>(
        &self,
        candidates: &[usize],
        k: usize,
        uncertainty_of: U,
        current_pred: P,
    ) -> Result<Vec<SelfTrainPick>>
    where
        U: Fn(usize, &[f64]) -> Result<f64>,
        P: Fn(usize) -> &'a [f64],
    {
        if k == 0 {
            return Err(ActuneError::InvalidArgument("k_st must be positive".into()));
        }
        let mut scored = Vec::with_capacity(candidates.len());
        for &i in candidates {
            self.check_index(i)?;
            if !self.present[i] {
                return Err(ActuneError::Bank(format!(
                    "candidate {i} has no bank entry"
                )));
            }
            let (score, class, confidence) = match self.mode {
                BankMode::Prediction => {
                    let g = &self.values[i * self.width..(i + 1) * self.width];
                    let (class, confidence) = argmax(g);
                    (uncertainty_of(i, g)?, class, confidence)
                }
                BankMode::Value => {
                    let (class, confidence) = argmax(current_pred(i));
                    (self.values[i], class, confidence)
                }
            };
            scored.push((
                score,
                SelfTrainPick {
                    index: i,
                    class,
                    confidence,
                },
            ));
        }
        Ok(bottom_k(scored, k))
    }
}

/// Lowest `k` scores, lower index on ties, returned in rank order.
pub(crate) fn bottom_k(mut scored: Vec<(f64, SelfTrainPick)>, k: usize) -> Vec<SelfTrainPick> {
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.index.cmp(&b.1.index))
    });
    scored.truncate(k);
    scored.into_iter().map(|(_, p)| p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::entropy;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entropy_of(_: usize, g: &[f64]) -> Result<f64> {
        entropy(g)
    }

    #[test]
    fn momentum_examples() {
        assert!((momentum_coefficient(5, 10, 0.8, 0.9).unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(momentum_coefficient(10, 10, 0.8, 0.9).unwrap(), 0.9);
        assert_eq!(momentum_coefficient(0, 10, 0.8, 0.9).unwrap(), 0.8);
        assert!(momentum_coefficient(11, 10, 0.8, 0.9).is_err());
        assert!(momentum_coefficient(1, 10, 0.9, 0.8).is_err());
        assert!(momentum_coefficient(1, 10, 0.0, 0.8).is_err());
        assert!(momentum_coefficient(1, 10, 0.5, 1.1).is_err());
    }

    #[test]
    fn momentum_monotone() {
        let ms: Vec<f64> = (0..=10)
            .map(|t| momentum_coefficient(t, 10, 0.6, 1.0).unwrap())
            .collect();
        assert!(ms.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn prediction_update_examples() {
        let mut bank = MemoryBank::new(BankMode::Prediction, 1, 2);
        bank.init_prediction(0, &[0.6, 0.4]).unwrap();
        bank.update_prediction(0, &[0.2, 0.8], 0.5).unwrap();
        let g = bank.prediction(0).unwrap();
        assert!((g[0] - 0.4).abs() < 1e-15 && (g[1] - 0.6).abs() < 1e-15);

        bank.update_prediction(0, &[0.3, 0.7], 1.0).unwrap();
        assert_eq!(bank.prediction(0).unwrap(), &[0.3, 0.7]);

        bank.update_prediction(0, &[0.9, 0.1], 0.0).unwrap();
        assert_eq!(bank.prediction(0).unwrap(), &[0.3, 0.7]);
    }

    #[test]
    fn value_update_examples() {
        let mut bank = MemoryBank::new(BankMode::Value, 1, 3);
        bank.init_value(0, 1.0).unwrap();
        bank.update_value(0, 0.0, 0.9).unwrap();
        assert!((bank.value(0).unwrap() - 0.1).abs() < 1e-15);
        bank.update_value(0, 0.25, 1.0).unwrap();
        assert_eq!(bank.value(0).unwrap(), 0.25);

        let mut fixed = MemoryBank::new(BankMode::Value, 1, 3);
        fixed.init_value(0, 3.0).unwrap();
        for _ in 0..400 {
            fixed.update_value(0, 0.5, 0.1).unwrap();
        }
        assert!((fixed.value(0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mode_and_init_errors() {
        let mut p = MemoryBank::new(BankMode::Prediction, 2, 2);
        assert!(p.update_prediction(0, &[0.5, 0.5], 0.5).is_err());
        assert!(p.update_value(0, 0.5, 0.5).is_err());
        let mut v = MemoryBank::new(BankMode::Value, 2, 2);
        assert!(v.update_prediction(0, &[0.5, 0.5], 0.5).is_err());
        assert!(v.update_value(1, 0.5, 0.5).is_err());
        v.observe_value(1, 0.5, 0.3).unwrap();
        assert_eq!(v.value(1), Some(0.5));
    }

    #[test]
    fn selection_by_bank_entropy() {
        let mut bank = MemoryBank::new(BankMode::Value, 3, 2);
        for (i, v) in [0.1, 0.9, 0.2].into_iter().enumerate() {
            bank.init_value(i, v).unwrap();
        }
        let preds = [[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]];
        let s = bank
            .select_selftrain_set(&[0, 1, 2], 2, entropy_of, |i| &preds[i][..])
            .unwrap();
        assert_eq!(s.iter().map(|p| p.index).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(s[1].class, 1, "value mode labels from current predictions");

        let all = bank
            .select_selftrain_set(&[0, 1, 2], 10, entropy_of, |i| &preds[i][..])
            .unwrap();
        assert_eq!(all.len(), 3);
        assert!(bank
            .select_selftrain_set(&[], 2, entropy_of, |i| &preds[i][..])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn inconsistent_prediction_is_penalized() {
        let mut bank = MemoryBank::new(BankMode::Prediction, 1, 2);
        bank.init_prediction(0, &[0.65, 0.35]).unwrap();
        bank.update_prediction(0, &[0.05, 0.95], 0.5).unwrap();
        let g = bank.prediction(0).unwrap();
        assert!((g[0] - 0.35).abs() < 1e-12 && (g[1] - 0.65).abs() < 1e-12);
        let aggregated = entropy(g).unwrap();
        let current = entropy(&[0.05, 0.95]).unwrap();
        assert!((aggregated - 0.647_446_639_034_632_5).abs() < 1e-9);
        assert!((current - 0.198_515_243_345_872_6).abs() < 1e-9);
        assert!(aggregated > current);

        let s = bank
            .select_selftrain_set(&[0], 1, entropy_of, |_| &[0.05, 0.95][..])
            .unwrap();
        assert_eq!(s[0].class, 1);
        assert!((s[0].confidence - 0.65).abs() < 1e-12);
    }

    #[test]
    fn simplex_preserved_over_random_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let c = rng.random_range(2..6);
            let mut bank = MemoryBank::new(BankMode::Prediction, 1, c);
            let random_simplex = |rng: &mut ChaCha8Rng| {
                let v: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-9).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            bank.init_prediction(0, &random_simplex(&mut rng)).unwrap();
            for _ in 0..50 {
                let m = rng.random::<f64>();
                bank.update_prediction(0, &random_simplex(&mut rng), m)
                    .unwrap();
                let g = bank.prediction(0).unwrap();
                assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(g.iter().all(|&x| x >= 0.0));
            }
        }
    }

    fn flip_entropies(p_prev: f64, p_cur: f64, m: f64) -> (f64, f64) {
        let mut bank = MemoryBank::new(BankMode::Prediction, 1, 2);
        bank.init_prediction(0, &[p_prev, 1.0 - p_prev]).unwrap();
        let current = [1.0 - p_cur, p_cur];
        bank.update_prediction(0, &current, m).unwrap();
        (
            entropy(bank.prediction(0).unwrap()).unwrap(),
            entropy(&current).unwrap(),
        )
    }

    proptest! {
        // Equal-confidence flips, any momentum.
        #[test]
        fn symmetric_flip_raises_entropy(p in 0.5001f64..0.9999, m in 0.0f64..=1.0) {
            let (aggregated, current) = flip_entropies(p, p, m);
            prop_assert!(aggregated >= current - 1e-12);
        }

        // Current round at least as confident as the previous one, with the
        // current round weighted at least half.
        #[test]
        fn flip_toward_more_confident_raises_entropy(
            p_prev in 0.5001f64..0.9999,
            extra in 0.0f64..0.5,
            m in 0.5f64..=1.0,
        ) {
            let p_cur = (p_prev + extra).min(0.9999);
            let (aggregated, current) = flip_entropies(p_prev, p_cur, m);
            prop_assert!(aggregated >= current - 1e-12);
        }
    }
}
