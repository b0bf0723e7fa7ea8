//! Built-in model: multinomial logistic regression over fixed embeddings,
//! trained by full-batch gradient descent from a zero initialization.
//!
//! The self-training objective is mean cross-entropy over labeled samples
//! plus `lambda` times the mean thresholded cross-entropy over pseudo-labeled
//! samples. A pseudo-labeled sample only contributes while the model being
//! trained assigns more than `gamma` probability to its pseudo-label; the
//! mask is re-evaluated at the start of every epoch.

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ActuneError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 0.1,
            epochs: 300,
            l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `C x d`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub trained_round: usize,
}

impl ModelParams {
    pub fn zeros(class_count: usize, dim: usize) -> Self {
        ModelParams {
            weights: Array2::zeros((class_count, dim)),
            bias: Array1::zeros(class_count),
            trained_round: 0,
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub epochs_run: usize,
    pub labeled_count: usize,
    /// Pseudo-labeled samples that passed the confidence threshold in the
    /// last epoch.
    pub pseudo_used_count: usize,
    pub pseudo_filtered_count: usize,
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

fn logits_row(params: &ModelParams, x: &[f64], out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        let w = params.weights.row(c);
        *o = params.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `softmax(W v + b)` for every row of `x`.
pub fn predict_proba(params: &ModelParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != params.dim() {
        return Err(ActuneError::DimensionMismatch {
            expected: params.dim(),
            actual: x.ncols(),
        });
    }
    let c = params.class_count();
    let mut out = Array2::zeros((x.nrows(), c));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut o, row)| {
            let row = row.to_vec();
            let slice = o.as_slice_mut().expect("fresh array is contiguous");
            logits_row(params, &row, slice);
            softmax_in_place(slice);
        });
    Ok(out)
}

/// The self-training objective over a fixed data selection. Exposed so the
/// analytic gradient can be checked against finite differences.
pub struct Objective<'a> {
    pub x: ArrayView2<'a, f64>,
    /// `(row, class)` pairs with human labels.
    pub labeled: &'a [(usize, usize)],
    /// `(row, pseudo_class)` pairs.
    pub pseudo: &'a [(usize, usize)],
    pub lambda: f64,
    pub l2: f64,
}

impl<'a> Objective<'a> {
    /// Threshold mask: `p(pseudo_class) > gamma` under `params`.
    pub fn omega(&self, params: &ModelParams, gamma: f64) -> Vec<bool> {
        let c = params.class_count();
        let mut buf = vec![0.0; c];
        self.pseudo
            .iter()
            .map(|&(i, y)| {
                let row = self.x.row(i).to_vec();
                logits_row(params, &row, &mut buf);
                softmax_in_place(&mut buf);
                buf[y] > gamma
            })
            .collect()
    }

    pub fn loss(&self, params: &ModelParams, omega: &[bool]) -> f64 {
        self.evaluate(params, omega, false).0
    }

    /// Loss and its gradient with respect to `(weights, bias)`.
    pub fn loss_and_grad(
        &self,
        params: &ModelParams,
        omega: &[bool],
    ) -> (f64, Array2<f64>, Array1<f64>) {
        let (loss, grad) = self.evaluate(params, omega, true);
        let (gw, gb) = grad.expect("gradient requested");
        (loss, gw, gb)
    }

    #[allow(clippy::type_complexity)]
    fn evaluate(
        &self,
        params: &ModelParams,
        omega: &[bool],
        with_grad: bool,
    ) -> (f64, Option<(Array2<f64>, Array1<f64>)>) {
        let c = params.class_count();
        let d = params.dim();
        let mut gw = Array2::<f64>::zeros((c, d));
        let mut gb = Array1::<f64>::zeros(c);
        let mut loss = 0.0;
        let mut probs = vec![0.0; c];

        let mut accumulate = |i: usize, y: usize, coef: f64, loss: &mut f64| {
            let row = self.x.row(i);
            let row = row
                .as_slice()
                .map(|s| s.to_vec())
                .unwrap_or_else(|| row.to_vec());
            logits_row(params, &row, &mut probs);
            let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + probs.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            *loss += coef * (lse - probs[y]);
            if with_grad {
                for p in probs.iter_mut() {
                    *p = (*p - lse).exp();
                }
                for k in 0..c {
                    let delta = coef * (probs[k] - if k == y { 1.0 } else { 0.0 });
                    gb[k] += delta;
                    let mut wrow = gw.row_mut(k);
                    for (g, v) in wrow.iter_mut().zip(&row) {
                        *g += delta * v;
                    }
                }
            }
        };

        if !self.labeled.is_empty() {
            let coef = 1.0 / self.labeled.len() as f64;
            for &(i, y) in self.labeled {
                accumulate(i, y, coef, &mut loss);
            }
        }
        if self.lambda != 0.0 && !self.pseudo.is_empty() {
            let coef = self.lambda / self.pseudo.len() as f64;
            for (&(i, y), &keep) in self.pseudo.iter().zip(omega) {
                if keep {
                    accumulate(i, y, coef, &mut loss);
                }
            }
        }
        if self.l2 != 0.0 {
            loss += 0.5 * self.l2 * params.weights.iter().map(|w| w * w).sum::<f64>();
            if with_grad {
                gw.scaled_add(self.l2, &params.weights);
            }
        }
        (loss, with_grad.then_some((gw, gb)))
    }
}

fn check_rows(x: &ArrayView2<f64>, pairs: &[(usize, usize)], class_count: usize) -> Result<()> {
    for &(i, y) in pairs {
        if i >= x.nrows() {
            return Err(ActuneError::IndexOutOfRange {
                index: i,
                n: x.nrows(),
            });
        }
        if y >= class_count {
            return Err(ActuneError::LabelOutOfRange {
                index: i,
                label: y,
                class_count,
            });
        }
    }
    Ok(())
}

/// Fits on labeled samples only.
pub fn train_initial(
    x: ArrayView2<f64>,
    labeled: &[(usize, usize)],
    class_count: usize,
    hyper: &TrainHyper,
) -> Result<(ModelParams, TrainReport)> {
    train_selftrain(x, labeled, &[], 0.0, 0.5, class_count, hyper)
}

/// Fits the thresholded self-training objective from a zero initialization.
pub fn train_selftrain(
    x: ArrayView2<f64>,
    labeled: &[(usize, usize)],
    pseudo: &[(usize, usize)],
    lambda: f64,
    gamma: f64,
    class_count: usize,
    hyper: &TrainHyper,
) -> Result<(ModelParams, TrainReport)> {
    if labeled.is_empty() {
        return Err(ActuneError::EmptyLabeledSet);
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(ActuneError::InvalidArgument(format!(
            "gamma = {gamma} must lie in (0, 1)"
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ActuneError::InvalidArgument(format!(
            "lambda = {lambda} must be finite and nonnegative"
        )));
    }
    check_rows(&x, labeled, class_count)?;
    check_rows(&x, pseudo, class_count)?;

    let objective = Objective {
        x,
        labeled,
        pseudo,
        lambda,
        l2: hyper.l2,
    };
    let mut params = ModelParams::zeros(class_count, x.ncols());
    let mut omega = objective.omega(&params, gamma);
    for _ in 0..hyper.epochs {
        omega = objective.omega(&params, gamma);
        let (loss, gw, gb) = objective.loss_and_grad(&params, &omega);
        if !loss.is_finite() {
            return Err(ActuneError::Diverged(loss));
        }
        params.weights.scaled_add(-hyper.lr, &gw);
        params.bias.scaled_add(-hyper.lr, &gb);
    }
    let final_loss = objective.loss(&params, &omega);
    if !final_loss.is_finite() || params.weights.iter().any(|w| !w.is_finite()) {
        return Err(ActuneError::Diverged(final_loss));
    }
    let used = omega.iter().filter(|&&w| w).count();
    Ok((
        params,
        TrainReport {
            final_loss,
            epochs_run: hyper.epochs,
            labeled_count: labeled.len(),
            pseudo_used_count: used,
            pseudo_filtered_count: pseudo.len() - used,
        },
    ))
}

/// Interface for the model behind the engine. The engine only needs a fit on
/// labeled plus pseudo-labeled rows and per-row class probabilities.
pub trait ModelBackend: Send + Sync {
    type Model: Clone + Debug + Serialize + DeserializeOwned + Send + Sync;

    #[allow(clippy::too_many_arguments)]
    fn fit(
        &self,
        x: ArrayView2<f64>,
        labeled: &[(usize, usize)],
        pseudo: &[(usize, usize)],
        lambda: f64,
        gamma: f64,
        class_count: usize,
        round: usize,
    ) -> Result<(Self::Model, TrainReport)>;

    fn predict_proba(&self, model: &Self::Model, x: ArrayView2<f64>) -> Result<Array2<f64>>;
}

#[derive(Clone, Debug, Default)]
pub struct SoftmaxBackend {
    pub hyper: TrainHyper,
}

impl SoftmaxBackend {
    pub fn new(hyper: TrainHyper) -> Self {
        SoftmaxBackend { hyper }
    }
}

impl ModelBackend for SoftmaxBackend {
    type Model = ModelParams;

    fn fit(
        &self,
        x: ArrayView2<f64>,
        labeled: &[(usize, usize)],
        pseudo: &[(usize, usize)],
        lambda: f64,
        gamma: f64,
        class_count: usize,
        round: usize,
    ) -> Result<(ModelParams, TrainReport)> {
        let (mut params, report) =
            train_selftrain(x, labeled, pseudo, lambda, gamma, class_count, &self.hyper)?;
        params.trained_round = round;
        Ok((params, report))
    }

    fn predict_proba(&self, model: &ModelParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        predict_proba(model, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn zero_params_are_uniform() {
        let p = ModelParams::zeros(3, 2);
        let probs = predict_proba(&p, array![[1.0, -4.0], [100.0, 3.0]].view()).unwrap();
        for v in probs.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        let mut p = ModelParams::zeros(3, 2);
        p.weights = array![[0.5, -1.0], [2.0, 0.3], [-0.7, 0.1]];
        p.bias = array![0.1, -0.2, 0.3];
        let x = array![[1.5, -0.5]];
        let a = predict_proba(&p, x.view()).unwrap();
        p.bias += 1000.0;
        let b = predict_proba(&p, x.view()).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_independent_evaluation() {
        let mut p = ModelParams::zeros(3, 2);
        p.weights = array![[0.5, -1.0], [2.0, 0.3], [-0.7, 0.1]];
        p.bias = array![0.1, -0.2, 0.3];
        let probs = predict_proba(&p, array![[1.5, -0.5]].view()).unwrap();
        // logits [1.35, 2.65, -0.8]; exp / sum evaluated separately.
        let expected = [
            0.208_952_318_646_547_3,
            0.766_708_046_501_090_4,
            0.024_339_634_852_362_43,
        ];
        for (got, want) in probs.row(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = ModelParams::zeros(2, 3);
        assert!(predict_proba(&p, array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn separable_toy_set_is_fit() {
        // Separable by x0 + x1 = 0 (the perceptron direction (1, 1) classifies all four).
        let x = array![[1.0, 1.0], [2.0, 0.5], [-1.0, -1.0], [-0.5, -2.0]];
        let labeled = [(0, 1), (1, 1), (2, 0), (3, 0)];
        let hyper = TrainHyper {
            epochs: 500,
            ..TrainHyper::default()
        };
        let (params, report) = train_initial(x.view(), &labeled, 2, &hyper).unwrap();
        let probs = predict_proba(&params, x.view()).unwrap();
        for &(i, y) in &labeled {
            let row = probs.row(i);
            assert!(row[y] > row[1 - y], "sample {i}");
        }
        assert_eq!(report.labeled_count, 4);
        assert_eq!(report.epochs_run, 500);
    }

    #[test]
    fn single_sample_fit() {
        let x = array![[0.3, -0.2]];
        let (params, _) = train_initial(x.view(), &[(0, 0)], 2, &TrainHyper::default()).unwrap();
        let probs = predict_proba(&params, x.view()).unwrap();
        assert!(probs[[0, 0]] >= 0.9, "{}", probs[[0, 0]]);
    }

    #[test]
    fn zero_epochs_uniform() {
        let x = array![[0.3, -0.2], [1.0, 1.0]];
        let hyper = TrainHyper {
            epochs: 0,
            ..TrainHyper::default()
        };
        let (params, report) = train_initial(x.view(), &[(0, 0)], 4, &hyper).unwrap();
        let probs = predict_proba(&params, x.view()).unwrap();
        assert!(probs.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!((report.final_loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_pseudo_and_zero_lambda_match_initial() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]];
        let labeled = [(0, 0), (1, 1)];
        let hyper = TrainHyper::default();
        let (base, _) = train_initial(x.view(), &labeled, 2, &hyper).unwrap();
        let (empty, _) = train_selftrain(x.view(), &labeled, &[], 1.0, 0.6, 2, &hyper).unwrap();
        assert_eq!(base, empty);
        let (zero, _) =
            train_selftrain(x.view(), &labeled, &[(2, 0), (3, 1)], 0.0, 0.6, 2, &hyper).unwrap();
        assert_eq!(base.weights, zero.weights);
        assert_eq!(base.bias, zero.bias);
    }

    #[test]
    fn below_threshold_pseudo_is_filtered() {
        // A pseudo-labeled sample at the origin only sees the bias; with a
        // symmetric labeled set the model stays near 0.5 there, below gamma.
        let x = array![[2.0], [-2.0], [0.0]];
        let labeled = [(0, 0), (1, 1)];
        let (_, report) = train_selftrain(
            x.view(),
            &labeled,
            &[(2, 0)],
            1.0,
            0.6,
            2,
            &TrainHyper::default(),
        )
        .unwrap();
        assert_eq!(report.pseudo_filtered_count, 1);
        assert_eq!(report.pseudo_used_count, 0);

        // Constructed case: confidence 0.55 in the pseudo-class with gamma 0.6.
        let mut params = ModelParams::zeros(2, 1);
        params.bias = array![(0.55f64 / 0.45).ln(), 0.0];
        let obj = Objective {
            x: x.view(),
            labeled: &labeled,
            pseudo: &[(2, 0)],
            lambda: 1.0,
            l2: 0.0,
        };
        let p = predict_proba(&params, x.slice(ndarray::s![2..3, ..])).unwrap();
        assert!((p[[0, 0]] - 0.55).abs() < 1e-12);
        let omega = obj.omega(&params, 0.6);
        assert_eq!(omega, vec![false]);
        let with_mask = obj.loss(&params, &omega);
        let labeled_only = Objective { pseudo: &[], ..obj }.loss(&params, &[]);
        assert_eq!(with_mask, labeled_only);
    }

    #[test]
    fn errors() {
        let x = array![[1.0]];
        assert!(matches!(
            train_initial(x.view(), &[], 2, &TrainHyper::default()),
            Err(ActuneError::EmptyLabeledSet)
        ));
        assert!(train_selftrain(
            x.view(),
            &[(0, 0)],
            &[],
            1.0,
            1.0,
            2,
            &TrainHyper::default()
        )
        .is_err());
        assert!(train_selftrain(
            x.view(),
            &[(0, 0)],
            &[],
            -1.0,
            0.5,
            2,
            &TrainHyper::default()
        )
        .is_err());
        assert!(train_initial(x.view(), &[(0, 3)], 2, &TrainHyper::default()).is_err());
        let huge = TrainHyper {
            lr: 1e300,
            epochs: 5,
            l2: 0.0,
        };
        let big_x = array![[1e200], [-1e200]];
        assert!(matches!(
            train_initial(big_x.view(), &[(0, 0), (1, 1)], 2, &huge),
            Err(ActuneError::Diverged(_))
        ));
    }

    #[test]
    fn loss_non_increasing_with_small_lr() {
        let x = array![
            [1.0, 0.2],
            [0.1, 1.0],
            [-0.8, 0.3],
            [0.4, -1.2],
            [0.9, 0.9],
            [-0.3, -0.4]
        ];
        let labeled = [(0, 0), (1, 1), (2, 2)];
        let pseudo = [(3, 0), (4, 1), (5, 2)];
        let obj = Objective {
            x: x.view(),
            labeled: &labeled,
            pseudo: &pseudo,
            lambda: 1.0,
            l2: 1e-4,
        };
        let omega = vec![true, false, true];
        let mut params = ModelParams::zeros(3, 2);
        let mut prev = obj.loss(&params, &omega);
        for _ in 0..200 {
            let (_, gw, gb) = obj.loss_and_grad(&params, &omega);
            params.weights.scaled_add(-1e-3, &gw);
            params.bias.scaled_add(-1e-3, &gb);
            let cur = obj.loss(&params, &omega);
            assert!(cur <= prev + 1e-15);
            prev = cur;
        }
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(
            w in prop::collection::vec(-50.0f64..50.0, 6),
            b in prop::collection::vec(-50.0f64..50.0, 3),
            v in prop::collection::vec(-100.0f64..100.0, 2),
        ) {
            let params = ModelParams {
                weights: Array2::from_shape_vec((3, 2), w).unwrap(),
                bias: Array1::from(b),
                trained_round: 0,
            };
            let x = Array2::from_shape_vec((1, 2), v).unwrap();
            let p = predict_proba(&params, x.view()).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
