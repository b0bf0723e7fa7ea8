//! The active self-training loop.
//!
//! A round is split into `plan_round` (score, cluster, pick the query batch
//! and the self-training set) and `commit_round` (apply labels, refit, update
//! the memory bank). Between the two the plan collects annotations, which is
//! how the service parks a round while humans label. Simulation answers from
//! the oracle and runs both halves back to back.
//!
//! Randomness is drawn from per-round ChaCha streams derived from the seed,
//! so a restored engine continues exactly where the original would have.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ModelBackend, SoftmaxBackend, TrainReport};
use crate::clustering::{weighted_kmeans, RegionPartition};
use crate::config::{ClusteringConfig, Config, ExperimentConfig};
use crate::dataset::{Dataset, TestSet};
use crate::error::{ActuneError, Result};
use crate::membank::{bottom_k, momentum_coefficient, BankMode, MemoryBank, SelfTrainPick};
use crate::pool::{seed_initial_labels, Pool};
use crate::regions::{
    bottom_regions, score_regions, select_query_batch, select_selftrain_candidates, top_regions,
    RegionScore,
};
use crate::uncertainty::{argmax, cal_score_for, entropy, score_samples, UncertaintyMeasure};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

const STREAM_INIT: u64 = 1;
const STREAM_KMEANS: u64 = 2;
const STREAM_RANDOM: u64 = 3;

/// The RNG for one purpose within one round.
pub fn round_rng(seed: u64, round: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((round as u64) << 8) | purpose);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Actune {
        measure: UncertaintyMeasure,
        bank_mode: BankMode,
    },
    Random,
    TopUncertainty {
        measure: UncertaintyMeasure,
    },
}

impl Strategy {
    pub fn actune(config: &ExperimentConfig) -> Self {
        Strategy::Actune {
            measure: config.uncertainty_measure,
            bank_mode: config.effective_bank_mode(),
        }
    }

    /// Parses `actune`, `random`, `top-entropy` or `top-cal`; AcTune takes its
    /// measure and bank mode from the config.
    pub fn from_name(name: &str, config: &ExperimentConfig) -> Result<Self> {
        match name {
            "actune" => Ok(Strategy::actune(config)),
            other => other.parse(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Actune { .. } => f.write_str("actune"),
            Strategy::Random => f.write_str("random"),
            Strategy::TopUncertainty { measure } => write!(f, "top-{measure}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = ActuneError;

    /// `actune` here uses entropy with a prediction bank.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "actune" => Ok(Strategy::Actune {
                measure: UncertaintyMeasure::Entropy,
                bank_mode: BankMode::Prediction,
            }),
            "random" => Ok(Strategy::Random),
            "top-entropy" => Ok(Strategy::TopUncertainty {
                measure: UncertaintyMeasure::Entropy,
            }),
            "top-cal" => Ok(Strategy::TopUncertainty {
                measure: UncertaintyMeasure::Cal,
            }),
            other => Err(ActuneError::InvalidArgument(format!(
                "unknown strategy `{other}`"
            ))),
        }
    }
}

/// Knobs for one region-aware selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionParams {
    pub clusters: usize,
    pub regions: usize,
    pub beta: f64,
    pub budget: usize,
    pub class_count: usize,
    pub max_iter: usize,
    pub tol: f64,
}

/// Output of [`region_aware_selection`]; all indices are rows of the
/// clustered matrix.
#[derive(Clone, Debug)]
pub struct RegionSelection {
    pub partition: RegionPartition,
    pub weights: Vec<f64>,
    pub region_scores: Vec<RegionScore>,
    pub empty_regions: usize,
    pub query_rows: Vec<usize>,
    pub query_regions: Vec<usize>,
    pub st_regions: Vec<usize>,
    /// Members of the lowest-scoring regions, minus the query rows.
    pub selftrain_rows: Vec<usize>,
}

/// Clusters `vectors` with uncertainty weights, scores the regions and picks
/// the query batch and the self-training candidates.
///
/// `K` and `M` are clamped to what the data supports. If every score is zero
/// the clustering falls back to uniform weights.
pub fn region_aware_selection(
    vectors: ArrayView2<f64>,
    scores: &[f64],
    pseudo_labels: &[usize],
    params: &RegionParams,
    rng: &mut ChaCha8Rng,
) -> Result<RegionSelection> {
    let n = vectors.nrows();
    if n == 0 {
        return Err(ActuneError::Exhausted);
    }
    let weights = if scores.iter().all(|&s| s == 0.0) {
        log::debug!("all uncertainties are zero; clustering with uniform weights");
        vec![1.0; n]
    } else {
        scores.to_vec()
    };
    let k = params.clusters.min(n);
    let partition = weighted_kmeans(vectors, &weights, k, params.max_iter, params.tol, rng)?;
    let (region_scores, empty_regions) = score_regions(
        &partition,
        scores,
        pseudo_labels,
        params.beta,
        params.class_count,
    )?;
    let m = params.regions.min(region_scores.len()).max(1);
    let query_rows = if params.budget == 0 {
        Vec::new()
    } else {
        select_query_batch(&region_scores, &partition, scores, m, params.budget)?
    };
    let queried: BTreeSet<usize> = query_rows.iter().copied().collect();
    let selftrain_rows = select_selftrain_candidates(&region_scores, &partition, m)?
        .into_iter()
        .filter(|r| !queried.contains(r))
        .collect();
    Ok(RegionSelection {
        query_regions: top_regions(&region_scores, m),
        st_regions: bottom_regions(&region_scores, m),
        partition,
        weights,
        region_scores,
        empty_regions,
        query_rows,
        selftrain_rows,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: usize,
    pub annotator: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotateOutcome {
    Accepted,
    /// Same class as an earlier submission; nothing changed.
    Duplicate,
}

/// Wall time per phase, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub score: f64,
    pub cluster: f64,
    pub select: f64,
    pub fit: f64,
    pub predict: f64,
    pub bank: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    pub query_batch: Vec<usize>,
    /// Uncertainty of each query, aligned with `query_batch`.
    pub query_uncertainty: Vec<f64>,
    /// Region of each query; `None` for strategies without regions.
    pub query_region: Vec<Option<usize>>,
    pub selftrain_set: Vec<SelfTrainPick>,
    pub selftrain_skipped: bool,
    pub query_regions: Vec<usize>,
    pub st_regions: Vec<usize>,
    pub region_scores: Vec<RegionScore>,
    pub empty_regions: usize,
    /// The samples that were clustered, with their cluster and weight.
    pub clustered: Vec<usize>,
    pub assignment: Vec<usize>,
    pub weights: Vec<f64>,
    pub annotations: BTreeMap<usize, Annotation>,
    #[serde(skip)]
    pub timings: PhaseTimings,
}

impl RoundPlan {
    /// Queried samples still waiting for a label, in batch order.
    pub fn pending(&self) -> Vec<usize> {
        self.query_batch
            .iter()
            .copied()
            .filter(|i| !self.annotations.contains_key(i))
            .collect()
    }

    pub fn pending_count(&self) -> usize {
        self.query_batch.len() - self.annotations.len()
    }

    pub fn is_complete(&self) -> bool {
        self.pending_count() == 0
    }

    pub fn contains(&self, index: usize) -> bool {
        self.query_batch.contains(&index)
    }

    /// Number of queries per cluster id.
    pub fn queried_per_region(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for r in self.query_region.iter().flatten() {
            *out.entry(*r).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub schema_version: u32,
    pub t: usize,
    pub strategy: String,
    pub test_accuracy: Option<f64>,
    pub labeled_total: usize,
    pub query_indices: Vec<usize>,
    pub selftrain_size: usize,
    /// Share of self-training pseudo-labels that match the oracle.
    pub pseudo_label_accuracy: Option<f64>,
    pub momentum: Option<f64>,
    pub region_count: usize,
    pub empty_regions: usize,
    pub query_regions: Vec<usize>,
    pub st_regions: Vec<usize>,
    pub train: TrainReport,
    #[serde(skip)]
    pub timings: PhaseTimings,
}

/// Everything that changes while an experiment runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineState<M> {
    /// Completed rounds.
    pub round: usize,
    pub pool: Pool,
    pub bank: MemoryBank,
    pub model: M,
    pub pending: Option<RoundPlan>,
    pub last_plan: Option<RoundPlan>,
    pub records: Vec<RoundRecord>,
}

impl PartialEq for RoundRecord {
    /// Ignores timings.
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

impl PartialEq for RoundPlan {
    /// Ignores timings.
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

/// Answers label queries.
pub trait LabelSource {
    fn label(&mut self, pool: &Pool, index: usize) -> Result<Option<usize>>;
}

/// Answers from the pool's ground truth.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleLabels;

impl LabelSource for OracleLabels {
    fn label(&mut self, pool: &Pool, index: usize) -> Result<Option<usize>> {
        match pool.oracle_labels() {
            Some(o) => Ok(Some(o[index])),
            None => Err(ActuneError::NoLabelSource(
                "the pool has no oracle labels".into(),
            )),
        }
    }
}

#[derive(Debug)]
pub struct Engine<B: ModelBackend = SoftmaxBackend> {
    config: ExperimentConfig,
    clustering: ClusteringConfig,
    strategy: Strategy,
    backend: B,
    test: Option<TestSet>,
    state: EngineState<B::Model>,
    /// Current model's predictions over the whole pool.
    preds: Array2<f64>,
}

impl Engine<SoftmaxBackend> {
    pub fn from_config(config: &Config, strategy: Strategy, dataset: Dataset) -> Result<Self> {
        Engine::new(
            config.experiment.clone(),
            config.clustering.clone(),
            strategy,
            SoftmaxBackend::new(config.classifier),
            dataset.pool,
            dataset.test,
        )
    }
}

impl<B: ModelBackend> Engine<B> {
    /// Seeds the initial labels if the pool has none, fits the round-0 model
    /// and initializes the memory bank.
    pub fn new(
        config: ExperimentConfig,
        clustering: ClusteringConfig,
        strategy: Strategy,
        backend: B,
        mut pool: Pool,
        test: Option<TestSet>,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(t) = &test {
            if t.embeddings.ncols() != pool.dim() {
                return Err(ActuneError::DimensionMismatch {
                    expected: pool.dim(),
                    actual: t.embeddings.ncols(),
                });
            }
        }
        if pool.labeled_count() == 0 && config.init_labeled > 0 {
            let mut rng = round_rng(config.seed, 0, STREAM_INIT);
            seed_initial_labels(&mut pool, config.init_labeled, &mut rng)?;
        }
        let class_count = pool.class_count();
        let x = pool.embeddings();

        let started = Instant::now();
        let labeled = pool.labeled_pairs();
        let (model, report) = backend.fit(x, &labeled, &[], 0.0, config.gamma, class_count, 0)?;
        let fit_time = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let preds = backend.predict_proba(&model, x)?;
        let predict_time = started.elapsed().as_secs_f64();

        let bank_mode = match strategy {
            Strategy::Actune { bank_mode, .. } => bank_mode,
            _ => config.effective_bank_mode(),
        };
        let bank = MemoryBank::new(bank_mode, pool.n(), class_count);
        let mut engine = Engine {
            config,
            clustering,
            strategy,
            backend,
            test,
            state: EngineState {
                round: 0,
                pool,
                bank,
                model,
                pending: None,
                last_plan: None,
                records: Vec::new(),
            },
            preds,
        };
        let started = Instant::now();
        engine.update_bank(0, None)?;
        let bank_time = started.elapsed().as_secs_f64();

        let record = RoundRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            t: 0,
            strategy: engine.strategy.to_string(),
            test_accuracy: engine.test_accuracy()?,
            labeled_total: engine.state.pool.labeled_count(),
            query_indices: Vec::new(),
            selftrain_size: 0,
            pseudo_label_accuracy: None,
            momentum: None,
            region_count: 0,
            empty_regions: 0,
            query_regions: Vec::new(),
            st_regions: Vec::new(),
            train: report,
            timings: PhaseTimings {
                fit: fit_time,
                predict: predict_time,
                bank: bank_time,
                ..PhaseTimings::default()
            },
        };
        engine.state.records.push(record);
        Ok(engine)
    }

    /// Rebuilds an engine from saved state; predictions are recomputed from
    /// the saved model.
    pub fn from_parts(
        config: ExperimentConfig,
        clustering: ClusteringConfig,
        strategy: Strategy,
        backend: B,
        test: Option<TestSet>,
        state: EngineState<B::Model>,
    ) -> Result<Self> {
        config.validate()?;
        let preds = backend.predict_proba(&state.model, state.pool.embeddings())?;
        Ok(Engine {
            config,
            clustering,
            strategy,
            backend,
            test,
            state,
            preds,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn clustering(&self) -> &ClusteringConfig {
        &self.clustering
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn test_set(&self) -> Option<&TestSet> {
        self.test.as_ref()
    }

    pub fn state(&self) -> &EngineState<B::Model> {
        &self.state
    }

    pub fn pool(&self) -> &Pool {
        &self.state.pool
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.state.bank
    }

    pub fn model(&self) -> &B::Model {
        &self.state.model
    }

    pub fn predictions(&self) -> ArrayView2<'_, f64> {
        self.preds.view()
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.state.records
    }

    pub fn completed_rounds(&self) -> usize {
        self.state.round
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.config.rounds
    }

    pub fn pending(&self) -> Option<&RoundPlan> {
        self.state.pending.as_ref()
    }

    pub fn last_plan(&self) -> Option<&RoundPlan> {
        self.state.last_plan.as_ref()
    }

    fn measure(&self) -> UncertaintyMeasure {
        match self.strategy {
            Strategy::Actune { measure, .. } | Strategy::TopUncertainty { measure } => measure,
            Strategy::Random => self.config.uncertainty_measure,
        }
    }

    fn pred_row(&self, i: usize) -> &[f64] {
        let c = self.preds.ncols();
        &self.preds.as_slice().expect("row-major predictions")[i * c..(i + 1) * c]
    }

    fn scores_for(&self, indices: &[usize]) -> Result<Vec<f64>> {
        let labeled = self.state.pool.labeled_indices();
        score_samples(
            self.measure(),
            self.state.pool.embeddings(),
            self.preds.view(),
            indices,
            &labeled,
            self.config.k_nn,
        )
    }

    /// Initializes (round 0, `m = None`) or updates the bank for every
    /// sample in `X_u`.
    fn update_bank(&mut self, round: usize, m: Option<f64>) -> Result<()> {
        let unlabeled = self.state.pool.unlabeled_indices();
        match self.state.bank.mode() {
            BankMode::Prediction => {
                let c = self.preds.ncols();
                let flat = self.preds.as_slice().expect("row-major predictions");
                for &i in &unlabeled {
                    let row = &flat[i * c..(i + 1) * c];
                    match m {
                        None => self.state.bank.init_prediction(i, row)?,
                        Some(m) => self.state.bank.observe_prediction(i, row, m)?,
                    }
                }
            }
            BankMode::Value => {
                let scores = self.scores_for(&unlabeled)?;
                for (&i, &a) in unlabeled.iter().zip(&scores) {
                    match m {
                        None => self.state.bank.init_value(i, a)?,
                        Some(m) => self.state.bank.observe_value(i, a, m)?,
                    }
                }
            }
        }
        self.state.bank.set_round(round);
        Ok(())
    }

    fn test_accuracy(&self) -> Result<Option<f64>> {
        let Some(test) = &self.test else {
            return Ok(None);
        };
        if test.is_empty() {
            return Ok(None);
        }
        let p = self
            .backend
            .predict_proba(&self.state.model, test.embeddings.view())?;
        let correct = p
            .outer_iter()
            .zip(&test.labels)
            .filter(|(row, &y)| argmax(row.as_slice().expect("row-major")).0 == y)
            .count();
        Ok(Some(correct as f64 / test.len() as f64))
    }

    /// Chooses the next round's query batch and self-training set. Returns
    /// the already pending plan if there is one.
    pub fn plan_round(&mut self) -> Result<&RoundPlan> {
        if self.state.pending.is_none() {
            let plan = self.make_plan()?;
            self.state.pending = Some(plan);
        }
        Ok(self.state.pending.as_ref().expect("planned above"))
    }

    fn make_plan(&mut self) -> Result<RoundPlan> {
        if self.is_finished() {
            return Err(ActuneError::Finished(self.config.rounds));
        }
        let t = self.state.round + 1;
        self.state.pool.clear_pseudo();
        let unlabeled = self.state.pool.unlabeled_indices();
        if unlabeled.is_empty() {
            return Err(ActuneError::Exhausted);
        }
        let class_count = self.state.pool.class_count();
        let budget = self.config.batch_size().min(unlabeled.len());
        let k_st = t * self.config.k_st;
        let mut timings = PhaseTimings::default();

        let started = Instant::now();
        let scores = self.scores_for(&unlabeled)?;
        timings.score = started.elapsed().as_secs_f64();

        let mut plan = RoundPlan {
            round: t,
            query_batch: Vec::new(),
            query_uncertainty: Vec::new(),
            query_region: Vec::new(),
            selftrain_set: Vec::new(),
            selftrain_skipped: false,
            query_regions: Vec::new(),
            st_regions: Vec::new(),
            region_scores: Vec::new(),
            empty_regions: 0,
            clustered: Vec::new(),
            assignment: Vec::new(),
            weights: Vec::new(),
            annotations: BTreeMap::new(),
            timings,
        };

        let query_rows: Vec<usize> = match self.strategy {
            Strategy::Actune { .. } => {
                let started = Instant::now();
                let vectors = self.state.pool.embeddings().select(Axis(0), &unlabeled);
                let pseudo: Vec<usize> = unlabeled
                    .iter()
                    .map(|&i| argmax(self.pred_row(i)).0)
                    .collect();
                let params = RegionParams {
                    clusters: self.config.clusters,
                    regions: self.config.regions,
                    beta: self.config.beta,
                    budget,
                    class_count,
                    max_iter: self.clustering.max_iter,
                    tol: self.clustering.tol,
                };
                let mut rng = round_rng(self.config.seed, t, STREAM_KMEANS);
                let sel =
                    region_aware_selection(vectors.view(), &scores, &pseudo, &params, &mut rng)?;
                plan.timings.cluster = started.elapsed().as_secs_f64();

                let started = Instant::now();
                let candidates: Vec<usize> =
                    sel.selftrain_rows.iter().map(|&r| unlabeled[r]).collect();
                plan.selftrain_set =
                    self.actune_selftrain(&candidates, &unlabeled, &scores, k_st)?;
                plan.query_region = sel
                    .query_rows
                    .iter()
                    .map(|&r| Some(sel.partition.assignment[r]))
                    .collect();
                plan.query_regions = sel.query_regions;
                plan.st_regions = sel.st_regions;
                plan.region_scores = sel.region_scores;
                plan.empty_regions = sel.empty_regions;
                plan.clustered = unlabeled.clone();
                plan.assignment = sel.partition.assignment;
                plan.weights = sel.weights;
                plan.timings.select = started.elapsed().as_secs_f64();
                sel.query_rows
            }
            Strategy::Random => {
                let started = Instant::now();
                let mut rng = round_rng(self.config.seed, t, STREAM_RANDOM);
                let mut rows: Vec<usize> =
                    rand::seq::index::sample(&mut rng, unlabeled.len(), budget).into_vec();
                rows.sort_unstable();
                plan.timings.select = started.elapsed().as_secs_f64();
                rows
            }
            Strategy::TopUncertainty { .. } => {
                let started = Instant::now();
                let mut rows: Vec<usize> = (0..unlabeled.len()).collect();
                rows.sort_by(|&a, &b| {
                    scores[b]
                        .partial_cmp(&scores[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                rows.truncate(budget);
                plan.timings.select = started.elapsed().as_secs_f64();
                rows
            }
        };
        if !matches!(self.strategy, Strategy::Actune { .. }) {
            plan.query_region = vec![None; query_rows.len()];
            if self.config.baseline_self_training {
                let queried: BTreeSet<usize> = query_rows.iter().copied().collect();
                let scored = (0..unlabeled.len())
                    .filter(|r| !queried.contains(r))
                    .map(|r| (scores[r], self.current_pick(unlabeled[r])))
                    .collect();
                plan.selftrain_set = bottom_k(scored, k_st);
            }
        }
        plan.query_batch = query_rows.iter().map(|&r| unlabeled[r]).collect();
        plan.query_uncertainty = query_rows.iter().map(|&r| scores[r]).collect();
        plan.selftrain_skipped = plan.selftrain_set.is_empty();
        for pick in &plan.selftrain_set {
            self.state
                .pool
                .set_pseudo(pick.index, pick.class, pick.confidence)?;
        }
        if plan.selftrain_skipped && matches!(self.strategy, Strategy::Actune { .. }) {
            log::warn!("round {t}: no self-training candidates; self-training skipped");
        }
        Ok(plan)
    }

    fn current_pick(&self, i: usize) -> SelfTrainPick {
        let (class, confidence) = argmax(self.pred_row(i));
        SelfTrainPick {
            index: i,
            class,
            confidence,
        }
    }

    fn actune_selftrain(
        &self,
        candidates: &[usize],
        unlabeled: &[usize],
        scores: &[f64],
        k: usize,
    ) -> Result<Vec<SelfTrainPick>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        if !self.config.memory_bank {
            let row_of: BTreeMap<usize, usize> =
                unlabeled.iter().enumerate().map(|(r, &i)| (i, r)).collect();
            let scored = candidates
                .iter()
                .map(|&i| (scores[row_of[&i]], self.current_pick(i)))
                .collect();
            return Ok(bottom_k(scored, k));
        }
        let labeled = self.state.pool.labeled_indices();
        let k_nn = self.config.k_nn.min(labeled.len());
        let x = self.state.pool.embeddings();
        let preds = self.preds.view();
        let measure = self.measure();
        let c = self.preds.ncols();
        let flat = self.preds.as_slice().expect("row-major predictions");
        self.state.bank.select_selftrain_set(
            candidates,
            k,
            |i, g| match measure {
                UncertaintyMeasure::Entropy => entropy(g),
                UncertaintyMeasure::Cal => cal_score_for(g, i, x, preds, &labeled, k_nn),
            },
            |i| &flat[i * c..(i + 1) * c],
        )
    }

    /// What [`Engine::annotate`] would do, without changing anything.
    pub fn check_annotation(&self, index: usize, class: usize) -> Result<AnnotateOutcome> {
        let class_count = self.state.pool.class_count();
        let plan = self
            .state
            .pending
            .as_ref()
            .ok_or(ActuneError::NoPendingRound)?;
        if !plan.contains(index) {
            return Err(ActuneError::NotInBatch(index));
        }
        if class >= class_count {
            return Err(ActuneError::LabelOutOfRange {
                index,
                label: class,
                class_count,
            });
        }
        match plan.annotations.get(&index) {
            Some(a) if a.class == class => Ok(AnnotateOutcome::Duplicate),
            Some(a) => Err(ActuneError::LabelConflict {
                index,
                existing: a.class,
                submitted: class,
            }),
            None => Ok(AnnotateOutcome::Accepted),
        }
    }

    /// Records a label for a sample in the pending batch. The first label
    /// wins; repeating it is a no-op and a different class is a conflict.
    pub fn annotate(
        &mut self,
        index: usize,
        class: usize,
        annotator: Option<String>,
    ) -> Result<AnnotateOutcome> {
        let outcome = self.check_annotation(index, class)?;
        if outcome == AnnotateOutcome::Accepted {
            let plan = self.state.pending.as_mut().expect("checked");
            plan.annotations
                .insert(index, Annotation { class, annotator });
        }
        Ok(outcome)
    }

    /// Applies the pending batch's labels, refits and updates the bank.
    pub fn commit_round(&mut self) -> Result<&RoundRecord> {
        let plan = self
            .state
            .pending
            .as_ref()
            .ok_or(ActuneError::NoPendingRound)?;
        if !plan.is_complete() {
            return Err(ActuneError::AwaitingLabels {
                round: plan.round,
                missing: plan.pending_count(),
            });
        }
        let mut plan = self.state.pending.take().expect("checked");
        let t = plan.round;
        let class_count = self.state.pool.class_count();
        for (&i, a) in &plan.annotations {
            self.state.pool.set_label(i, a.class)?;
        }
        let pseudo: Vec<(usize, usize)> = plan
            .selftrain_set
            .iter()
            .map(|p| (p.index, p.class))
            .collect();

        let started = Instant::now();
        let labeled = self.state.pool.labeled_pairs();
        let (model, report) = self.backend.fit(
            self.state.pool.embeddings(),
            &labeled,
            &pseudo,
            self.config.lambda,
            self.config.gamma,
            class_count,
            t,
        )?;
        plan.timings.fit = started.elapsed().as_secs_f64();
        let started = Instant::now();
        self.preds = self
            .backend
            .predict_proba(&model, self.state.pool.embeddings())?;
        plan.timings.predict = started.elapsed().as_secs_f64();
        self.state.model = model;

        let started = Instant::now();
        let m = momentum_coefficient(t, self.config.rounds, self.config.m_low, self.config.m_high)?;
        self.update_bank(t, Some(m))?;
        plan.timings.bank = started.elapsed().as_secs_f64();

        let pseudo_label_accuracy = match self.state.pool.oracle_labels() {
            Some(oracle) if !pseudo.is_empty() => {
                let hits = pseudo.iter().filter(|&&(i, c)| oracle[i] == c).count();
                Some(hits as f64 / pseudo.len() as f64)
            }
            _ => None,
        };
        let record = RoundRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            t,
            strategy: self.strategy.to_string(),
            test_accuracy: self.test_accuracy()?,
            labeled_total: self.state.pool.labeled_count(),
            query_indices: plan.query_batch.clone(),
            selftrain_size: pseudo.len(),
            pseudo_label_accuracy,
            momentum: Some(m),
            region_count: plan.region_scores.len(),
            empty_regions: plan.empty_regions,
            query_regions: plan.query_regions.clone(),
            st_regions: plan.st_regions.clone(),
            train: report,
            timings: plan.timings,
        };
        self.state.records.push(record);
        self.state.round = t;
        self.state.last_plan = Some(plan);
        Ok(self.state.records.last().expect("just pushed"))
    }

    /// Records a round in which nothing was left to query. The model and the
    /// bank stay as they are.
    pub fn skip_round(&mut self) -> Result<&RoundRecord> {
        if self.state.pending.is_some() {
            return Err(ActuneError::InvalidArgument(
                "cannot skip a round with a pending batch".into(),
            ));
        }
        if self.is_finished() {
            return Err(ActuneError::Finished(self.config.rounds));
        }
        let t = self.state.round + 1;
        let prev = self
            .state
            .records
            .last()
            .expect("round 0 is always recorded");
        let record = RoundRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            t,
            strategy: self.strategy.to_string(),
            test_accuracy: prev.test_accuracy,
            labeled_total: self.state.pool.labeled_count(),
            query_indices: Vec::new(),
            selftrain_size: 0,
            pseudo_label_accuracy: None,
            momentum: None,
            region_count: 0,
            empty_regions: 0,
            query_regions: Vec::new(),
            st_regions: Vec::new(),
            train: prev.train.clone(),
            timings: PhaseTimings::default(),
        };
        self.state.records.push(record);
        self.state.round = t;
        Ok(self.state.records.last().expect("just pushed"))
    }

    /// Plans the next round, asks `source` for every pending label and
    /// commits. Parks the round and returns `AwaitingLabels` if the source
    /// leaves any query unanswered.
    pub fn run_round(&mut self, source: &mut dyn LabelSource) -> Result<&RoundRecord> {
        let pending = self.plan_round()?.pending();
        for i in pending {
            if let Some(class) = source.label(&self.state.pool, i)? {
                self.annotate(i, class, None)?;
            }
        }
        self.commit_round()
    }

    /// Runs the remaining rounds against the oracle.
    pub fn run_experiment(&mut self) -> Result<&[RoundRecord]> {
        self.run_experiment_with(|_, _| {})
    }

    /// Like [`Engine::run_experiment`], calling `on_round` after every round
    /// with the executed plan (absent for skipped rounds).
    pub fn run_experiment_with<F>(&mut self, mut on_round: F) -> Result<&[RoundRecord]>
    where
        F: FnMut(Option<&RoundPlan>, &RoundRecord),
    {
        while !self.is_finished() {
            match self.run_round(&mut OracleLabels) {
                Ok(_) => on_round(
                    self.state.last_plan.as_ref(),
                    self.state.records.last().expect("recorded"),
                ),
                Err(ActuneError::Exhausted) => {
                    log::info!("round {}: unlabeled pool exhausted", self.state.round + 1);
                    self.skip_round()?;
                    on_round(None, self.state.records.last().expect("recorded"));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(&self.state.records)
    }
}
