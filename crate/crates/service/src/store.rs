//! The single writer behind the HTTP API.
//!
//! A `Store` owns the engine, the label journal and the snapshot file. It
//! lives on a dedicated thread; handlers reach it through [`Handle::call`],
//! which queues a closure and awaits its result, so every read and write is
//! serialized.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use actune_core::engine::{RoundRecord, Strategy};
use actune_core::error::ActuneError;
use actune_core::snapshot::{read_snapshot, write_snapshot};
use actune_core::{load_dataset, AnnotateOutcome, Config, Engine, SoftmaxBackend};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

use crate::journal::{replay, Journal, JournalEntry};
use crate::{ApiError, ServiceError, SCHEMA_VERSION};

pub const SNAPSHOT_FILE: &str = "state.snap";
pub const JOURNAL_FILE: &str = "labels.journal";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundState {
    AwaitingLabels,
    ReadyToAdvance,
    Finished,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundStatus {
    pub schema_version: u32,
    /// Completed rounds.
    pub t: usize,
    pub total_rounds: usize,
    pub state: RoundState,
    /// Round the pending batch belongs to.
    pub pending_round: Option<usize>,
    pub batch_size: usize,
    pub remaining: usize,
    pub labeled_in_batch: usize,
    pub labeled_total: usize,
    pub unlabeled_total: usize,
    pub snapshot_ok: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub sample_index: usize,
    pub display_payload: Option<String>,
    pub round: usize,
    pub uncertainty: f64,
    pub region: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskList {
    pub schema_version: u32,
    pub round: Option<usize>,
    pub total_pending: usize,
    pub tasks: Vec<AnnotationTask>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub index: usize,
    pub class: usize,
    #[serde(default)]
    pub annotator_id: Option<String>,
    /// Round the annotator saw; a stale value is rejected.
    #[serde(default)]
    pub round: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStatus {
    Accepted,
    Duplicate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelAck {
    pub schema_version: u32,
    pub index: usize,
    pub class: usize,
    pub status: LabelStatus,
    pub remaining: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdvanceAck {
    pub schema_version: u32,
    pub t: usize,
    pub record: RoundRecord,
    pub state: RoundState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub records: Vec<RoundRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassName {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Classes {
    pub schema_version: u32,
    pub classes: Vec<ClassName>,
}

pub struct Store {
    engine: Engine,
    journal: Journal,
    snapshot_path: PathBuf,
    snapshot_every: usize,
    labels_since_snapshot: usize,
    /// The snapshot lags behind an in-memory round advance. Labels for the
    /// new round would not replay onto it, so they are refused until a
    /// snapshot succeeds.
    stale_round: bool,
    snapshot_failed: bool,
    class_names: Vec<String>,
    payloads: BTreeMap<usize, String>,
}

impl Store {
    /// Resumes from `dir` if it holds a snapshot, otherwise starts a new
    /// experiment from `config`. Either way the first pending batch is
    /// selected and a snapshot is written before serving.
    pub fn open(config: &Config, dir: &Path) -> Result<Store, ServiceError> {
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::Io(dir.to_path_buf(), e))?;
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let journal_path = dir.join(JOURNAL_FILE);
        let backend = SoftmaxBackend::new(config.classifier);

        let (mut engine, payloads) = if snapshot_path.exists() {
            let snap = read_snapshot(&snapshot_path)?;
            let mut engine = Engine::restore(snap, backend)?;
            let entries =
                replay(&journal_path).map_err(|e| ServiceError::Io(journal_path.clone(), e))?;
            let mut applied = 0;
            for e in entries {
                let Some(round) = engine.pending().map(|p| p.round) else {
                    break;
                };
                if e.round != round {
                    continue;
                }
                match engine.annotate(e.index, e.class, e.annotator_id) {
                    Ok(AnnotateOutcome::Accepted) => applied += 1,
                    Ok(AnnotateOutcome::Duplicate) => {}
                    Err(err) => log::warn!("skipping journal entry for {}: {err}", e.index),
                }
            }
            log::info!(
                "restored round {} from {} ({applied} journaled labels replayed)",
                engine.completed_rounds(),
                snapshot_path.display()
            );
            let payloads = match &config.data.payloads {
                Some(p) => actune_core::dataset::read_payloads(p)?,
                None => BTreeMap::new(),
            };
            (engine, payloads)
        } else {
            let dataset = load_dataset(config)?;
            let payloads = dataset.payloads.clone();
            let engine =
                Engine::from_config(config, Strategy::actune(&config.experiment), dataset)?;
            log::info!(
                "initial model fitted on {} labels",
                engine.pool().labeled_count()
            );
            (engine, payloads)
        };
        ensure_planned(&mut engine)?;
        let journal =
            Journal::open(&journal_path).map_err(|e| ServiceError::Io(journal_path, e))?;
        let class_names = config.data.class_names(engine.pool().class_count());
        let mut store = Store {
            engine,
            journal,
            snapshot_path,
            snapshot_every: config.service.snapshot_every.max(1),
            labels_since_snapshot: 0,
            stale_round: false,
            snapshot_failed: false,
            class_names,
            payloads,
        };
        store.persist()?;
        Ok(store)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Writes a snapshot and then empties the journal it supersedes.
    fn persist(&mut self) -> Result<(), ServiceError> {
        let result = write_snapshot(&self.snapshot_path, &self.engine.snapshot())
            .map_err(ServiceError::from)
            .and_then(|_| {
                self.journal
                    .truncate()
                    .map_err(|e| ServiceError::Io(self.journal.path().to_path_buf(), e))
            });
        match &result {
            Ok(()) => {
                self.labels_since_snapshot = 0;
                self.stale_round = false;
                self.snapshot_failed = false;
            }
            Err(e) => {
                log::error!("snapshot failed: {e}");
                self.snapshot_failed = true;
            }
        }
        result
    }

    fn state(&self) -> RoundState {
        match self.engine.pending() {
            Some(p) if p.is_complete() => RoundState::ReadyToAdvance,
            Some(_) => RoundState::AwaitingLabels,
            None => RoundState::Finished,
        }
    }

    pub fn round_status(&self) -> RoundStatus {
        let pending = self.engine.pending();
        RoundStatus {
            schema_version: SCHEMA_VERSION,
            t: self.engine.completed_rounds(),
            total_rounds: self.engine.config().rounds,
            state: self.state(),
            pending_round: pending.map(|p| p.round),
            batch_size: pending.map_or(0, |p| p.query_batch.len()),
            remaining: pending.map_or(0, |p| p.pending_count()),
            labeled_in_batch: pending.map_or(0, |p| p.annotations.len()),
            labeled_total: self.engine.pool().labeled_count(),
            unlabeled_total: self.engine.pool().unlabeled_count(),
            snapshot_ok: !self.snapshot_failed,
        }
    }

    pub fn tasks(&self, limit: Option<usize>) -> TaskList {
        let Some(plan) = self.engine.pending() else {
            return TaskList {
                schema_version: SCHEMA_VERSION,
                round: None,
                total_pending: 0,
                tasks: Vec::new(),
            };
        };
        let tasks = plan
            .query_batch
            .iter()
            .enumerate()
            .filter(|(_, i)| !plan.annotations.contains_key(i))
            .take(limit.unwrap_or(usize::MAX))
            .map(|(k, &i)| AnnotationTask {
                sample_index: i,
                display_payload: self.payloads.get(&i).cloned(),
                round: plan.round,
                uncertainty: plan.query_uncertainty[k],
                region: plan.query_region[k],
            })
            .collect();
        TaskList {
            schema_version: SCHEMA_VERSION,
            round: Some(plan.round),
            total_pending: plan.pending_count(),
            tasks,
        }
    }

    pub fn submit(&mut self, req: LabelRequest) -> Result<LabelAck, ApiError> {
        let Some(plan) = self.engine.pending() else {
            return Err(ApiError::gone("finished", "all rounds are complete"));
        };
        let round = plan.round;
        if let Some(r) = req.round {
            if r != round {
                return Err(ApiError::gone(
                    "round_advanced",
                    format!("label is for round {r}, the pending round is {round}"),
                ));
            }
        }
        if self.stale_round && self.persist().is_err() {
            return Err(ApiError::unavailable(
                "snapshot writes are failing; labels are refused until they succeed",
            ));
        }
        let outcome = match self.engine.check_annotation(req.index, req.class) {
            Ok(o) => o,
            Err(ActuneError::NotInBatch(i)) => {
                let labeled =
                    i < self.engine.pool().n() && self.engine.pool().status(i).is_labeled();
                return Err(if labeled {
                    ApiError::gone(
                        "round_advanced",
                        format!("sample {i} was labeled in an earlier round"),
                    )
                } else {
                    ApiError::not_found(format!("sample {i} is not in the pending batch"))
                });
            }
            Err(ActuneError::LabelOutOfRange {
                label, class_count, ..
            }) => {
                return Err(ApiError::unprocessable(format!(
                    "class {label} is out of range for {class_count} classes"
                )))
            }
            Err(ActuneError::LabelConflict {
                index, existing, ..
            }) => {
                return Err(ApiError::conflict(
                    "label_conflict",
                    format!("sample {index} already has class {existing}"),
                )
                .with("committed_class", existing.into()))
            }
            Err(e) => return Err(ApiError::internal(e.to_string())),
        };
        if outcome == AnnotateOutcome::Accepted {
            let entry = JournalEntry {
                round,
                index: req.index,
                class: req.class,
                annotator_id: req.annotator_id.clone(),
            };
            self.journal
                .append(&entry)
                .map_err(|e| ApiError::internal(format!("journal write failed: {e}")))?;
            self.engine
                .annotate(req.index, req.class, req.annotator_id)
                .map_err(|e| ApiError::internal(e.to_string()))?;
            self.labels_since_snapshot += 1;
            if self.labels_since_snapshot >= self.snapshot_every {
                // The journal already holds the label, so a failure here only
                // blocks the next advance.
                let _ = self.persist();
            }
        }
        Ok(LabelAck {
            schema_version: SCHEMA_VERSION,
            index: req.index,
            class: req.class,
            status: match outcome {
                AnnotateOutcome::Accepted => LabelStatus::Accepted,
                AnnotateOutcome::Duplicate => LabelStatus::Duplicate,
            },
            remaining: self.engine.pending().map_or(0, |p| p.pending_count()),
        })
    }

    pub fn advance(&mut self) -> Result<AdvanceAck, ApiError> {
        let Some(plan) = self.engine.pending() else {
            return Err(ApiError::conflict("finished", "all rounds are complete"));
        };
        if !plan.is_complete() {
            let remaining = plan.pending_count();
            return Err(ApiError::conflict(
                "labels_remaining",
                format!("{remaining} tasks are still unlabeled"),
            )
            .with("remaining", remaining.into()));
        }
        if (self.snapshot_failed || self.stale_round) && self.persist().is_err() {
            return Err(ApiError::unavailable(
                "snapshot writes are failing; the round cannot advance until they succeed",
            ));
        }
        let record = self
            .engine
            .commit_round()
            .map_err(|e| ApiError::internal(e.to_string()))?
            .clone();
        ensure_planned(&mut self.engine).map_err(|e| ApiError::internal(e.to_string()))?;
        self.stale_round = true;
        let _ = self.persist();
        log::info!(
            "round {} committed: accuracy {:?}, {} labeled",
            record.t,
            record.test_accuracy,
            record.labeled_total
        );
        Ok(AdvanceAck {
            schema_version: SCHEMA_VERSION,
            t: self.engine.completed_rounds(),
            record,
            state: self.state(),
        })
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            schema_version: SCHEMA_VERSION,
            records: self.engine.records().to_vec(),
        }
    }

    pub fn classes(&self) -> Classes {
        Classes {
            schema_version: SCHEMA_VERSION,
            classes: self
                .class_names
                .iter()
                .enumerate()
                .map(|(id, name)| ClassName {
                    id,
                    name: name.clone(),
                })
                .collect(),
        }
    }
}

/// Selects the next batch unless one is pending or the experiment is over.
/// Rounds with nothing left to query are recorded and skipped.
fn ensure_planned(engine: &mut Engine) -> Result<(), ActuneError> {
    while engine.pending().is_none() && !engine.is_finished() {
        match engine.plan_round() {
            Ok(_) => break,
            Err(ActuneError::Exhausted) => {
                engine.skip_round()?;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

type Job = Box<dyn FnOnce(&mut Store) + Send>;

/// Cheap, cloneable access to the store thread.
#[derive(Clone)]
pub struct Handle {
    tx: mpsc::UnboundedSender<Job>,
}

impl Handle {
    /// Moves `store` onto its own thread.
    pub fn spawn(mut store: Store) -> Handle {
        let (tx, mut rx) = mpsc::unbounded_channel::<Job>();
        std::thread::Builder::new()
            .name("actune-store".into())
            .spawn(move || {
                while let Some(job) = rx.blocking_recv() {
                    job(&mut store);
                }
            })
            .expect("spawning the store thread");
        Handle { tx }
    }

    pub async fn call<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&mut Store) -> T + Send + 'static,
    {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Box::new(move |store| {
                let _ = reply.send(f(store));
            }))
            .map_err(|_| ApiError::internal("store thread has stopped"))?;
        rx.await
            .map_err(|_| ApiError::internal("store thread dropped the request"))
    }
}
