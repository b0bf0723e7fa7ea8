//! Active self-training over a fixed pool of embeddings.
//!
//! Each round scores the unlabeled pool, clusters it with uncertainty
//! weights, queries the most uncertain members of the most uncertain regions
//! and self-trains on the least uncertain members of the most confident
//! regions, ranked by a momentum memory bank. See [`engine::Engine`].

pub mod classifier;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod membank;
pub mod metrics;
pub mod pool;
pub mod regions;
pub mod snapshot;
pub mod synthetic;
pub mod uncertainty;

pub use classifier::{ModelBackend, ModelParams, SoftmaxBackend, TrainHyper, TrainReport};
pub use config::Config;
pub use dataset::{load_dataset, Dataset, TestSet};
pub use engine::{AnnotateOutcome, Engine, OracleLabels, RoundPlan, RoundRecord, Strategy};
pub use error::{ActuneError, Result};
pub use membank::BankMode;
pub use pool::{LabelStatus, Pool};
pub use uncertainty::UncertaintyMeasure;
