//! Builds the pool, test split, and annotator payloads from a config.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{ActuneError, Result};
use crate::pool::{apply_labels, read_embeddings, read_labels, LabelRole, Pool};
use crate::synthetic::make_synthetic;

/// Held-out samples for accuracy reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
}

impl TestSet {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(ActuneError::DimensionMismatch {
                expected: embeddings.nrows(),
                actual: labels.len(),
            });
        }
        Ok(TestSet { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub pool: Pool,
    pub test: Option<TestSet>,
    /// Display text per sample index.
    pub payloads: BTreeMap<usize, String>,
}

pub fn load_dataset(config: &Config) -> Result<Dataset> {
    let data = &config.data;
    let mut dataset = if let Some(syn) = &data.synthetic {
        if let Some(c) = data.class_count {
            if c != syn.classes {
                return Err(ActuneError::Config(format!(
                    "class_count = {c} but the synthetic pool has {} classes",
                    syn.classes
                )));
            }
        }
        let seed = syn.seed.unwrap_or(config.experiment.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pool, tx, tl) = make_synthetic(syn, &mut rng)?;
        let test = if tl.is_empty() {
            None
        } else {
            Some(TestSet::new(tx, tl)?)
        };
        Dataset {
            pool,
            test,
            payloads: BTreeMap::new(),
        }
    } else {
        let Some(emb) = &data.embeddings else {
            return Err(ActuneError::Config(
                "[data] needs either `embeddings` or a `synthetic` section".into(),
            ));
        };
        let Some(class_count) = data.class_count else {
            return Err(ActuneError::Config("[data] class_count is required".into()));
        };
        let mut pool = Pool::new(read_embeddings(emb)?, class_count)?;
        if let Some(labels) = &data.labels {
            let role = if data.oracle {
                LabelRole::Oracle
            } else {
                LabelRole::Initial
            };
            pool = apply_labels(pool, &read_labels(labels)?, role)?;
        }
        let test = match (&data.test_embeddings, &data.test_labels) {
            (Some(e), Some(l)) => Some(load_test_set(e, l, class_count)?),
            (None, None) => None,
            _ => {
                return Err(ActuneError::Config(
                    "test_embeddings and test_labels must be given together".into(),
                ))
            }
        };
        Dataset {
            pool,
            test,
            payloads: BTreeMap::new(),
        }
    };
    if let Some(path) = &data.initial_labels {
        let pairs = read_labels(path)?;
        dataset.pool = apply_labels(dataset.pool, &pairs, LabelRole::Initial)?;
    }
    if let Some(path) = &data.payloads {
        dataset.payloads = read_payloads(path)?;
    }
    Ok(dataset)
}

/// Reads a test split; every row must carry exactly one label.
pub fn load_test_set(embeddings: &Path, labels: &Path, class_count: usize) -> Result<TestSet> {
    let x = read_embeddings(embeddings)?;
    let n = x.nrows();
    let mut y = vec![None; n];
    for (i, c) in read_labels(labels)? {
        if i >= n {
            return Err(ActuneError::IndexOutOfRange { index: i, n });
        }
        if c >= class_count {
            return Err(ActuneError::LabelOutOfRange {
                index: i,
                label: c,
                class_count,
            });
        }
        y[i] = Some(c);
    }
    let y = y
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            c.ok_or_else(|| ActuneError::LabelFile(format!("test label missing for row {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    TestSet::new(x, y)
}

#[derive(Deserialize)]
struct PayloadRow {
    index: usize,
    text: String,
}

/// `index,text` CSV.
pub fn read_payloads(path: &Path) -> Result<BTreeMap<usize, String>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| ActuneError::LabelFile(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<PayloadRow>() {
        let row = row.map_err(|e| ActuneError::LabelFile(format!("{}: {e}", path.display())))?;
        if out.insert(row.index, row.text).is_some() {
            return Err(ActuneError::DuplicateIndex(row.index));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{write_embeddings, write_labels};
    use crate::synthetic::SyntheticConfig;

    #[test]
    fn synthetic_dataset() {
        let mut cfg = Config::default();
        cfg.data.synthetic = Some(SyntheticConfig {
            per_class: 20,
            test_per_class: 5,
            ..SyntheticConfig::default()
        });
        let d = load_dataset(&cfg).unwrap();
        assert_eq!(d.pool.n(), 80);
        assert_eq!(d.test.unwrap().len(), 20);
    }

    #[test]
    fn files_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let x = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64);
        write_embeddings(&dir.path().join("pool.afv"), x.view()).unwrap();
        write_embeddings(&dir.path().join("test.afv"), x.view()).unwrap();
        write_labels(&dir.path().join("labels.csv"), &[(0, 1), (2, 0)]).unwrap();
        write_labels(
            &dir.path().join("test.csv"),
            &[(0, 0), (1, 1), (2, 0), (3, 1)],
        )
        .unwrap();
        std::fs::write(
            dir.path().join("payloads.csv"),
            "index,text\n0,hello\n3,\"a, b\"\n",
        )
        .unwrap();
        let text = r#"
            [data]
            class_count = 2
            embeddings = "pool.afv"
            labels = "labels.csv"
            test_embeddings = "test.afv"
            test_labels = "test.csv"
            payloads = "payloads.csv"
        "#;
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        let cfg = Config::from_file(&path).unwrap();
        let d = load_dataset(&cfg).unwrap();
        assert_eq!(d.pool.labeled_count(), 2);
        assert!(d.pool.oracle_labels().is_none());
        assert_eq!(d.test.unwrap().labels, vec![0, 1, 0, 1]);
        assert_eq!(d.payloads[&3], "a, b");
    }

    #[test]
    fn missing_sources_rejected() {
        assert!(load_dataset(&Config::default()).is_err());
    }
}
