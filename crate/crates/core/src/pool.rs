//! The sample pool: embeddings, per-sample label status, and the on-disk
//! embedding and label formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ActuneError, Result};

/// Magic bytes opening an embedding file.
pub const EMBEDDING_MAGIC: &[u8; 4] = b"AFV1";
const HEADER_LEN: usize = 4 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LabelStatus {
    Unlabeled,
    Labeled { class: usize },
    Pseudo { class: usize, confidence: f64 },
}

impl LabelStatus {
    pub fn is_labeled(&self) -> bool {
        matches!(self, LabelStatus::Labeled { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    embeddings: Array2<f64>,
    statuses: Vec<LabelStatus>,
    class_count: usize,
    oracle_labels: Option<Vec<usize>>,
}

impl Pool {
    /// Builds a pool with every sample unlabeled.
    pub fn new(embeddings: Array2<f64>, class_count: usize) -> Result<Self> {
        let (n, d) = embeddings.dim();
        if n == 0 || d == 0 {
            return Err(ActuneError::Format(format!(
                "pool must have n > 0 and d > 0 (got {n} x {d})"
            )));
        }
        if class_count < 2 {
            return Err(ActuneError::Config(format!(
                "class_count must be at least 2 (got {class_count})"
            )));
        }
        check_finite(embeddings.view())?;
        Ok(Pool {
            embeddings,
            statuses: vec![LabelStatus::Unlabeled; n],
            class_count,
            oracle_labels: None,
        })
    }

    /// Attaches ground-truth labels used to answer queries in simulation.
    pub fn with_oracle(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n() {
            return Err(ActuneError::DimensionMismatch {
                expected: self.n(),
                actual: labels.len(),
            });
        }
        for (index, &label) in labels.iter().enumerate() {
            self.check_class(index, label)?;
        }
        self.oracle_labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn statuses(&self) -> &[LabelStatus] {
        &self.statuses
    }

    pub fn status(&self, i: usize) -> LabelStatus {
        self.statuses[i]
    }

    pub fn oracle_labels(&self) -> Option<&[usize]> {
        self.oracle_labels.as_deref()
    }

    pub fn oracle_label(&self, i: usize) -> Option<usize> {
        self.oracle_labels.as_ref().map(|l| l[i])
    }

    /// Indices in `X_l`, ascending.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.statuses[i].is_labeled())
            .collect()
    }

    /// Indices in `X_u` (unlabeled or pseudo-labeled), ascending.
    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| !self.statuses[i].is_labeled())
            .collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.statuses.iter().filter(|s| s.is_labeled()).count()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.n() - self.labeled_count()
    }

    /// `(index, class)` for every labeled sample, ascending by index.
    pub fn labeled_pairs(&self) -> Vec<(usize, usize)> {
        self.statuses
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                LabelStatus::Labeled { class } => Some((i, *class)),
                _ => None,
            })
            .collect()
    }

    /// Marks `i` as human-labeled. Overrides a pseudo-label; a labeled sample
    /// is never relabeled.
    pub fn set_label(&mut self, i: usize, class: usize) -> Result<()> {
        self.check_index(i)?;
        self.check_class(i, class)?;
        if self.statuses[i].is_labeled() {
            return Err(ActuneError::AlreadyLabeled(i));
        }
        self.statuses[i] = LabelStatus::Labeled { class };
        Ok(())
    }

    pub fn set_pseudo(&mut self, i: usize, class: usize, confidence: f64) -> Result<()> {
        self.check_index(i)?;
        self.check_class(i, class)?;
        if self.statuses[i].is_labeled() {
            return Err(ActuneError::AlreadyLabeled(i));
        }
        self.statuses[i] = LabelStatus::Pseudo { class, confidence };
        Ok(())
    }

    /// Resets every pseudo-labeled sample to unlabeled.
    pub fn clear_pseudo(&mut self) {
        for s in &mut self.statuses {
            if matches!(s, LabelStatus::Pseudo { .. }) {
                *s = LabelStatus::Unlabeled;
            }
        }
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(ActuneError::IndexOutOfRange {
                index: i,
                n: self.n(),
            });
        }
        Ok(())
    }

    fn check_class(&self, index: usize, label: usize) -> Result<()> {
        if label >= self.class_count {
            return Err(ActuneError::LabelOutOfRange {
                index,
                label,
                class_count: self.class_count,
            });
        }
        Ok(())
    }
}

fn check_finite(m: ArrayView2<f64>) -> Result<()> {
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(ActuneError::NonFinite { row, col });
        }
    }
    Ok(())
}

pub fn encode_embeddings(m: ArrayView2<f64>) -> Vec<u8> {
    let (n, d) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parses an `AFV1` embedding buffer into an `n x d` matrix.
pub fn decode_embeddings(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(ActuneError::Format("file shorter than header".into()));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(ActuneError::Format("missing AFV1 magic".into()));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| ActuneError::Format(format!("header size {n} x {d} overflows")))?;
    if body.len() != expected {
        return Err(ActuneError::Format(format!(
            "header declares {n} x {d} values ({expected} bytes) but body has {} bytes",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let m =
        Array2::from_shape_vec((n, d), values).map_err(|e| ActuneError::Format(e.to_string()))?;
    check_finite(m.view())?;
    Ok(m)
}

pub fn read_embeddings(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| ActuneError::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn write_embeddings(path: &Path, m: ArrayView2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| ActuneError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_embeddings(m))
        .and_then(|_| w.flush())
        .map_err(|e| ActuneError::io(path, e))
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    index: usize,
    label: usize,
}

/// Reads an `index,label` CSV. Duplicate indices are rejected.
pub fn read_labels(path: &Path) -> Result<Vec<(usize, usize)>> {
    let file = File::open(path).map_err(|e| ActuneError::io(path, e))?;
    parse_labels(file)
}

pub fn parse_labels<R: Read>(reader: R) -> Result<Vec<(usize, usize)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| ActuneError::LabelFile(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["index", "label"] {
        return Err(ActuneError::LabelFile(
            "expected header `index,label`".into(),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for row in rdr.deserialize::<LabelRow>() {
        let row = row.map_err(|e| ActuneError::LabelFile(e.to_string()))?;
        if !seen.insert(row.index) {
            return Err(ActuneError::DuplicateIndex(row.index));
        }
        out.push((row.index, row.label));
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[(usize, usize)]) -> Result<()> {
    let file = File::create(path).map_err(|e| ActuneError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for &(index, label) in labels {
        w.serialize(LabelRow { index, label })
            .map_err(|e| ActuneError::LabelFile(e.to_string()))?;
    }
    w.flush().map_err(|e| ActuneError::io(path, e))
}

/// Where a label file's contents go when building a pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelRole {
    /// Ground truth for every sample; used to answer simulated queries.
    Oracle,
    /// Labels applied directly as the initial `X_l` (live or weak-label mode).
    Initial,
}

/// Loads a pool from an embedding file and an optional label file.
pub fn load_pool(
    embeddings_file: &Path,
    labels: Option<(&Path, LabelRole)>,
    class_count: usize,
) -> Result<Pool> {
    let m = read_embeddings(embeddings_file)?;
    let pool = Pool::new(m, class_count)?;
    match labels {
        None => Ok(pool),
        Some((path, role)) => {
            let pairs = read_labels(path)?;
            apply_labels(pool, &pairs, role)
        }
    }
}

pub fn apply_labels(mut pool: Pool, pairs: &[(usize, usize)], role: LabelRole) -> Result<Pool> {
    match role {
        LabelRole::Initial => {
            for &(i, c) in pairs {
                pool.set_label(i, c)?;
            }
            Ok(pool)
        }
        LabelRole::Oracle => {
            let n = pool.n();
            let mut oracle: Vec<Option<usize>> = vec![None; n];
            for &(i, c) in pairs {
                if i >= n {
                    return Err(ActuneError::IndexOutOfRange { index: i, n });
                }
                oracle[i] = Some(c);
            }
            let labels = oracle
                .into_iter()
                .enumerate()
                .map(|(i, c)| {
                    c.ok_or_else(|| {
                        ActuneError::LabelFile(format!("oracle label missing for sample {i}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            pool.with_oracle(labels)
        }
    }
}

/// Labels `count` samples drawn uniformly without replacement from `X_u`,
/// answering from the oracle. Returns the chosen indices, ascending.
pub fn seed_initial_labels<R: Rng + ?Sized>(
    pool: &mut Pool,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let Some(oracle) = pool.oracle_labels.clone() else {
        return Err(ActuneError::NoLabelSource(
            "seeding initial labels needs oracle labels".into(),
        ));
    };
    let candidates = pool.unlabeled_indices();
    if count > candidates.len() {
        return Err(ActuneError::InvalidArgument(format!(
            "cannot seed {count} labels from {} unlabeled samples",
            candidates.len()
        )));
    }
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), count)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    chosen.sort_unstable();
    for &i in &chosen {
        pool.set_label(i, oracle[i])?;
    }
    Ok(chosen)
}
