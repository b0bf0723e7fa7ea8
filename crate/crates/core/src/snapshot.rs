//! Versioned, checksummed engine snapshots.
//!
//! A snapshot is one header line followed by a JSON payload:
//!
//! ```text
//! ACTUNE-SNAPSHOT <version> <sha256 of payload, hex> <payload length>
//! {...}
//! ```
//!
//! Floats survive the JSON round trip exactly, so restoring and re-encoding
//! gives the same bytes.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ModelBackend;
use crate::config::{ClusteringConfig, ExperimentConfig};
use crate::dataset::TestSet;
use crate::engine::{Engine, EngineState, Strategy};
use crate::error::{ActuneError, Result};

pub const SNAPSHOT_MAGIC: &str = "ACTUNE-SNAPSHOT";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot<M> {
    pub experiment: ExperimentConfig,
    pub clustering: ClusteringConfig,
    pub strategy: Strategy,
    pub test: Option<TestSet>,
    pub state: EngineState<M>,
}

impl<B: ModelBackend> Engine<B> {
    pub fn snapshot(&self) -> EngineSnapshot<B::Model> {
        EngineSnapshot {
            experiment: self.config().clone(),
            clustering: self.clustering().clone(),
            strategy: self.strategy(),
            test: self.test_set().cloned(),
            state: self.state().clone(),
        }
    }

    pub fn restore(snapshot: EngineSnapshot<B::Model>, backend: B) -> Result<Self> {
        Engine::from_parts(
            snapshot.experiment,
            snapshot.clustering,
            snapshot.strategy,
            backend,
            snapshot.test,
            snapshot.state,
        )
    }
}

pub fn encode_snapshot<M: Serialize>(snapshot: &EngineSnapshot<M>) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(snapshot).map_err(|e| ActuneError::Corrupt(e.to_string()))?;
    let digest = hex::encode(Sha256::digest(&payload));
    let mut out = format!(
        "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION} {digest} {}\n",
        payload.len()
    )
    .into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_snapshot<M: DeserializeOwned>(bytes: &[u8]) -> Result<EngineSnapshot<M>> {
    let corrupt = |msg: &str| ActuneError::Corrupt(msg.to_string());
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header"))?;
    let header =
        std::str::from_utf8(&bytes[..newline]).map_err(|_| corrupt("header is not UTF-8"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 || fields[0] != SNAPSHOT_MAGIC {
        return Err(corrupt("not a snapshot file"));
    }
    let version: u32 = fields[1]
        .parse()
        .map_err(|_| corrupt("bad version field"))?;
    if version != SNAPSHOT_VERSION {
        return Err(ActuneError::VersionMismatch {
            found: version,
            expected: SNAPSHOT_VERSION,
        });
    }
    let len: usize = fields[3].parse().map_err(|_| corrupt("bad length field"))?;
    let payload = &bytes[newline + 1..];
    if payload.len() != len {
        return Err(ActuneError::Corrupt(format!(
            "payload is {} bytes, header says {len}",
            payload.len()
        )));
    }
    if hex::encode(Sha256::digest(payload)) != fields[2] {
        return Err(corrupt("checksum mismatch"));
    }
    serde_json::from_slice(payload).map_err(|e| ActuneError::Corrupt(e.to_string()))
}

/// Writes atomically: a temporary file in the same directory is synced and
/// renamed over `path`.
pub fn write_snapshot<M: Serialize>(path: &Path, snapshot: &EngineSnapshot<M>) -> Result<()> {
    let bytes = encode_snapshot(snapshot)?;
    write_atomic(path, &bytes)
}

pub fn read_snapshot<M: DeserializeOwned>(path: &Path) -> Result<EngineSnapshot<M>> {
    let bytes = fs::read(path).map_err(|e| ActuneError::io(path, e))?;
    decode_snapshot(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| {
        ActuneError::InvalidArgument(format!("{} has no file name", path.display()))
    })?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = File::create(&tmp).map_err(|e| ActuneError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| ActuneError::io(&tmp, e))?;
    f.sync_all().map_err(|e| ActuneError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| ActuneError::io(path, e))?;
    // Make the rename itself durable.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ModelParams, SoftmaxBackend, TrainHyper};
    use crate::config::Config;
    use crate::dataset::load_dataset;
    use crate::synthetic::SyntheticConfig;

    fn engine() -> Engine {
        let mut cfg = Config::default();
        cfg.experiment.rounds = 4;
        cfg.experiment.budget = 20;
        cfg.experiment.init_labeled = 10;
        cfg.experiment.clusters = 6;
        cfg.experiment.regions = 2;
        cfg.experiment.k_st = 10;
        cfg.classifier = TrainHyper {
            epochs: 40,
            ..TrainHyper::default()
        };
        cfg.data.synthetic = Some(SyntheticConfig {
            classes: 3,
            per_class: 30,
            dim: 3,
            test_per_class: 10,
            ..SyntheticConfig::default()
        });
        let data = load_dataset(&cfg).unwrap();
        Engine::from_config(&cfg, Strategy::actune(&cfg.experiment), data).unwrap()
    }

    #[test]
    fn fresh_round_trip() {
        let e = engine();
        let bytes = encode_snapshot(&e.snapshot()).unwrap();
        let snap: EngineSnapshot<ModelParams> = decode_snapshot(&bytes).unwrap();
        assert_eq!(snap.state.round, 0);
        assert_eq!(encode_snapshot(&snap).unwrap(), bytes);
    }

    #[test]
    fn restored_engine_continues_identically() {
        let mut e = engine();
        for _ in 0..3 {
            e.run_round(&mut crate::engine::OracleLabels).unwrap();
        }
        let bytes = encode_snapshot(&e.snapshot()).unwrap();
        let snap = decode_snapshot(&bytes).unwrap();
        let mut r = Engine::restore(snap, SoftmaxBackend::new(e.backend().hyper)).unwrap();
        assert_eq!(encode_snapshot(&r.snapshot()).unwrap(), bytes);
        let a = e.plan_round().unwrap().clone();
        let b = r.plan_round().unwrap().clone();
        assert_eq!(a, b);
    }

    #[test]
    fn pending_plan_survives() {
        let mut e = engine();
        let q = e.plan_round().unwrap().query_batch.clone();
        e.annotate(q[0], 1, Some("ann".into())).unwrap();
        let snap = decode_snapshot(&encode_snapshot(&e.snapshot()).unwrap()).unwrap();
        let r = Engine::restore(snap, SoftmaxBackend::default()).unwrap();
        assert_eq!(r.pending().unwrap().pending_count(), q.len() - 1);
    }

    #[test]
    fn damaged_files_rejected() {
        let bytes = encode_snapshot(&engine().snapshot()).unwrap();
        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(
            decode_snapshot::<ModelParams>(truncated),
            Err(ActuneError::Corrupt(_))
        ));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 2;
        flipped[last] ^= 1;
        assert!(matches!(
            decode_snapshot::<ModelParams>(&flipped),
            Err(ActuneError::Corrupt(_))
        ));
        let text = String::from_utf8(bytes.clone()).unwrap();
        let bumped = text.replacen("ACTUNE-SNAPSHOT 1 ", "ACTUNE-SNAPSHOT 2 ", 1);
        assert!(matches!(
            decode_snapshot::<ModelParams>(bumped.as_bytes()),
            Err(ActuneError::VersionMismatch { found: 2, .. })
        ));
        assert!(decode_snapshot::<ModelParams>(b"").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.snap");
        let e = engine();
        write_snapshot(&path, &e.snapshot()).unwrap();
        let snap: EngineSnapshot<ModelParams> = read_snapshot(&path).unwrap();
        assert_eq!(snap, e.snapshot());
    }
}
