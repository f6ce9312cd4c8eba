//! Checkpoints: a directory holding `manifest.json` (config snapshot,
//! stage, progress counters, metric summary, array index) and
//! `params.bin` (named f64 arrays, little-endian, offsets from the
//! index). Optimizer moments are stored alongside the model parameters
//! under an `optim.` prefix so a resumed run is bit-identical to an
//! uninterrupted one.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, StageKind};
use crate::error::{ChimeraError, Result};
use crate::model::{ModelState, Params};
use crate::tensor::Tensor;
use crate::training::{AdamSlot, AdamW, TrainProgress};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    /// Byte offset into params.bin.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub stage: Option<StageKind>,
    pub progress: TrainProgress,
    /// Per-parameter optimizer step counts.
    pub optimizer_steps: std::collections::BTreeMap<String, u64>,
    pub config: ExperimentConfig,
    pub metrics: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
    /// SHA-256 of params.bin, for provenance in reports.
    pub params_hash: String,
}

pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub state: ModelState,
    pub optimizer: Option<AdamW>,
}

fn push_array(
    buf: &mut Vec<u8>,
    arrays: &mut Vec<ArrayEntry>,
    name: String,
    t: &Tensor,
) {
    arrays.push(ArrayEntry {
        name,
        rows: t.rows,
        cols: t.cols,
        dtype: "f64".into(),
        offset: buf.len() as u64,
    });
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes a checkpoint directory, creating it if needed.
pub fn save(
    dir: &Path,
    state: &ModelState,
    optimizer: Option<&AdamW>,
    progress: TrainProgress,
    stage: Option<StageKind>,
    metrics: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    let mut arrays = Vec::new();
    for (name, t) in state.params.iter() {
        push_array(&mut buf, &mut arrays, name.clone(), t);
    }
    let mut optimizer_steps = std::collections::BTreeMap::new();
    if let Some(opt) = optimizer {
        for (name, slot) in opt.slots() {
            push_array(&mut buf, &mut arrays, format!("optim.m.{name}"), &slot.m);
            push_array(&mut buf, &mut arrays, format!("optim.v.{name}"), &slot.v);
            optimizer_steps.insert(name.clone(), slot.t);
        }
    }
    let params_hash: String = {
        let mut h = Sha256::new();
        h.update(&buf);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    };
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        stage,
        progress,
        optimizer_steps,
        config: state.experiment.clone(),
        metrics,
        arrays,
        params_hash,
    };
    std::fs::write(dir.join(PARAMS_FILE), &buf)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_array(buf: &[u8], e: &ArrayEntry) -> Result<Tensor> {
    if e.dtype != "f64" {
        return Err(ChimeraError::data(format!("unsupported dtype {}", e.dtype)));
    }
    let n = e.rows * e.cols;
    let start = e.offset as usize;
    let end = start + n * 8;
    if end > buf.len() {
        return Err(ChimeraError::data(format!("array {} overruns params.bin", e.name)));
    }
    let data = buf[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(e.rows, e.cols, data))
}

/// Loads a checkpoint directory back into a model (and optimizer state,
/// when present).
pub fn load(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ChimeraError::data(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    let mut buf = Vec::new();
    std::fs::File::open(dir.join(PARAMS_FILE))?.read_to_end(&mut buf)?;
    let mut params = Params::new();
    let mut moments: std::collections::BTreeMap<String, Tensor> = Default::default();
    for e in &manifest.arrays {
        let t = read_array(&buf, e)?;
        if let Some(rest) = e.name.strip_prefix("optim.") {
            moments.insert(rest.to_string(), t);
        } else {
            params.insert(e.name.clone(), t);
        }
    }
    let optimizer = if manifest.optimizer_steps.is_empty() && moments.is_empty() {
        None
    } else {
        let mut opt = AdamW::new(0.0, 0.0);
        for (name, &t) in &manifest.optimizer_steps {
            let m = moments
                .remove(&format!("m.{name}"))
                .ok_or_else(|| ChimeraError::data(format!("missing moment m for {name}")))?;
            let v = moments
                .remove(&format!("v.{name}"))
                .ok_or_else(|| ChimeraError::data(format!("missing moment v for {name}")))?;
            opt.restore_slot(name.clone(), AdamSlot { m, v, t });
        }
        Some(opt)
    };
    let state = ModelState { experiment: manifest.config.clone(), params };
    Ok(LoadedCheckpoint { manifest, state, optimizer })
}

/// Convenience for reports: the stored params hash of a checkpoint.
pub fn params_hash(dir: &Path) -> Result<String> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    Ok(manifest.params_hash)
}

/// Writes the metrics log next to a checkpoint.
pub fn write_metrics(dir: &Path, records: &[crate::training::StepRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
