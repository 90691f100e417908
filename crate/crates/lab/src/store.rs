//! On-disk layout of a run: checkpoints (raw little-endian f64 plus a JSON
//! index), the resume state, JSONL metric streams and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use saslab_core::model::ModelParams;
use saslab_core::numerics::Tensor;

use crate::config::ExperimentConfig;
use crate::error::{io_err, json_err, LabError, LabResult};

/// Environment variable naming the directory that holds all runs.
pub const ROOT_ENV: &str = "SASLAB_ROOT";

pub fn default_root() -> PathBuf {
    std::env::var_os(ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn run_dir(root: &Path, name: &str, seed: u64) -> PathBuf {
    root.join(name).join(format!("seed-{seed}"))
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> LabResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(json_err(path))?;
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> LabResult<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(json_err(path))
}

/// Placement of one tensor inside a checkpoint payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the `.bin` payload.
    pub offset: usize,
}

/// Everything needed to regenerate the random streams from a checkpoint:
/// batches, masks and dropout are all derived from `(seed, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    /// Training steps since the previous checkpoint.
    pub count: u64,
    pub mean_loss: f64,
    pub mean_mlm: f64,
    pub mean_gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub payload: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
    pub rng: RngState,
    pub loss: LossStats,
}

fn encode(tensors: &[&[Tensor]]) -> Vec<u8> {
    let n: usize = tensors.iter().flat_map(|g| g.iter()).map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(8 * n);
    for t in tensors.iter().flat_map(|g| g.iter()) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode(bytes: &[u8], entries: &[TensorEntry], path: &Path) -> LabResult<Vec<Tensor>> {
    let bad = |message: String| LabError::Checkpoint {
        path: path.into(),
        message,
    };
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            let raw = bytes
                .get(e.offset..end)
                .ok_or_else(|| bad(format!("{} runs past the payload", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(|err| bad(err.to_string()))
        })
        .collect()
}

fn entries(names: &[String], tensors: &[Tensor]) -> Vec<TensorEntry> {
    let mut offset = 0;
    names
        .iter()
        .zip(tensors)
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len();
            e
        })
        .collect()
}

pub fn checkpoint_paths(dir: &Path, step: u64) -> (PathBuf, PathBuf) {
    let stem = format!("step-{step:07}");
    let base = dir.join("checkpoints");
    (base.join(format!("{stem}.bin")), base.join(format!("{stem}.json")))
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    rng: RngState,
    loss: LossStats,
) -> LabResult<CheckpointRecord> {
    let (bin, index) = checkpoint_paths(dir, rng.step);
    let bytes = encode(&[&params.tensors]);
    write_atomic(&bin, &bytes)?;
    let rec = CheckpointRecord {
        step: rng.step,
        payload: bin.file_name().expect("file name").to_string_lossy().into_owned(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        tensors: entries(&params.names, &params.tensors),
        rng,
        loss,
    };
    write_json(&index, &rec)?;
    Ok(rec)
}

pub fn load_checkpoint(dir: &Path, step: u64) -> LabResult<(CheckpointRecord, ModelParams)> {
    let (bin, index) = checkpoint_paths(dir, step);
    let rec: CheckpointRecord = read_json(&index)?;
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    if hex::encode(Sha256::digest(&bytes)) != rec.sha256 {
        return Err(LabError::Checkpoint {
            path: bin,
            message: "payload hash mismatch".into(),
        });
    }
    let tensors = decode(&bytes, &rec.tensors, &bin)?;
    let names = rec.tensors.iter().map(|e| e.name.clone()).collect();
    Ok((rec, ModelParams { names, tensors }))
}

/// Latest training state: parameters plus AdamW moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeIndex {
    pub step: u64,
    /// Payload file next to the index. Each save writes a fresh payload
    /// before the index, so a kill at any point leaves a matching pair.
    #[serde(default = "legacy_payload")]
    pub payload: String,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
    pub moments: usize,
    pub sha256: String,
}

pub fn save_resume(dir: &Path, params: &ModelParams, m: &[Tensor], v: &[Tensor], step: u64, seed: u64) -> LabResult<()> {
    let bytes = encode(&[&params.tensors, m, v]);
    let mut names = params.names.clone();
    names.extend(params.names.iter().map(|n| format!("adam.m.{n}")));
    names.extend(params.names.iter().map(|n| format!("adam.v.{n}")));
    let all: Vec<Tensor> = params.tensors.iter().chain(m).chain(v).cloned().collect();
    let payload = format!("resume-{step:07}.bin");
    let idx = ResumeIndex {
        step,
        payload: payload.clone(),
        rng: RngState { seed, step },
        tensors: entries(&names, &all),
        moments: params.tensors.len(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    write_atomic(&dir.join(&payload), &bytes)?;
    write_json(&dir.join("resume.json"), &idx)?;
    for entry in fs::read_dir(dir).map_err(io_err(dir))?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if name != payload && name.starts_with("resume") && name.ends_with(".bin") {
            let _ = fs::remove_file(entry.path());
        }
    }
    Ok(())
}

fn legacy_payload() -> String {
    "resume.bin".into()
}

/// Parameters, first moments, second moments and the step reached.
pub type ResumeState = (ModelParams, Vec<Tensor>, Vec<Tensor>, u64);

pub fn load_resume(dir: &Path) -> LabResult<Option<ResumeState>> {
    let index = dir.join("resume.json");
    if !index.exists() {
        return Ok(None);
    }
    let idx: ResumeIndex = read_json(&index)?;
    let bin = dir.join(&idx.payload);
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    if hex::encode(Sha256::digest(&bytes)) != idx.sha256 {
        return Err(LabError::Checkpoint {
            path: bin,
            message: "resume payload hash mismatch".into(),
        });
    }
    let mut all = decode(&bytes, &idx.tensors, &bin)?;
    let k = idx.moments;
    if all.len() != 3 * k {
        return Err(LabError::Checkpoint {
            path: bin,
            message: "resume payload does not hold params and two moments".into(),
        });
    }
    let v = all.split_off(2 * k);
    let m = all.split_off(k);
    let names = idx.tensors[..k].iter().map(|e| e.name.clone()).collect();
    Ok(Some((ModelParams { names, tensors: all }, m, v, idx.step)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub step: u64,
    pub index: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: RunStatus,
    pub dir: PathBuf,
    pub checkpoints: Vec<CheckpointRef>,
    /// Metric family name → JSONL path relative to `dir`.
    pub streams: Vec<(String, String)>,
    /// Wall-clock seconds spent training, summed over sessions.
    #[serde(default)]
    pub train_seconds: f64,
    /// Wall-clock seconds spent measuring checkpoints, summed over sessions.
    #[serde(default)]
    pub measure_seconds: f64,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> LabResult<Self> {
        read_json(&Self::path(dir))
    }

    pub fn save(&self) -> LabResult<()> {
        write_json(&Self::path(&self.dir), self)
    }

    pub fn stream(&self, family: &str) -> PathBuf {
        self.dir.join(format!("{family}.jsonl"))
    }

    pub fn steps(&self) -> Vec<u64> {
        self.checkpoints.iter().map(|c| c.step).collect()
    }

    pub fn load_params(&self, step: u64) -> LabResult<ModelParams> {
        Ok(load_checkpoint(&self.dir, step)?.1)
    }
}

pub fn append_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> LabResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    drop_torn_tail(path)?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(json_err(path))?;
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(io_err(path))
}

/// Truncates a stream after its last newline, removing a line left
/// unterminated by an interrupted append.
fn drop_torn_tail(path: &Path) -> LabResult<()> {
    let Ok(bytes) = fs::read(path) else {
        return Ok(());
    };
    if bytes.last().is_none_or(|&b| b == b'\n') {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let f = fs::OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    f.set_len(keep as u64).map_err(io_err(path))
}

/// Reads every row of a JSONL stream. An unterminated final line that does
/// not parse is the remnant of an interrupted append and is skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> LabResult<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let terminated = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (k, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(row) => out.push(row),
            Err(_) if !terminated && k + 1 == lines.len() => break,
            Err(e) => return Err(json_err(path)(e)),
        }
    }
    Ok(out)
}

/// Rewrites a JSONL stream keeping only rows accepted by `keep`.
pub fn filter_jsonl<T: Serialize + DeserializeOwned>(path: &Path, keep: impl Fn(&T) -> bool) -> LabResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<T> = read_jsonl(path)?;
    let mut buf = Vec::new();
    for r in rows.iter().filter(|r| keep(r)) {
        serde_json::to_writer(&mut buf, r).map_err(json_err(path))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}
