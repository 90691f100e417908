//! The training loop: AdamW on the (optionally regularized) MLM objective,
//! checkpointing on the configured cadence and resumable from the last
//! resume point with a bit-identical continuation.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use saslab_core::model::{mask_batch, Model};
use saslab_core::numerics::{adamw_step, OptimizerState};
use saslab_core::regularizer::loss_and_gradients;
use saslab_core::rng::{rng_for, Stream};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{LabError, LabResult};
use crate::store::{
    append_jsonl, filter_jsonl, load_checkpoint, load_resume, read_jsonl, run_dir, save_checkpoint, save_resume,
    CheckpointRecord, CheckpointRef, LossStats, RngState, RunManifest, RunStatus,
};

/// One row of `loss.jsonl`: the objective evaluated at the parameters
/// reached after `step` updates, and the settings of the update taken there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub mlm: f64,
    pub mean_gamma: f64,
    pub lambda: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop (as if killed) once this many updates are done, leaving a
    /// resumable run behind.
    pub stop_after: Option<u64>,
    /// Discard an existing run directory whose config hash differs.
    pub overwrite: bool,
    pub quiet: bool,
}

#[derive(Default)]
struct Accumulator {
    count: u64,
    loss: f64,
    mlm: f64,
    gamma: f64,
}

impl Accumulator {
    fn push(&mut self, r: &LossRow) {
        self.count += 1;
        self.loss += r.loss;
        self.mlm += r.mlm;
        self.gamma += r.mean_gamma;
    }

    fn take(&mut self) -> LossStats {
        let n = self.count.max(1) as f64;
        let s = LossStats {
            count: self.count,
            mean_loss: self.loss / n,
            mean_mlm: self.mlm / n,
            mean_gamma: self.gamma / n,
        };
        *self = Self::default();
        s
    }
}

fn fresh_manifest(config: &ExperimentConfig, seed: u64, dir: &Path) -> RunManifest {
    RunManifest {
        name: config.name.clone(),
        seed,
        config_hash: config.hash(),
        status: RunStatus::Running,
        dir: dir.to_path_buf(),
        checkpoints: Vec::new(),
        streams: vec![("loss".into(), "loss.jsonl".into())],
        train_seconds: 0.0,
        measure_seconds: 0.0,
        config: config.clone(),
    }
}

fn record_checkpoint(manifest: &mut RunManifest, rec: &CheckpointRecord) {
    manifest.checkpoints.retain(|c| c.step != rec.step);
    manifest.checkpoints.push(CheckpointRef {
        step: rec.step,
        index: format!("checkpoints/step-{:07}.json", rec.step),
    });
    manifest.checkpoints.sort_by_key(|c| c.step);
}

/// Trains one seed under `root`, reusing a completed run with the same
/// config hash and resuming an interrupted one.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, root: &Path, opts: RunOptions) -> LabResult<RunManifest> {
    config.validate()?;
    let dir = run_dir(root, &config.name, seed);
    let hash = config.hash();
    let existing = RunManifest::load(&dir).ok();
    if let Some(m) = &existing {
        if m.config_hash != hash {
            if !opts.overwrite {
                return Err(LabError::Invalid(format!(
                    "{} holds a run with config hash {}, not {hash}",
                    dir.display(),
                    m.config_hash
                )));
            }
            std::fs::remove_dir_all(&dir).map_err(crate::error::io_err(&dir))?;
        } else if m.status == RunStatus::Complete {
            let mut m = m.clone();
            if m.config != *config {
                m.config = config.clone();
                m.save()?;
            }
            return Ok(m);
        }
    }

    let data = Dataset::build(config)?;
    let vocab_size = data.vocab.len();
    let mut model = Model::new(config.model_for(vocab_size, seed))?;
    let mut opt = OptimizerState::new(config.adamw(), &model.params.tensors).with_no_decay(model.params.no_decay_mask());
    let schedule = config.regularizer.schedule()?;
    let norm = config.regularizer.normalization;
    let checkpoints = config.cadence.steps(config.total_steps);
    let loss_path = dir.join("loss.jsonl");

    let mut manifest = match existing.filter(|m| m.config_hash == hash) {
        Some(m) => RunManifest {
            config: config.clone(),
            ..m
        },
        None => fresh_manifest(config, seed, &dir),
    };
    let mut acc = Accumulator::default();
    let start = match load_resume(&dir)? {
        Some((params, m, v, step)) => {
            model = Model::from_params(model.config.clone(), params)?;
            opt.m = m;
            opt.v = v;
            opt.step = step;
            manifest.checkpoints.retain(|c| c.step <= step);
            filter_jsonl::<LossRow>(&loss_path, |r| r.step < step)?;
            let last = manifest.checkpoints.last().map_or(0, |c| c.step);
            for r in read_jsonl::<LossRow>(&loss_path)?.iter().filter(|r| r.step >= last) {
                acc.push(r);
            }
            step
        }
        None => {
            manifest = fresh_manifest(config, seed, &dir);
            let _ = std::fs::remove_file(&loss_path);
            let rec = save_checkpoint(&dir, &model.params, RngState { seed, step: 0 }, LossStats::default())?;
            record_checkpoint(&mut manifest, &rec);
            save_resume(&dir, &model.params, &opt.m, &opt.v, 0, seed)?;
            0
        }
    };
    manifest.status = RunStatus::Running;
    manifest.save()?;
    let clock = Instant::now();
    let base_seconds = manifest.train_seconds;

    let mut rows = Vec::new();
    let n_train = data.train.len();
    for step in start..config.total_steps {
        if opts.stop_after.is_some_and(|k| step >= k) {
            break;
        }
        let mut brng = rng_for(seed, Stream::Batch, step);
        let picks: Vec<usize> = (0..config.batch_size).map(|_| brng.random_range(0..n_train)).collect();
        let parses: Vec<_> = picks.iter().map(|&i| &data.train[i]).collect();
        let sents: Vec<&[u32]> = parses.iter().map(|p| p.tokens.as_slice()).collect();
        let batch = mask_batch(
            &sents,
            config.mask_rate,
            vocab_size,
            model.config.max_len,
            &mut rng_for(seed, Stream::Mask, step),
        )?;
        let lambda = schedule.lambda_at(step);
        let mut drng = rng_for(seed, Stream::Dropout, step);
        let dropout: Option<&mut dyn RngCore> = (model.config.dropout > 0.0).then_some(&mut drng as &mut dyn RngCore);
        let out = match loss_and_gradients(&model, &batch, &parses, lambda, norm, dropout) {
            Ok(o) if o.loss.is_finite() && o.grads.iter().all(|g| g.is_finite()) => Some(o),
            Ok(_) | Err(saslab_core::Error::NonFinite(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let Some(out) = out else {
            let diag = dir.join("diagnostic");
            save_checkpoint(&diag, &model.params, RngState { seed, step }, acc.take())?;
            append_jsonl(&loss_path, &rows)?;
            manifest.status = RunStatus::Failed;
            manifest.save()?;
            return Err(LabError::Diverged { step, path: diag });
        };
        let lr = adamw_step(&mut model.params.tensors, &out.grads, &mut opt)?;
        let row = LossRow {
            step,
            loss: out.loss,
            mlm: out.mlm,
            mean_gamma: out.mean_gamma,
            lambda,
            lr,
        };
        acc.push(&row);
        rows.push(row);
        let done = step + 1;
        if checkpoints.binary_search(&done).is_ok() {
            append_jsonl(&loss_path, &rows)?;
            rows.clear();
            let rec = save_checkpoint(&dir, &model.params, RngState { seed, step: done }, acc.take())?;
            record_checkpoint(&mut manifest, &rec);
            save_resume(&dir, &model.params, &opt.m, &opt.v, done, seed)?;
            manifest.train_seconds = base_seconds + clock.elapsed().as_secs_f64();
            manifest.save()?;
            if !opts.quiet {
                eprintln!(
                    "[{} seed {seed}] step {done}/{} loss {:.4} mlm {:.4} gamma {:.4}",
                    config.name, config.total_steps, rec.loss.mean_loss, rec.loss.mean_mlm, rec.loss.mean_gamma
                );
            }
        }
    }
    let reached = opt.step;
    if !rows.is_empty() {
        append_jsonl(&loss_path, &rows)?;
        save_resume(&dir, &model.params, &opt.m, &opt.v, reached, seed)?;
    }
    if reached >= config.total_steps {
        manifest.status = RunStatus::Complete;
    }
    manifest.train_seconds = base_seconds + clock.elapsed().as_secs_f64();
    manifest.save()?;
    Ok(manifest)
}

/// Rebuilds the model stored at `step` of a run.
pub fn load_model(manifest: &RunManifest, step: u64, vocab_size: usize) -> LabResult<Model> {
    let (_, params) = load_checkpoint(&manifest.dir, step)?;
    Ok(Model::from_params(manifest.config.model_for(vocab_size, manifest.seed), params)?)
}
