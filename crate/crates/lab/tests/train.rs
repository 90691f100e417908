mod common;

use std::fs;
use std::path::Path;

use common::tiny_config;
use saslab::config::ExperimentConfig;
use saslab::data::Dataset;
use saslab::store::{append_jsonl, load_checkpoint, read_jsonl, save_checkpoint, LossStats, RngState};
use saslab::train::{load_model, LossRow};
use saslab::{run_experiment, LabError, RunManifest, RunOptions, RunStatus};
use saslab_core::model::token_likelihood;
use saslab_core::model::{MlmBatch, Model};
use saslab_core::regularizer::Stage;

fn train(cfg: &ExperimentConfig, root: &Path, opts: RunOptions) -> RunManifest {
    run_experiment(
        cfg,
        1,
        root,
        RunOptions {
            quiet: true,
            ..opts
        },
    )
    .unwrap()
}

fn bytes(m: &RunManifest, file: &str) -> Vec<u8> {
    fs::read(m.dir.join(file)).unwrap()
}

fn final_checkpoint(m: &RunManifest) -> Vec<u8> {
    let last = m.steps().last().copied().unwrap();
    bytes(m, &format!("checkpoints/step-{last:07}.bin"))
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = tiny_config("rt", 40);
    cfg.regularizer.stages = vec![
        Stage {
            start_step: 0,
            lambda: 0.001,
        },
        Stage {
            start_step: 20,
            lambda: 0.0,
        },
    ];
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(ExperimentConfig::from_toml_str("nme = \"x\"").is_err());
    assert!(ExperimentConfig::from_toml_str("seeds = []").is_err());
    assert!(ExperimentConfig::from_toml_str("mask_rate = 1.5").is_err());
}

#[test]
fn cadence_covers_first_and_last_step() {
    let c = tiny_config("c", 37).cadence;
    assert_eq!(c.steps(37), vec![0, 5, 10, 15, 20, 30, 37]);
    assert_eq!(c.steps(0), vec![0]);
    let d = saslab::config::Cadence::default();
    let s = d.steps(20_000);
    assert_eq!(s[..3], [0, 50, 100]);
    assert!(s.contains(&2000) && s.contains(&2250));
    assert_eq!(*s.last().unwrap(), 20_000);
}

#[test]
fn zero_steps_leave_only_the_initial_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let m = train(&tiny_config("zero", 0), root.path(), RunOptions::default());
    assert_eq!(m.steps(), vec![0]);
    assert_eq!(m.status, RunStatus::Complete);
    assert!(read_jsonl::<LossRow>(&m.dir.join("loss.jsonl")).unwrap().is_empty());
}

#[test]
fn manifest_checkpoints_exist_and_verify() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config("idx", 25);
    let m = train(&cfg, root.path(), RunOptions::default());
    assert_eq!(m.steps(), cfg.cadence.steps(25));
    let loaded = RunManifest::load(&m.dir).unwrap();
    assert_eq!(loaded, m);
    for c in &m.checkpoints {
        assert!(m.dir.join(&c.index).exists());
        let (rec, params) = load_checkpoint(&m.dir, c.step).unwrap();
        assert_eq!(rec.step, c.step);
        assert_eq!(rec.rng, RngState { seed: 1, step: c.step });
        assert!(params.is_finite());
    }
    let rows: Vec<LossRow> = read_jsonl(&m.dir.join("loss.jsonl")).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), (0..25).collect::<Vec<_>>());
}

#[test]
fn checkpoint_reload_reproduces_forward_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("ck", 0);
    let data = Dataset::build(&cfg).unwrap();
    let mut model = Model::new(cfg.model_for(data.vocab.len(), 3)).unwrap();
    // Perturb so the values are not just the initializer's.
    for (k, t) in model.params.tensors.iter_mut().enumerate() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 1e-3 * ((k * 31 + i) % 17) as f64 / 7.0;
        }
    }
    let rec = save_checkpoint(dir.path(), &model.params, RngState { seed: 3, step: 9 }, LossStats::default()).unwrap();
    let (back, params) = load_checkpoint(dir.path(), 9).unwrap();
    assert_eq!(back, rec);
    assert_eq!(params, model.params);
    let reloaded = Model::from_params(model.config.clone(), params).unwrap();
    let sents: Vec<&[u32]> = data.held_out[..6].iter().map(|s| s.tokens.as_slice()).collect();
    let batch = MlmBatch::unmasked(&sents, cfg.model.max_len).unwrap();
    let (a, b) = (model.forward(&batch).unwrap(), reloaded.forward(&batch).unwrap());
    let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.logits.data()), bits(b.logits.data()));
    assert_eq!(bits(&a.attentions.data), bits(&b.attentions.data));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let m = train(&tiny_config("bad", 5), root.path(), RunOptions::default());
    let bin = m.dir.join("checkpoints/step-0000005.bin");
    let mut b = fs::read(&bin).unwrap();
    b[3] ^= 1;
    fs::write(&bin, b).unwrap();
    assert!(matches!(load_checkpoint(&m.dir, 5), Err(LabError::Checkpoint { .. })));
}

#[test]
fn same_config_and_seed_give_identical_loss_streams() {
    let (r1, r2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_config("det", 30);
    let a = train(&cfg, r1.path(), RunOptions::default());
    let b = train(&cfg, r2.path(), RunOptions::default());
    assert_eq!(bytes(&a, "loss.jsonl"), bytes(&b, "loss.jsonl"));
    assert_eq!(final_checkpoint(&a), final_checkpoint(&b));
    let mut other = cfg.clone();
    other.seeds = vec![2];
    let c = run_experiment(&other, 2, r1.path(), RunOptions { quiet: true, ..Default::default() }).unwrap();
    assert_ne!(bytes(&a, "loss.jsonl"), bytes(&c, "loss.jsonl"));
}

#[test]
fn resume_continues_bit_identically() {
    let cfg = tiny_config("resume", 40);
    let full_root = tempfile::tempdir().unwrap();
    let full = train(&cfg, full_root.path(), RunOptions::default());
    // Stop both on and off a checkpoint step.
    for stop in [15, 23] {
        let root = tempfile::tempdir().unwrap();
        let part = train(
            &cfg,
            root.path(),
            RunOptions {
                stop_after: Some(stop),
                ..Default::default()
            },
        );
        assert_eq!(part.status, RunStatus::Running);
        let rows: Vec<LossRow> = read_jsonl(&part.dir.join("loss.jsonl")).unwrap();
        assert_eq!(rows.len() as u64, stop);
        let done = train(&cfg, root.path(), RunOptions::default());
        assert_eq!(done.status, RunStatus::Complete);
        assert_eq!(bytes(&done, "loss.jsonl"), bytes(&full, "loss.jsonl"));
        assert_eq!(final_checkpoint(&done), final_checkpoint(&full));
        assert_eq!(done.steps(), full.steps());
    }
}

#[test]
fn torn_stream_tail_is_skipped_and_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    append_jsonl(&path, &[1u64, 2]).unwrap();
    fs::write(&path, [fs::read(&path).unwrap(), b"{\"trunc".to_vec()].concat()).unwrap();
    assert_eq!(read_jsonl::<u64>(&path).unwrap(), vec![1, 2]);
    append_jsonl(&path, &[3u64]).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "1\n2\n3\n");
    fs::write(&path, "1\nx\n2\n").unwrap();
    assert!(read_jsonl::<u64>(&path).is_err());
}

#[test]
fn interrupted_resume_save_keeps_the_previous_pair() {
    let cfg = tiny_config("torn", 40);
    let full_root = tempfile::tempdir().unwrap();
    let full = train(&cfg, full_root.path(), RunOptions::default());
    let root = tempfile::tempdir().unwrap();
    let part = train(
        &cfg,
        root.path(),
        RunOptions {
            stop_after: Some(20),
            ..Default::default()
        },
    );
    // A kill after the next payload is written but before its index.
    fs::write(part.dir.join("resume-0000030.bin"), b"partial").unwrap();
    let done = train(&cfg, root.path(), RunOptions::default());
    assert_eq!(bytes(&done, "loss.jsonl"), bytes(&full, "loss.jsonl"));
    assert_eq!(final_checkpoint(&done), final_checkpoint(&full));
    let payloads = fs::read_dir(&done.dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("resume-"))
        .count();
    assert_eq!(payloads, 1);
}

#[test]
fn completed_run_is_reused_and_foreign_hash_refused() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config("reuse", 10);
    let a = train(&cfg, root.path(), RunOptions::default());
    let before = bytes(&a, "loss.jsonl");
    let b = train(&cfg, root.path(), RunOptions::default());
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(before, bytes(&b, "loss.jsonl"));
    let mut changed = cfg.clone();
    changed.mask_rate = 0.2;
    assert!(run_experiment(&changed, 1, root.path(), RunOptions::default()).is_err());
    let c = train(
        &changed,
        root.path(),
        RunOptions {
            overwrite: true,
            ..Default::default()
        },
    );
    assert_eq!(c.config_hash, changed.hash());
}

#[test]
fn non_finite_loss_aborts_with_diagnostic_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("nan", 20);
    cfg.optimizer.lr = 1e300;
    cfg.optimizer.warmup_steps = 0;
    let err = run_experiment(&cfg, 1, root.path(), RunOptions { quiet: true, ..Default::default() }).unwrap_err();
    let LabError::Diverged { step, path } = err else {
        panic!("expected divergence, got {err}");
    };
    assert!(step > 0);
    assert!(load_checkpoint(&path, step).is_ok());
    let m = RunManifest::load(&saslab::store::run_dir(root.path(), "nan", 1)).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
}

#[test]
fn training_reduces_loss() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("smoke", 300);
    cfg.model.d_model = 32;
    cfg.model.d_ff = 64;
    let m = train(&cfg, root.path(), RunOptions::default());
    let rows: Vec<LossRow> = read_jsonl(&m.dir.join("loss.jsonl")).unwrap();
    let mean = |r: &[LossRow]| r.iter().map(|x| x.mlm).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&rows[..20]), mean(&rows[rows.len() - 20..]));
    assert!(last < 0.85 * first, "loss {first} -> {last}");
}

#[test]
fn trained_model_predicts_the_sentence_initial_slot() {
    // Every sentence opens with a determiner or possessive, so the first
    // slot is predictable from position alone.
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("slot", 300);
    cfg.model.d_model = 32;
    cfg.model.d_ff = 64;
    let m = train(&cfg, root.path(), RunOptions::default());
    let data = Dataset::build(&cfg).unwrap();
    let v = data.vocab.len();
    let model = load_model(&m, 300, v).unwrap();
    let s = &data.held_out;
    let openers: std::collections::BTreeSet<u32> = s.iter().map(|p| p.tokens[0]).collect();
    assert!(openers.len() < 20);
    let mean: f64 = s[..40]
        .iter()
        .map(|p| token_likelihood(&model, &p.tokens, 0).unwrap())
        .sum::<f64>()
        / 40.0;
    assert!(mean > 10.0 / v as f64, "slot likelihood {mean} vs uniform {}", 1.0 / v as f64);
}
