#![allow(dead_code)]

use saslab::config::{Cadence, EvalSettings, ExperimentConfig, OptimizerSettings};
use saslab_core::grammar::CorpusConfig;
use saslab_core::model::ModelConfig;

/// A config small enough to train in well under a second.
pub fn tiny_config(name: &str, total_steps: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seeds: vec![1],
        total_steps,
        batch_size: 8,
        corpus: CorpusConfig {
            size: 300,
            ..Default::default()
        },
        model: ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            max_len: 14,
            ..Default::default()
        },
        optimizer: OptimizerSettings {
            lr: 3e-3,
            warmup_steps: 5,
            ..Default::default()
        },
        cadence: Cadence {
            dense_every: 5,
            dense_until: 20,
            sparse_every: 10,
        },
        eval: EvalSettings {
            held_out: 80,
            probe_sentences: 20,
            pairs: 12,
            pppl_sentences: 4,
            ngram: vec![1, 2],
            ngram_samples: 20,
            twonn_points: 30,
            fisher_batches: 1,
            loss_batches: 1,
            batch_size: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}
