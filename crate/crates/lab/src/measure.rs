//! Per-checkpoint measurements, appended to one JSONL stream per metric
//! family. Checkpoints that already have a row (under the same evaluation
//! settings) are skipped, so measuring is incremental.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use saslab_core::complexity::{attention_by_distance, attention_entropy, cls_cloud, fisher_approx, linear_cka, tvd, twonn_id, weight_norm};
use saslab_core::eval::{minimal_pair_eval, ngram_context_probe, pppl};
use saslab_core::grammar::{ParsedSentence, CLS, MASK, SEP};
use saslab_core::model::{mask_batch, mlm_loss, MaskQuery, MaskedLm, MlmBatch, Model};
use saslab_core::probe::{probe_model, HeadAssignment};
use saslab_core::rng::{rng_for, Stream};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::LabResult;
use crate::store::{append_jsonl, read_jsonl, write_atomic, RunManifest};
use crate::train::load_model;

/// Metric families, one JSONL stream each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Probe,
    Eval,
    Complexity,
    Axes,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Probe, Family::Eval, Family::Complexity, Family::Axes];

    pub fn stream(self) -> &'static str {
        match self {
            Family::Probe => "probe",
            Family::Eval => "eval",
            Family::Complexity => "complexity",
            Family::Axes => "axes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub step: u64,
    pub eval_hash: String,
    pub uas: f64,
    pub continuous_sas: f64,
    pub heads: HeadAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub eval_hash: String,
    /// Masked-LM loss on held-out batches.
    pub heldout_loss: f64,
    pub pair_accuracy: f64,
    pub pair_continuous: f64,
    pub pair_by_phenomenon: Vec<(String, f64)>,
    pub pppl: f64,
    /// `(n, mean probability of the masked word)`
    pub ngram: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub step: u64,
    pub eval_hash: String,
    /// `None` when the CLS cloud is degenerate (coincident neighbours).
    pub twonn: Option<f64>,
    pub weight_norm: f64,
    pub fisher: f64,
    pub attention_entropy: f64,
    /// Mean attention at each signed offset from the query.
    pub attention_distance: Vec<(i64, f64)>,
    /// Linear CKA between CLS embeddings here and at the previous checkpoint.
    pub cka_prev: Option<f64>,
    /// Mean TVD between predictions here and at the previous checkpoint.
    pub tvd_prev: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxesRow {
    pub step: u64,
    pub origin: f64,
    pub init: f64,
    pub path: f64,
}

/// Fixed evaluation inputs derived from the config.
struct Inputs {
    data: Dataset,
    pairs: Vec<saslab_core::grammar::MinimalPair>,
    loss_batches: Vec<MlmBatch>,
    fisher_batches: Vec<MlmBatch>,
    attention_batch: MlmBatch,
    queries: Vec<MaskQuery>,
}

fn toks(s: &[ParsedSentence]) -> Vec<&[u32]> {
    s.iter().map(|p| p.tokens.as_slice()).collect()
}

impl Inputs {
    fn build(cfg: &ExperimentConfig) -> LabResult<Self> {
        let data = Dataset::build(cfg)?;
        let pairs = data.pairs(cfg)?;
        let e = &cfg.eval;
        let pool = toks(data.eval_pool(cfg));
        let max_len = cfg.model.max_len;
        let vocab = data.vocab.len();
        let chunk = |k: usize| -> Vec<&[u32]> { (0..e.batch_size).map(|i| pool[(k * e.batch_size + i) % pool.len()]).collect() };
        // Evaluation masks come from counters far above any training step.
        let masked = |k: usize| -> LabResult<MlmBatch> {
            let mut rng = rng_for(e.seed, Stream::Mask, u64::MAX - k as u64);
            Ok(mask_batch(&chunk(k), cfg.mask_rate, vocab, max_len, &mut rng)?)
        };
        let loss_batches = (0..e.loss_batches).map(masked).collect::<LabResult<_>>()?;
        let fisher_batches = (e.loss_batches..e.loss_batches + e.fisher_batches)
            .map(masked)
            .collect::<LabResult<_>>()?;
        let attention_batch = MlmBatch::unmasked(&chunk(0), max_len)?;
        let mut rng = rng_for(e.seed, Stream::Eval, u64::MAX);
        let queries = pool
            .iter()
            .take(64)
            .map(|s| {
                let mut tokens = Vec::with_capacity(s.len() + 2);
                tokens.push(CLS);
                tokens.extend_from_slice(s);
                tokens.push(SEP);
                let position = rng.random_range(1..=s.len());
                tokens[position] = MASK;
                MaskQuery { tokens, position }
            })
            .collect();
        Ok(Self {
            data,
            pairs,
            loss_batches,
            fisher_batches,
            attention_batch,
            queries,
        })
    }
}

fn probe_row(cfg: &ExperimentConfig, inp: &Inputs, model: &Model, step: u64) -> LabResult<ProbeRow> {
    let (sel, ev) = inp.data.probe_splits(cfg);
    let r = probe_model(model, sel, ev, cfg.eval.sas_averaging, step, "held_out")?;
    Ok(ProbeRow {
        step,
        eval_hash: cfg.eval_hash(),
        uas: r.uas,
        continuous_sas: r.continuous_sas,
        heads: r.assignment,
    })
}

fn eval_row(cfg: &ExperimentConfig, inp: &Inputs, model: &Model, step: u64) -> LabResult<EvalRow> {
    let e = &cfg.eval;
    let mut loss = 0.0;
    for b in &inp.loss_batches {
        loss += mlm_loss(&model.forward(b)?, b)?;
    }
    let pairs = minimal_pair_eval(model, &inp.pairs)?;
    let pool = toks(inp.data.eval_pool(cfg));
    let pppl_set = &pool[..e.pppl_sentences.min(pool.len())];
    let ngram = e
        .ngram
        .iter()
        .map(|&n| Ok((n, ngram_context_probe(model, &pool, n, e.ngram_samples, e.seed)?)))
        .collect::<LabResult<_>>()?;
    Ok(EvalRow {
        step,
        eval_hash: cfg.eval_hash(),
        heldout_loss: loss / inp.loss_batches.len().max(1) as f64,
        pair_accuracy: pairs.accuracy,
        pair_continuous: pairs.mean_continuous,
        pair_by_phenomenon: pairs.by_phenomenon.iter().map(|(p, a)| (p.label().to_string(), *a)).collect(),
        pppl: pppl(model, pppl_set, e.pppl_norm)?,
        ngram,
    })
}

/// State carried from one checkpoint to the next for the similarity metrics.
#[derive(Default)]
struct Previous {
    cls: Option<Vec<Vec<f64>>>,
    probs: Option<Vec<Vec<f64>>>,
}

fn complexity_row(
    cfg: &ExperimentConfig,
    inp: &Inputs,
    model: &Model,
    step: u64,
    prev: &mut Previous,
) -> LabResult<ComplexityRow> {
    let e = &cfg.eval;
    let pool = toks(inp.data.eval_pool(cfg));
    let cloud_set = &pool[..e.twonn_points.min(pool.len())];
    let cloud = cls_cloud(model, cloud_set, e.batch_size)?;
    let twonn = match twonn_id(&cloud, e.twonn_trim) {
        Ok(est) => Some(est.dimension),
        Err(saslab_core::Error::Degenerate(_)) => None,
        Err(err) => return Err(err.into()),
    };
    let attn = model.forward(&inp.attention_batch)?.attentions;
    let targets: Vec<(usize, usize)> = (0..attn.batch)
        .flat_map(|b| (1..attn.lengths[b] - 1).map(move |t| (b, t)))
        .collect();
    let probs: Vec<Vec<f64>> = model
        .log_probs(&inp.queries)?
        .into_iter()
        .map(|r| r.into_iter().map(f64::exp).collect())
        .collect();
    let cka_prev = match &prev.cls {
        Some(p) => Some(linear_cka(p, &cloud.points)?),
        None => None,
    };
    let tvd_prev = match &prev.probs {
        Some(p) if !p.is_empty() => {
            let mut s = 0.0;
            for (a, b) in p.iter().zip(&probs) {
                s += tvd(a, b)?;
            }
            Some(s / p.len() as f64)
        }
        _ => None,
    };
    let row = ComplexityRow {
        step,
        eval_hash: cfg.eval_hash(),
        twonn,
        weight_norm: weight_norm(&model.params, e.norm_subset)?,
        fisher: fisher_approx(model, &inp.fisher_batches)?,
        attention_entropy: attention_entropy(&attn)?,
        attention_distance: attention_by_distance(&attn, &targets, e.distance_max_offset)?,
        cka_prev,
        tvd_prev,
    };
    prev.cls = Some(cloud.points);
    prev.probs = Some(probs);
    Ok(row)
}

fn done_steps<T: serde::de::DeserializeOwned>(
    manifest: &RunManifest,
    family: Family,
    hash: &str,
    step_of: impl Fn(&T) -> (u64, String),
) -> LabResult<BTreeSet<u64>> {
    let path = manifest.stream(family.stream());
    let rows: Vec<T> = read_jsonl(&path)?;
    if rows.iter().any(|r| step_of(r).1 != hash) {
        // Evaluation settings changed: start the family over.
        write_atomic(&path, b"")?;
        return Ok(BTreeSet::new());
    }
    Ok(rows.iter().map(|r| step_of(r).0).collect())
}

/// Measures every checkpoint of a run for the requested families and
/// registers the streams in the manifest. Stored checkpoints are only read.
pub fn measure_run(manifest: &mut RunManifest, families: &[Family], quiet: bool) -> LabResult<()> {
    let clock = std::time::Instant::now();
    let cfg = manifest.config.clone();
    let hash = cfg.eval_hash();
    let steps = manifest.steps();
    let want = |f| families.contains(&f);
    let probe_done = done_steps(manifest, Family::Probe, &hash, |r: &ProbeRow| (r.step, r.eval_hash.clone()))?;
    let eval_done = done_steps(manifest, Family::Eval, &hash, |r: &EvalRow| (r.step, r.eval_hash.clone()))?;
    let cx_done = done_steps(manifest, Family::Complexity, &hash, |r: &ComplexityRow| {
        (r.step, r.eval_hash.clone())
    })?;
    let missing = |s: &u64| {
        (want(Family::Probe) && !probe_done.contains(s))
            || (want(Family::Eval) && !eval_done.contains(s))
            || (want(Family::Complexity) && !cx_done.contains(s))
    };
    let todo: Vec<u64> = steps.iter().copied().filter(missing).collect();
    if !todo.is_empty() {
        let inp = Inputs::build(&cfg)?;
        let vocab = inp.data.vocab.len();
        let mut prev = Previous::default();
        let mut last: Option<u64> = None;
        for &step in &todo {
            let model = load_model(manifest, step, vocab)?;
            if want(Family::Probe) && !probe_done.contains(&step) {
                append_jsonl(&manifest.stream("probe"), &[probe_row(&cfg, &inp, &model, step)?])?;
            }
            if want(Family::Eval) && !eval_done.contains(&step) {
                append_jsonl(&manifest.stream("eval"), &[eval_row(&cfg, &inp, &model, step)?])?;
            }
            if want(Family::Complexity) && !cx_done.contains(&step) {
                // The similarity metrics need the preceding checkpoint.
                let before = steps.iter().copied().filter(|&s| s < step).max();
                if let Some(b) = before.filter(|_| before != last) {
                    let pm = load_model(manifest, b, vocab)?;
                    complexity_row(&cfg, &inp, &pm, b, &mut prev)?;
                }
                let row = complexity_row(&cfg, &inp, &model, step, &mut prev)?;
                append_jsonl(&manifest.stream("complexity"), &[row])?;
                last = Some(step);
            }
            if !quiet {
                eprintln!("[{} seed {}] measured step {step}", cfg.name, manifest.seed);
            }
        }
    }
    if want(Family::Axes) {
        let rows = axes_rows(manifest)?;
        let path = manifest.stream("axes");
        write_atomic(&path, b"")?;
        append_jsonl(&path, &rows)?;
    }
    for f in Family::ALL {
        if want(f) && !manifest.streams.iter().any(|(n, _)| n == f.stream()) {
            manifest.streams.push((f.stream().into(), format!("{}.jsonl", f.stream())));
        }
    }
    manifest.measure_seconds += clock.elapsed().as_secs_f64();
    manifest.save()
}

/// Weight-space coordinates of every checkpoint, in step order.
pub fn axes_rows(manifest: &RunManifest) -> LabResult<Vec<AxesRow>> {
    let mut tracker = saslab_core::dynamics::AxisTracker::new();
    manifest
        .steps()
        .into_iter()
        .map(|step| {
            let w = manifest.load_params(step)?.flatten();
            let p = tracker.push(&w)?;
            Ok(AxesRow {
                step,
                origin: p.origin,
                init: p.init,
                path: p.path,
            })
        })
        .collect()
}

/// Reads a family's rows sorted by step, deduplicated.
pub fn load_rows<T: serde::de::DeserializeOwned>(manifest: &RunManifest, family: Family, step_of: impl Fn(&T) -> u64) -> LabResult<Vec<T>> {
    let mut rows: Vec<T> = read_jsonl(&manifest.stream(family.stream()))?;
    rows.sort_by_key(&step_of);
    rows.dedup_by_key(|r| step_of(r));
    Ok(rows)
}
