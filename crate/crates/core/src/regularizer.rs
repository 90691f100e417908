//! Syntactic attention penalty added to the masked-LM objective, and the
//! step schedule for its coefficient. Positive λ suppresses attention
//! between syntactically linked words, negative λ promotes it.

use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::ParsedSentence;
use crate::model::{mlm_loss, ForwardOutput, MlmBatch, Model, SentenceAttention};
use crate::numerics::{Graph, Tensor};

/// Strongest attention from word `i` to `j` plus strongest from `j` to `i`,
/// each maximized over all layers and heads. Word indices are 0-based and
/// `attn` has CLS/SEP units at the ends.
pub fn syntacticity_score(attn: &SentenceAttention, i: usize, j: usize) -> f64 {
    let (qi, qj) = (i + 1, j + 1);
    let mut fwd = f64::NEG_INFINITY;
    let mut bwd = f64::NEG_INFINITY;
    for l in 0..attn.layers {
        for h in 0..attn.heads {
            fwd = fwd.max(attn.get(l, h, qi, qj));
            bwd = bwd.max(attn.get(l, h, qj, qi));
        }
    }
    fwd + bwd
}

/// How the summed penalty is scaled before multiplying by λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the number of gold arcs in the batch.
    #[default]
    PerArc,
    /// Plain sum over arcs.
    RawSum,
}

fn check_parses(batch: &MlmBatch, parses: &[&ParsedSentence]) -> Result<()> {
    for b in 0..batch.batch {
        let p = parses.get(b).ok_or(Error::MissingParse(b))?;
        let words = &batch.original_ids[b * batch.seq + 1..b * batch.seq + batch.lengths[b] - 1];
        if p.tokens.as_slice() != words {
            return Err(Error::MissingParse(b));
        }
    }
    if parses.len() != batch.batch {
        return Err(Error::ShapeMismatch(format!(
            "{} parses for {} sentences",
            parses.len(),
            batch.batch
        )));
    }
    Ok(())
}

/// Sum of γ over the gold arcs of a batch, and the number of arcs.
pub fn gamma_sum(output: &ForwardOutput, batch: &MlmBatch, parses: &[&ParsedSentence]) -> Result<(f64, usize)> {
    check_parses(batch, parses)?;
    let mut sum = 0.0;
    let mut n = 0;
    for (b, p) in parses.iter().enumerate() {
        let attn = output.attentions.sentence(b);
        for (child, parent, _) in p.arcs() {
            sum += syntacticity_score(&attn, child, parent);
            n += 1;
        }
    }
    Ok((sum, n))
}

fn scale(norm: Normalization, arcs: usize) -> f64 {
    match norm {
        Normalization::PerArc if arcs > 0 => 1.0 / arcs as f64,
        Normalization::PerArc => 0.0,
        Normalization::RawSum => 1.0,
    }
}

/// Masked-LM loss plus λ times the (normalized) γ sum over gold arcs.
/// With λ = 0 this is exactly [`mlm_loss`].
pub fn regularized_loss(
    output: &ForwardOutput,
    batch: &MlmBatch,
    parses: &[&ParsedSentence],
    lambda: f64,
    norm: Normalization,
) -> Result<f64> {
    check_parses(batch, parses)?;
    let mlm = mlm_loss(output, batch)?;
    if lambda == 0.0 {
        return Ok(mlm);
    }
    let (g, n) = gamma_sum(output, batch, parses)?;
    Ok(mlm + lambda * scale(norm, n) * g)
}

/// Loss components and parameter gradients of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub mlm: f64,
    /// Mean γ over the batch's gold arcs (monitoring only).
    pub mean_gamma: f64,
    pub grads: Vec<Tensor>,
}

/// Builds the training objective on the tape and differentiates it.
pub fn loss_and_gradients(
    model: &Model,
    batch: &MlmBatch,
    parses: &[&ParsedSentence],
    lambda: f64,
    norm: Normalization,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<StepOutcome> {
    check_parses(batch, parses)?;
    if !lambda.is_finite() {
        return Err(Error::NonFinite("lambda"));
    }
    let mut g = Graph::new();
    let enc = model.encode(&mut g, batch, dropout_rng, true)?;
    let logits = model.head(&mut g, &enc, &batch.target_rows())?;
    let mlm = g.cross_entropy(logits, &batch.target_ids())?;
    let mlm_value = g.value(mlm).data()[0];

    // Flat indices into the stacked [layers, batch, heads, seq, seq] maps:
    // one row per arc direction, one column per (layer, head).
    let layout = enc.layout;
    let layers = enc.attentions.len();
    let (bs, heads, seq) = (layout.batch, layout.heads, layout.seq);
    let mut index = Vec::new();
    let mut rows = 0;
    for (b, p) in parses.iter().enumerate() {
        for (child, parent, _) in p.arcs() {
            for (qi, kj) in [(child + 1, parent + 1), (parent + 1, child + 1)] {
                for l in 0..layers {
                    for h in 0..heads {
                        index.push((((l * bs + b) * heads + h) * seq + qi) * seq + kj);
                    }
                }
                rows += 1;
            }
        }
    }
    let arcs = rows / 2;
    let mean_gamma;
    let loss = if rows == 0 {
        mean_gamma = 0.0;
        mlm
    } else {
        let stacked = g.stack(&enc.attentions)?;
        let picked = g.gather_elems(stacked, &index, alloc::vec![rows, layers * heads])?;
        let maxima = g.row_max(picked)?;
        let total = g.sum(maxima)?;
        mean_gamma = g.value(total).data()[0] / arcs as f64;
        if lambda == 0.0 {
            mlm
        } else {
            let pen = g.scale(total, lambda * scale(norm, arcs))?;
            g.add(mlm, pen)?
        }
    };
    let loss_value = g.value(loss).data()[0];
    let params = enc.params.clone();
    let mut grads = g.backward(loss)?;
    let grads = params
        .iter()
        .map(|&v| grads.take(v).ok_or(Error::Degenerate("missing parameter gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepOutcome {
        loss: loss_value,
        mlm: mlm_value,
        mean_gamma,
        grads,
    })
}

/// One stage of the λ schedule; it lasts until the next stage starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub start_step: u64,
    pub lambda: f64,
}

/// Piecewise-constant λ over training steps. The last stage never ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSchedule {
    pub stages: Vec<Stage>,
}

impl Default for RegularizerSchedule {
    fn default() -> Self {
        Self::constant(0.0)
    }
}

impl RegularizerSchedule {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let s = Self { stages };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(lambda: f64) -> Self {
        Self {
            stages: alloc::vec![Stage { start_step: 0, lambda }],
        }
    }

    /// `lambda` until `release_step`, zero afterwards.
    pub fn release(lambda: f64, release_step: u64) -> Self {
        if release_step == 0 {
            return Self::constant(0.0);
        }
        Self {
            stages: alloc::vec![
                Stage { start_step: 0, lambda },
                Stage {
                    start_step: release_step,
                    lambda: 0.0
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.stages.first().ok_or(Error::Empty("schedule"))?;
        if first.start_step != 0 {
            return Err(Error::InvalidConfig("first stage must start at step 0".into()));
        }
        for w in self.stages.windows(2) {
            if w[1].start_step <= w[0].start_step {
                return Err(Error::InvalidConfig(format!(
                    "stage starts {} and {} are not increasing",
                    w[0].start_step, w[1].start_step
                )));
            }
        }
        if self.stages.iter().any(|s| !s.lambda.is_finite()) {
            return Err(Error::NonFinite("lambda"));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        self.stages
            .iter()
            .rev()
            .find(|s| s.start_step <= step)
            .map_or(0.0, |s| s.lambda)
    }

    /// Whether any stage has a non-zero coefficient.
    pub fn is_active(&self) -> bool {
        self.stages.iter().any(|s| s.lambda != 0.0)
    }
}
