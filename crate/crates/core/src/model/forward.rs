use alloc::vec::Vec;

use rand::{Rng, RngCore};

use super::{AttentionTensor, MlmBatch, ModelConfig, ModelParams, IGNORE};
use crate::error::{Error, Result};
use crate::grammar::{MASK, PAD};
use crate::numerics::{AttentionLayout, Graph, Tensor, Var};

const PER_LAYER: usize = 16;
const EMBED: usize = 4;

/// Encoder weights plus their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Tape handles produced by [`Model::encode`].
#[derive(Debug, Clone)]
pub struct EncoderVars {
    /// One handle per parameter tensor, in parameter order.
    pub params: Vec<Var>,
    /// Final hidden states `[batch * seq, d_model]`.
    pub hidden: Var,
    /// Per-layer attention weights `[batch, heads, seq, seq]`.
    pub attentions: Vec<Var>,
    pub layout: AttentionLayout,
}

/// Values of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[batch, seq, vocab]`
    pub logits: Tensor,
    pub attentions: AttentionTensor,
    /// Final hidden state of the CLS token for each sequence.
    pub cls: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    fn layer_base(l: usize) -> usize {
        EMBED + PER_LAYER * l
    }

    fn head_base(&self) -> usize {
        EMBED + PER_LAYER * self.config.layers
    }

    fn dropout(
        &self,
        g: &mut Graph,
        x: Var,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }

    fn affine_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let n = g.mul_row(n, gain)?;
        g.add_row(n, bias)
    }

    fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.matmul(x, w, false)?;
        g.add_row(y, b)
    }

    /// Runs the encoder on the tape. Parameters are trainable leaves when
    /// `trainable`; dropout is applied only when `dropout_rng` is given.
    pub fn encode(
        &self,
        g: &mut Graph,
        batch: &MlmBatch,
        mut dropout_rng: Option<&mut dyn RngCore>,
        trainable: bool,
    ) -> Result<EncoderVars> {
        let cfg = &self.config;
        if batch.seq > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq,
                max: cfg.max_len,
            });
        }
        let v = cfg.vocab_size as u32;
        if let Some(&bad) = batch.input_ids.iter().find(|&&t| t >= v) {
            return Err(Error::OutOfRange(alloc::format!("token {bad} with vocabulary {v}")));
        }
        let params: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let layout = AttentionLayout {
            batch: batch.batch,
            seq: batch.seq,
            heads: cfg.heads,
        };
        let ids: Vec<usize> = batch.input_ids.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..batch.batch * batch.seq).map(|r| r % batch.seq).collect();
        let tok = g.gather_rows(params[0], &ids)?;
        let pe = g.gather_rows(params[1], &pos)?;
        let x = g.add(tok, pe)?;
        let x = Self::affine_norm(g, x, params[2], params[3])?;
        let mut x = self.dropout(g, x, &mut dropout_rng)?;
        let mut attentions = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = &params[Self::layer_base(l)..Self::layer_base(l + 1)];
            let q = Self::linear(g, x, p[0], p[1])?;
            let k = Self::linear(g, x, p[2], p[3])?;
            let val = Self::linear(g, x, p[4], p[5])?;
            let a = g.attention_weights(q, k, layout, &batch.lengths)?;
            attentions.push(a);
            let ctx = g.attention_mix(a, val, layout)?;
            let o = Self::linear(g, ctx, p[6], p[7])?;
            let o = self.dropout(g, o, &mut dropout_rng)?;
            let r = g.add(x, o)?;
            x = Self::affine_norm(g, r, p[8], p[9])?;
            let h = Self::linear(g, x, p[10], p[11])?;
            let h = g.gelu(h)?;
            let f = Self::linear(g, h, p[12], p[13])?;
            let f = self.dropout(g, f, &mut dropout_rng)?;
            let r = g.add(x, f)?;
            x = Self::affine_norm(g, r, p[14], p[15])?;
        }
        Ok(EncoderVars {
            params,
            hidden: x,
            attentions,
            layout,
        })
    }

    /// Output-head logits `[rows.len(), vocab]` for selected hidden rows.
    pub fn head(&self, g: &mut Graph, enc: &EncoderVars, rows: &[usize]) -> Result<Var> {
        let b = self.head_base();
        let p = &enc.params;
        let h = g.gather_rows(enc.hidden, rows)?;
        let t = Self::linear(g, h, p[b], p[b + 1])?;
        let t = g.gelu(t)?;
        let t = Self::affine_norm(g, t, p[b + 2], p[b + 3])?;
        let out_w = if self.config.tie_output { p[0] } else { p[b + 5] };
        let logits = g.matmul(t, out_w, true)?;
        g.add_row(logits, p[b + 4])
    }

    /// Deterministic inference pass (no dropout) over every position.
    pub fn forward(&self, batch: &MlmBatch) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, batch, None, false)?;
        let rows: Vec<usize> = (0..batch.batch * batch.seq).collect();
        let logits = self.head(&mut g, &enc, &rows)?;
        let logits = g
            .value(logits)
            .clone()
            .reshape(alloc::vec![batch.batch, batch.seq, self.config.vocab_size])?;
        let attentions = collect_attention(&g, &enc, &batch.lengths);
        let hidden = g.value(enc.hidden);
        let d = self.config.d_model;
        let cls = (0..batch.batch)
            .map(|b| hidden.data()[b * batch.seq * d..b * batch.seq * d + d].to_vec())
            .collect();
        Ok(ForwardOutput {
            logits,
            attentions,
            cls,
        })
    }
}

/// Copies per-layer attention from the tape into batch-major layout.
pub(crate) fn collect_attention(g: &Graph, enc: &EncoderVars, lengths: &[usize]) -> AttentionTensor {
    let AttentionLayout { batch, seq, heads } = enc.layout;
    let layers = enc.attentions.len();
    let block = heads * seq * seq;
    let mut data = alloc::vec![0.0; batch * layers * block];
    for (l, &a) in enc.attentions.iter().enumerate() {
        let src = g.value(a).data();
        for b in 0..batch {
            let dst = (b * layers + l) * block;
            data[dst..dst + block].copy_from_slice(&src[b * block..(b + 1) * block]);
        }
    }
    AttentionTensor {
        batch,
        layers,
        heads,
        seq,
        lengths: lengths.to_vec(),
        data,
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| libm::exp(x - m)).sum();
    let lz = m + libm::log(z);
    row.iter().map(|&x| x - lz).collect()
}

/// Mean cross-entropy over the selected positions of a batch.
pub fn mlm_loss(output: &ForwardOutput, batch: &MlmBatch) -> Result<f64> {
    if batch.mask_positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let v = output.logits.cols();
    let mut total = 0.0;
    for &(b, t) in &batch.mask_positions {
        let r = b * batch.seq + t;
        let label = batch.labels[r];
        if label == IGNORE {
            return Err(Error::OutOfRange(alloc::format!("no label at ({b}, {t})")));
        }
        let lp = log_softmax(&output.logits.data()[r * v..(r + 1) * v]);
        total -= lp[label as usize];
    }
    Ok(total / batch.mask_positions.len() as f64)
}

/// A full token sequence (CLS .. SEP) with one position to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskQuery {
    pub tokens: Vec<u32>,
    pub position: usize,
}

/// Anything that yields a predictive distribution at a position.
pub trait MaskedLm {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the vocabulary at each query position.
    fn log_probs(&self, queries: &[MaskQuery]) -> Result<Vec<Vec<f64>>>;
}

const QUERY_CHUNK: usize = 64;

impl MaskedLm for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn log_probs(&self, queries: &[MaskQuery]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(QUERY_CHUNK) {
            let seq = chunk.iter().map(|q| q.tokens.len()).max().unwrap_or(0);
            let mut ids = alloc::vec![PAD; chunk.len() * seq];
            let mut lengths = Vec::with_capacity(chunk.len());
            let mut rows = Vec::with_capacity(chunk.len());
            for (b, q) in chunk.iter().enumerate() {
                if q.position >= q.tokens.len() {
                    return Err(Error::OutOfRange(alloc::format!(
                        "position {} of {} tokens",
                        q.position,
                        q.tokens.len()
                    )));
                }
                ids[b * seq..b * seq + q.tokens.len()].copy_from_slice(&q.tokens);
                lengths.push(q.tokens.len());
                rows.push(b * seq + q.position);
            }
            let batch = MlmBatch {
                batch: chunk.len(),
                seq,
                input_ids: ids.clone(),
                original_ids: ids,
                labels: alloc::vec![IGNORE; chunk.len() * seq],
                lengths,
                mask_positions: Vec::new(),
            };
            let mut g = Graph::new();
            let enc = self.encode(&mut g, &batch, None, false)?;
            let logits = self.head(&mut g, &enc, &rows)?;
            let v = self.config.vocab_size;
            for row in g.value(logits).data().chunks(v) {
                out.push(log_softmax(row));
            }
        }
        Ok(out)
    }
}

/// Probability of the original word at `word_index` when it alone is masked.
pub fn token_likelihood<M: MaskedLm + ?Sized>(model: &M, sentence: &[u32], word_index: usize) -> Result<f64> {
    if word_index >= sentence.len() {
        return Err(Error::OutOfRange(alloc::format!(
            "word {word_index} of {}",
            sentence.len()
        )));
    }
    let mut tokens = Vec::with_capacity(sentence.len() + 2);
    tokens.push(crate::grammar::CLS);
    tokens.extend_from_slice(sentence);
    tokens.push(crate::grammar::SEP);
    tokens[word_index + 1] = MASK;
    let lp = model.log_probs(&[MaskQuery {
        tokens,
        position: word_index + 1,
    }])?;
    Ok(libm::exp(lp[0][sentence[word_index] as usize]))
}
