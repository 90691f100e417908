//! Attention-head parse probe: each head predicts, for every word, the other
//! word it is most strongly linked to in either direction; the best head per
//! relation is selected and scored by unlabeled attachment.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{ParsedSentence, Relation};
use crate::model::{MlmBatch, Model, SentenceAttention};
use crate::regularizer::syntacticity_score;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

/// Best head per relation with its accuracy on the selection sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAssignment {
    /// Indexed by `Relation::index`.
    pub heads: Vec<HeadId>,
    pub accuracy: Vec<f64>,
}

impl HeadAssignment {
    pub fn head(&self, r: Relation) -> HeadId {
        self.heads[r.index()]
    }
}

/// How the continuous score is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SasAveraging {
    /// Mean over all gold arcs pooled.
    #[default]
    Arcs,
    /// Mean over sentences of the per-sentence arc mean.
    Sentences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub step: u64,
    pub uas: f64,
    pub continuous_sas: f64,
    pub assignment: HeadAssignment,
    pub corpus_id: alloc::string::String,
}

/// Word-level attention: keys are summed within a word, queries averaged.
///
/// `spans` must partition the token range `1..len-1` in order. CLS and SEP
/// stay singleton units at the ends, so the output has `spans.len() + 2`
/// units and rows stay normalized.
pub fn word_level_attention(token: &SentenceAttention, spans: &[Range<usize>]) -> Result<SentenceAttention> {
    let len = token.len;
    if len < 2 {
        return Err(Error::InvalidSpans(format!("{len} tokens cannot hold CLS and SEP")));
    }
    let mut expect = 1;
    for s in spans {
        if s.start != expect || s.end <= s.start {
            return Err(Error::InvalidSpans(format!("span {s:?} where token {expect} was expected")));
        }
        expect = s.end;
    }
    if expect != len - 1 {
        return Err(Error::InvalidSpans(format!("spans end at {expect}, words end at {}", len - 1)));
    }
    let mut units: Vec<Range<usize>> = Vec::with_capacity(spans.len() + 2);
    units.push(0..1);
    units.extend(spans.iter().cloned());
    units.push(len - 1..len);
    let n = units.len();
    let mut out = SentenceAttention::zeros(token.layers, token.heads, n);
    for l in 0..token.layers {
        for h in 0..token.heads {
            for (a, qa) in units.iter().enumerate() {
                let inv = 1.0 / qa.len() as f64;
                for (b, kb) in units.iter().enumerate() {
                    let mut s = 0.0;
                    for i in qa.clone() {
                        let row = token.row(l, h, i);
                        for j in kb.clone() {
                            s += row[j];
                        }
                    }
                    out.set(l, h, a, b, s * inv);
                }
            }
        }
    }
    Ok(out)
}

/// Singleton spans for a sentence of `n` words.
pub fn singleton_spans(n: usize) -> Vec<Range<usize>> {
    (1..=n).map(|t| t..t + 1).collect()
}

/// Parent predicted for word `i` (0-based) by one head: the other word `j`
/// maximizing `max(α_ij, α_ji)`, smallest `j` on ties.
///
/// `attn` is word-level with CLS/SEP units at the ends; they are never
/// candidates.
pub fn head_parent_prediction(attn: &SentenceAttention, head: HeadId, i: usize) -> usize {
    let n = attn.len - 2;
    let qi = i + 1;
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for j in 0..n {
        if j == i {
            continue;
        }
        let qj = j + 1;
        let v = attn.get(head.layer, head.head, qi, qj).max(attn.get(head.layer, head.head, qj, qi));
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

fn check_pair(attn: &[SentenceAttention], parses: &[ParsedSentence]) -> Result<()> {
    if attn.len() != parses.len() {
        return Err(Error::MissingParse(attn.len().min(parses.len())));
    }
    if parses.is_empty() {
        return Err(Error::Empty("probe corpus"));
    }
    for (k, (a, p)) in attn.iter().zip(parses).enumerate() {
        if a.len != p.len() + 2 {
            return Err(Error::ShapeMismatch(format!(
                "sentence {k}: {} attention units for {} words",
                a.len,
                p.len()
            )));
        }
    }
    Ok(())
}

/// Correct/total counts per relation for every head: `[layer][head][relation]`.
fn head_counts(attn: &[SentenceAttention], parses: &[ParsedSentence]) -> (Vec<[usize; 6]>, [usize; 6]) {
    let (layers, heads) = (attn[0].layers, attn[0].heads);
    let mut correct = alloc::vec![[0usize; 6]; layers * heads];
    let mut total = [0usize; 6];
    for (a, p) in attn.iter().zip(parses) {
        if p.len() < 2 {
            continue;
        }
        for (child, parent, rel) in p.arcs() {
            total[rel.index()] += 1;
            for l in 0..layers {
                for h in 0..heads {
                    if head_parent_prediction(a, HeadId { layer: l, head: h }, child) == parent {
                        correct[l * heads + h][rel.index()] += 1;
                    }
                }
            }
        }
    }
    (correct, total)
}

/// Best head per relation by parent-prediction accuracy; ties go to the
/// lower layer, then the lower head.
pub fn select_best_heads(attn: &[SentenceAttention], parses: &[ParsedSentence]) -> Result<HeadAssignment> {
    check_pair(attn, parses)?;
    let heads = attn[0].heads;
    let (correct, total) = head_counts(attn, parses);
    let mut out = HeadAssignment {
        heads: Vec::with_capacity(6),
        accuracy: Vec::with_capacity(6),
    };
    for r in Relation::ALL {
        let n = total[r.index()];
        if n == 0 {
            return Err(Error::MissingRelation(r.label()));
        }
        let mut best = 0;
        for (k, c) in correct.iter().enumerate() {
            if c[r.index()] > correct[best][r.index()] {
                best = k;
            }
        }
        out.heads.push(HeadId {
            layer: best / heads,
            head: best % heads,
        });
        out.accuracy.push(correct[best][r.index()] as f64 / n as f64);
    }
    Ok(out)
}

/// Unlabeled attachment score pooled over all arcs, each scored with its
/// relation's assigned head.
pub fn uas(attn: &[SentenceAttention], parses: &[ParsedSentence], assignment: &HeadAssignment) -> Result<f64> {
    check_pair(attn, parses)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (a, p) in attn.iter().zip(parses) {
        for (child, parent, rel) in p.arcs() {
            total += 1;
            if p.len() >= 2 && head_parent_prediction(a, assignment.head(rel), child) == parent {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("gold arcs"));
    }
    Ok(correct as f64 / total as f64)
}

/// Mean syntacticity score over gold arcs, in `[0, 2]`.
pub fn continuous_sas(attn: &[SentenceAttention], parses: &[ParsedSentence], mode: SasAveraging) -> Result<f64> {
    check_pair(attn, parses)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, p) in attn.iter().zip(parses) {
        let mut s = 0.0;
        let mut c = 0usize;
        for (child, parent, _) in p.arcs() {
            s += syntacticity_score(a, child, parent);
            c += 1;
        }
        match mode {
            SasAveraging::Arcs => {
                sum += s;
                count += c;
            }
            SasAveraging::Sentences if c > 0 => {
                sum += s / c as f64;
                count += 1;
            }
            SasAveraging::Sentences => {}
        }
    }
    if count == 0 {
        return Err(Error::Empty("gold arcs"));
    }
    Ok(sum / count as f64)
}

/// Word-level attention of the model on each sentence, with dropout off.
///
/// `spans`, if given, maps each token sequence onto its words; otherwise
/// every token is its own word.
pub fn corpus_attention(
    model: &Model,
    token_seqs: &[&[u32]],
    spans: Option<&[Vec<Range<usize>>]>,
    batch_size: usize,
) -> Result<Vec<SentenceAttention>> {
    let mut out = Vec::with_capacity(token_seqs.len());
    for (c, chunk) in token_seqs.chunks(batch_size.max(1)).enumerate() {
        let batch = MlmBatch::unmasked(chunk, model.config.max_len)?;
        let fwd = model.forward(&batch)?;
        for (b, seq) in chunk.iter().enumerate() {
            let tok = fwd.attentions.sentence(b);
            let k = c * batch_size.max(1) + b;
            let w = match spans {
                Some(s) => word_level_attention(&tok, &s[k])?,
                None => word_level_attention(&tok, &singleton_spans(seq.len()))?,
            };
            out.push(w);
        }
    }
    Ok(out)
}

/// Selects heads on `selection` and scores UAS and continuous SAS on
/// `evaluation` (pass the same slice twice for same-split probing).
pub fn probe_model(
    model: &Model,
    selection: &[ParsedSentence],
    evaluation: &[ParsedSentence],
    averaging: SasAveraging,
    step: u64,
    corpus_id: &str,
) -> Result<ProbeResult> {
    let toks = |c: &[ParsedSentence]| -> Vec<Vec<u32>> { c.iter().map(|s| s.tokens.clone()).collect() };
    let sel_t = toks(selection);
    let sel_refs: Vec<&[u32]> = sel_t.iter().map(|v| v.as_slice()).collect();
    let sel_attn = corpus_attention(model, &sel_refs, None, 64)?;
    let assignment = select_best_heads(&sel_attn, selection)?;
    let eval_attn = if core::ptr::eq(selection, evaluation) {
        sel_attn
    } else {
        let ev_t = toks(evaluation);
        let ev_refs: Vec<&[u32]> = ev_t.iter().map(|v| v.as_slice()).collect();
        corpus_attention(model, &ev_refs, None, 64)?
    };
    Ok(ProbeResult {
        step,
        uas: uas(&eval_attn, evaluation, &assignment)?,
        continuous_sas: continuous_sas(&eval_attn, evaluation, averaging)?,
        assignment,
        corpus_id: corpus_id.into(),
    })
}
