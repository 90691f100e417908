//! Pseudo-log-likelihood scoring, minimal-pair accuracy and the n-gram
//! context probe, all over any [`MaskedLm`].

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{MinimalPair, Phenomenon, CLS, MASK, SEP};
use crate::model::{MaskQuery, MaskedLm};
use crate::rng::{rng_for, Stream};

fn check_ids(sentence: &[u32], vocab: usize) -> Result<()> {
    match sentence.iter().find(|&&t| t as usize >= vocab) {
        Some(t) => Err(Error::OutOfRange(format!("token {t} with vocabulary {vocab}"))),
        None => Ok(()),
    }
}

fn queries_for(sentence: &[u32]) -> Vec<MaskQuery> {
    let mut base = Vec::with_capacity(sentence.len() + 2);
    base.push(CLS);
    base.extend_from_slice(sentence);
    base.push(SEP);
    (1..=sentence.len())
        .map(|p| {
            let mut tokens = base.clone();
            tokens[p] = MASK;
            MaskQuery { tokens, position: p }
        })
        .collect()
}

/// Per-position masked log-likelihoods `log P(x_i | x_{\i})` of each sentence.
pub fn masked_log_likelihoods<M: MaskedLm + ?Sized>(model: &M, sentences: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
    let mut queries = Vec::new();
    for s in sentences {
        if s.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        check_ids(s, model.vocab_size())?;
        queries.extend(queries_for(s));
    }
    let lp = model.log_probs(&queries)?;
    let mut out = Vec::with_capacity(sentences.len());
    let mut k = 0;
    for s in sentences {
        out.push(s.iter().enumerate().map(|(i, &w)| lp[k + i][w as usize]).collect());
        k += s.len();
    }
    Ok(out)
}

/// Pseudo-log-likelihood of each sentence.
pub fn pll_batch<M: MaskedLm + ?Sized>(model: &M, sentences: &[&[u32]]) -> Result<Vec<f64>> {
    Ok(masked_log_likelihoods(model, sentences)?
        .into_iter()
        .map(|v| v.iter().sum())
        .collect())
}

pub fn pll<M: MaskedLm + ?Sized>(model: &M, sentence: &[u32]) -> Result<f64> {
    Ok(pll_batch(model, &[sentence])?[0])
}

/// Denominator of the pseudo-perplexity exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpplNorm {
    /// Total number of scored tokens.
    #[default]
    Tokens,
    /// Number of sentences.
    Documents,
}

/// `exp(-ΣPLL / N)`.
pub fn pppl<M: MaskedLm + ?Sized>(model: &M, corpus: &[&[u32]], norm: PpplNorm) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let total: f64 = pll_batch(model, corpus)?.iter().sum();
    let n = match norm {
        PpplNorm::Tokens => corpus.iter().map(|s| s.len()).sum::<usize>(),
        PpplNorm::Documents => corpus.len(),
    };
    Ok(libm::exp(-total / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pll_acceptable: f64,
    pub pll_unacceptable: f64,
    pub correct: bool,
    pub continuous: f64,
}

/// `p / (p + p̄)` with `p = exp(PLL/len)` for each member, computed in log
/// space.
pub fn continuous_score(pll_a: f64, len_a: usize, pll_u: f64, len_u: usize) -> Result<f64> {
    let a = pll_a / len_a as f64;
    let u = pll_u / len_u as f64;
    if a == f64::NEG_INFINITY && u == f64::NEG_INFINITY || a.is_nan() || u.is_nan() {
        return Err(Error::Degenerate("both pseudo-likelihoods vanish".into()));
    }
    let s = 1.0 / (1.0 + libm::exp(u - a));
    Ok(s)
}

impl PairScore {
    pub fn new(pll_a: f64, len_a: usize, pll_u: f64, len_u: usize) -> Result<Self> {
        Ok(Self {
            pll_acceptable: pll_a,
            pll_unacceptable: pll_u,
            // Ties count as failures.
            correct: pll_a > pll_u,
            continuous: continuous_score(pll_a, len_a, pll_u, len_u)?,
        })
    }
}

pub fn continuous_pair_score<M: MaskedLm + ?Sized>(model: &M, pair: &MinimalPair) -> Result<f64> {
    let p = pll_batch(model, &[&pair.acceptable.tokens, &pair.unacceptable])?;
    continuous_score(p[0], pair.acceptable.len(), p[1], pair.unacceptable.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub accuracy: f64,
    /// Accuracy per phenomenon, for those present.
    pub by_phenomenon: Vec<(Phenomenon, f64)>,
    pub mean_continuous: f64,
    pub scores: Vec<PairScore>,
}

/// Fraction of pairs whose acceptable member has strictly higher PLL.
pub fn minimal_pair_eval<M: MaskedLm + ?Sized>(model: &M, pairs: &[MinimalPair]) -> Result<PairEval> {
    if pairs.is_empty() {
        return Err(Error::Empty("minimal pairs"));
    }
    let mut sents: Vec<&[u32]> = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        sents.push(&p.acceptable.tokens);
        sents.push(&p.unacceptable);
    }
    let plls = pll_batch(model, &sents)?;
    let scores = pairs
        .iter()
        .enumerate()
        .map(|(k, p)| PairScore::new(plls[2 * k], p.acceptable.len(), plls[2 * k + 1], p.unacceptable.len()))
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    let accuracy = scores.iter().filter(|s| s.correct).count() as f64 / n;
    let mean_continuous = scores.iter().map(|s| s.continuous).sum::<f64>() / n;
    let by_phenomenon = Phenomenon::ALL
        .iter()
        .filter_map(|&ph| {
            let sel: Vec<_> = pairs.iter().zip(&scores).filter(|(p, _)| p.phenomenon == ph).collect();
            (!sel.is_empty()).then(|| (ph, sel.iter().filter(|(_, s)| s.correct).count() as f64 / sel.len() as f64))
        })
        .collect();
    Ok(PairEval {
        accuracy,
        by_phenomenon,
        mean_continuous,
        scores,
    })
}

/// Mean probability of a masked word given only an `n+1`-word window
/// around it (`CLS window SEP`). Sentences are drawn with replacement from
/// those long enough.
pub fn ngram_context_probe<M: MaskedLm + ?Sized>(
    model: &M,
    corpus: &[&[u32]],
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    for s in corpus {
        check_ids(s, model.vocab_size())?;
    }
    let eligible: Vec<&[u32]> = corpus.iter().copied().filter(|s| s.len() > n).collect();
    if eligible.is_empty() {
        return Err(Error::Empty("sentences long enough for the window"));
    }
    if samples == 0 {
        return Err(Error::InvalidConfig(format!("{samples} samples")));
    }
    let mut rng = rng_for(seed, Stream::Eval, n as u64);
    let mut queries = Vec::with_capacity(samples);
    let mut targets = Vec::with_capacity(samples);
    for _ in 0..samples {
        let s = eligible[rng.random_range(0..eligible.len())];
        let start = rng.random_range(0..=s.len() - (n + 1));
        let window = &s[start..start + n + 1];
        let m = rng.random_range(0..=n);
        let mut tokens = Vec::with_capacity(n + 3);
        tokens.push(CLS);
        tokens.extend_from_slice(window);
        tokens.push(SEP);
        targets.push(window[m]);
        tokens[m + 1] = MASK;
        queries.push(MaskQuery { tokens, position: m + 1 });
    }
    let lp = model.log_probs(&queries)?;
    Ok(lp.iter().zip(&targets).map(|(l, &t)| libm::exp(l[t as usize])).sum::<f64>() / samples as f64)
}
