//! Corpus, held-out splits and minimal pairs shared by training and
//! evaluation. Everything here is a pure function of the config.

use saslab_core::grammar::{generate_corpus, generate_minimal_pairs, MinimalPair, ParsedSentence, Vocabulary};

use crate::config::ExperimentConfig;
use crate::error::LabResult;

pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<ParsedSentence>,
    pub held_out: Vec<ParsedSentence>,
}

impl Dataset {
    /// The training corpus is the first `corpus.size` sentences of one
    /// generator stream; the next `eval.held_out` are held out.
    pub fn build(config: &ExperimentConfig) -> LabResult<Self> {
        let vocab = Vocabulary::build(&config.corpus)?;
        let mut cc = config.corpus.clone();
        cc.size += config.eval.held_out;
        let mut train = generate_corpus(&cc, &vocab)?;
        let held_out = train.split_off(config.corpus.size);
        Ok(Self { vocab, train, held_out })
    }

    /// Head-selection and evaluation probe splits; identical slices in
    /// same-split mode.
    pub fn probe_splits<'a>(&'a self, config: &ExperimentConfig) -> (&'a [ParsedSentence], &'a [ParsedSentence]) {
        let n = config.eval.probe_sentences.min(self.held_out.len());
        let sel = &self.held_out[..n];
        if config.eval.same_split {
            (sel, sel)
        } else {
            let end = (2 * n).min(self.held_out.len());
            (sel, &self.held_out[n..end])
        }
    }

    /// Held-out sentences after the probe splits, for loss, PPPL and the
    /// complexity metrics.
    pub fn eval_pool(&self, config: &ExperimentConfig) -> &[ParsedSentence] {
        let used = if config.eval.same_split { 1 } else { 2 } * config.eval.probe_sentences;
        let pool = &self.held_out[used.min(self.held_out.len())..];
        if pool.is_empty() {
            &self.held_out
        } else {
            pool
        }
    }

    pub fn pairs(&self, config: &ExperimentConfig) -> LabResult<Vec<MinimalPair>> {
        Ok(generate_minimal_pairs(&config.corpus, &self.vocab, config.eval.pairs, config.eval.seed)?)
    }
}
