use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generate::{sample_sentence, Clause, Lexicon};
use super::vocab::{Category, Vocabulary};
use super::{CorpusConfig, ParsedSentence, Relation};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phenomenon {
    SubjectVerbAgreement,
    DeterminerNounAgreement,
    ReflexiveAgreement,
}

impl Phenomenon {
    pub const ALL: [Phenomenon; 3] = [
        Phenomenon::SubjectVerbAgreement,
        Phenomenon::DeterminerNounAgreement,
        Phenomenon::ReflexiveAgreement,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Phenomenon::SubjectVerbAgreement => "subject_verb",
            Phenomenon::DeterminerNounAgreement => "determiner_noun",
            Phenomenon::ReflexiveAgreement => "reflexive",
        }
    }
}

/// A grammatical sentence and a copy corrupted at exactly one position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub acceptable: ParsedSentence,
    pub unacceptable: Vec<u32>,
    pub phenomenon: Phenomenon,
    pub position: usize,
}

const MAX_ATTEMPTS: usize = 1000;

/// Generates `count` pairs cycling through the three phenomena.
pub fn generate_minimal_pairs(
    config: &CorpusConfig,
    vocab: &Vocabulary,
    count: usize,
    seed: u64,
) -> Result<Vec<MinimalPair>> {
    config.validate()?;
    let lex = Lexicon::new(vocab);
    let has_marked = |n| {
        vocab
            .words
            .iter()
            .any(|w| w.category == Category::Determiner && w.number == Some(n))
    };
    if count >= 2 && !(has_marked(super::Number::Singular) && has_marked(super::Number::Plural)) {
        return Err(Error::VocabularyTooSmall(
            "determiner agreement pairs need number-marked determiners of both numbers".into(),
        ));
    }
    (0..count)
        .map(|i| {
            let phenomenon = Phenomenon::ALL[i % 3];
            let mut rng = rng_for(seed, Stream::Pairs, i as u64);
            for _ in 0..MAX_ATTEMPTS {
                let forced = match phenomenon {
                    Phenomenon::ReflexiveAgreement => Some(Clause::Reflexive),
                    _ => None,
                };
                let s = sample_sentence(&lex, vocab, config, &mut rng, forced)?;
                let candidates: Vec<usize> = match phenomenon {
                    Phenomenon::SubjectVerbAgreement => s
                        .parent
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| p.is_none())
                        .map(|(i, _)| i)
                        .collect(),
                    Phenomenon::DeterminerNounAgreement => s
                        .arcs()
                        .filter(|&(c, _, r)| r == Relation::Det && vocab.number(s.tokens[c]).is_some())
                        .map(|(c, _, _)| c)
                        .collect(),
                    Phenomenon::ReflexiveAgreement => (0..s.len())
                        .filter(|&j| vocab.word(s.tokens[j]).is_some_and(|w| w.reflexive))
                        .collect(),
                };
                if candidates.is_empty() {
                    continue;
                }
                let position = candidates[rng.random_range(0..candidates.len())];
                let original = s.tokens[position];
                let replacement = match phenomenon {
                    Phenomenon::DeterminerNounAgreement => {
                        let target = vocab.number(original).map(|n| n.flip());
                        let opts = vocab.ids_where(|w| w.category == Category::Determiner && w.number == target);
                        opts[rng.random_range(0..opts.len())]
                    }
                    _ => vocab.flip_number(original).ok_or_else(|| {
                        Error::VocabularyTooSmall("word without a number-contrasting form".into())
                    })?,
                };
                let mut unacceptable = s.tokens.clone();
                unacceptable[position] = replacement;
                return Ok(MinimalPair {
                    acceptable: s,
                    unacceptable,
                    phenomenon,
                    position,
                });
            }
            Err(Error::VocabularyTooSmall(alloc::format!(
                "could not build a {} pair",
                phenomenon.label()
            )))
        })
        .collect()
}
