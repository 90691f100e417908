use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Category, Number, Vocabulary};
use super::{parse, CorpusConfig, ParsedSentence};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Clause {
    Transitive,
    Intransitive,
    Reflexive,
}

/// Word ids grouped for sampling.
pub(crate) struct Lexicon {
    det: [Vec<u32>; 2],
    possessives: Vec<u32>,
    nouns: [Vec<u32>; 2],
    nouns_by_class: Vec<[Vec<u32>; 2]>,
    reflexive: [Vec<u32>; 2],
    verbs: [Vec<u32>; 2],
    adjectives: Vec<u32>,
    adjectives_by_class: Vec<Vec<u32>>,
    adverbs: Vec<u32>,
}

fn slot(n: Number) -> usize {
    match n {
        Number::Singular => 0,
        Number::Plural => 1,
    }
}

impl Lexicon {
    pub(crate) fn new(vocab: &Vocabulary) -> Self {
        let classes = vocab.semantic_classes as usize;
        let mut lex = Lexicon {
            det: [Vec::new(), Vec::new()],
            possessives: Vec::new(),
            nouns: [Vec::new(), Vec::new()],
            nouns_by_class: (0..classes).map(|_| [Vec::new(), Vec::new()]).collect(),
            reflexive: [Vec::new(), Vec::new()],
            verbs: [Vec::new(), Vec::new()],
            adjectives: Vec::new(),
            adjectives_by_class: (0..classes).map(|_| Vec::new()).collect(),
            adverbs: Vec::new(),
        };
        for w in &vocab.words {
            match w.category {
                Category::Determiner => {
                    for n in [Number::Singular, Number::Plural] {
                        if w.number.is_none() || w.number == Some(n) {
                            lex.det[slot(n)].push(w.id);
                        }
                    }
                }
                Category::Possessive => lex.possessives.push(w.id),
                Category::Noun => {
                    let n = slot(w.number.expect("nouns carry number"));
                    if w.reflexive {
                        lex.reflexive[n].push(w.id);
                    } else {
                        lex.nouns[n].push(w.id);
                        if let Some(c) = w.class {
                            lex.nouns_by_class[c as usize][n].push(w.id);
                        }
                    }
                }
                Category::Verb => lex.verbs[slot(w.number.expect("verbs carry number"))].push(w.id),
                Category::Adjective => {
                    lex.adjectives.push(w.id);
                    if let Some(c) = w.class {
                        lex.adjectives_by_class[c as usize].push(w.id);
                    }
                }
                Category::Adverb => lex.adverbs.push(w.id),
                Category::Special => {}
            }
        }
        lex
    }
}

fn choose(rng: &mut ChaCha8Rng, xs: &[u32]) -> u32 {
    xs[rng.random_range(0..xs.len())]
}

fn random_number(rng: &mut ChaCha8Rng) -> Number {
    if rng.random_bool(0.5) {
        Number::Singular
    } else {
        Number::Plural
    }
}

struct Sampler<'a> {
    lex: &'a Lexicon,
    vocab: &'a Vocabulary,
    cfg: &'a CorpusConfig,
}

impl Sampler<'_> {
    fn noun_phrase(&self, rng: &mut ChaCha8Rng, number: Number, class: Option<u32>, out: &mut Vec<u32>) {
        let n = slot(number);
        let noun = match class {
            Some(c)
                if !self.lex.nouns_by_class[c as usize][n].is_empty()
                    && rng.random_bool(self.cfg.selection_strength) =>
            {
                choose(rng, &self.lex.nouns_by_class[c as usize][n])
            }
            _ => choose(rng, &self.lex.nouns[n]),
        };
        let use_poss = !self.lex.possessives.is_empty() && rng.random_bool(self.cfg.possessive_prob);
        out.push(if use_poss {
            choose(rng, &self.lex.possessives)
        } else {
            choose(rng, &self.lex.det[n])
        });
        let noun_class = self.vocab.word(noun).and_then(|w| w.class);
        let mut k = 0;
        while k < self.cfg.max_adjectives && !self.lex.adjectives.is_empty() && rng.random_bool(self.cfg.adjective_prob) {
            let pool = noun_class
                .map(|c| &self.lex.adjectives_by_class[c as usize])
                .filter(|p| !p.is_empty() && rng.random_bool(self.cfg.selection_strength))
                .unwrap_or(&self.lex.adjectives);
            out.push(choose(rng, pool));
            k += 1;
        }
        out.push(noun);
    }

    fn clause(&self, rng: &mut ChaCha8Rng, forced: Option<Clause>) -> Vec<u32> {
        let w = self.cfg.templates;
        let clause = forced.unwrap_or_else(|| {
            let u: f64 = rng.random();
            if u < w.transitive {
                Clause::Transitive
            } else if u < w.transitive + w.intransitive {
                Clause::Intransitive
            } else {
                Clause::Reflexive
            }
        });
        let number = random_number(rng);
        let mut out = Vec::with_capacity(self.cfg.max_len);
        self.noun_phrase(rng, number, None, &mut out);
        let verb = choose(rng, &self.lex.verbs[slot(number)]);
        let verb_class = self.vocab.word(verb).and_then(|w| w.class);
        let adverb = match clause {
            Clause::Intransitive => true,
            _ => !self.lex.adverbs.is_empty() && rng.random_bool(self.cfg.adverb_prob),
        };
        let pre_verb = adverb && rng.random_bool(0.5);
        if pre_verb {
            out.push(choose(rng, &self.lex.adverbs));
        }
        out.push(verb);
        match clause {
            Clause::Transitive => {
                let obj_number = random_number(rng);
                self.noun_phrase(rng, obj_number, verb_class, &mut out);
            }
            Clause::Reflexive => out.push(choose(rng, &self.lex.reflexive[slot(number)])),
            Clause::Intransitive => {}
        }
        if adverb && !pre_verb {
            out.push(choose(rng, &self.lex.adverbs));
        }
        out
    }
}

/// Samples one sentence within the configured length bounds.
pub(crate) fn sample_sentence(
    lex: &Lexicon,
    vocab: &Vocabulary,
    cfg: &CorpusConfig,
    rng: &mut ChaCha8Rng,
    forced: Option<Clause>,
) -> Result<ParsedSentence> {
    let sampler = Sampler { lex, vocab, cfg };
    for _ in 0..MAX_ATTEMPTS {
        let tokens = sampler.clause(rng, forced);
        if (cfg.min_len..=cfg.max_len).contains(&tokens.len()) {
            let parsed = parse(&tokens, vocab)?;
            parsed.check_tree()?;
            return Ok(parsed);
        }
    }
    Err(Error::InvalidConfig("length bounds cannot be met by the templates".into()))
}

/// Generates `config.size` sentences; sentence `i` depends only on
/// `(config.seed, i)`.
pub fn generate_corpus(config: &CorpusConfig, vocab: &Vocabulary) -> Result<Vec<ParsedSentence>> {
    config.validate()?;
    let lex = Lexicon::new(vocab);
    (0..config.size)
        .map(|i| {
            let mut rng = rng_for(config.seed, Stream::Corpus, i as u64);
            sample_sentence(&lex, vocab, config, &mut rng, None)
        })
        .collect()
}
