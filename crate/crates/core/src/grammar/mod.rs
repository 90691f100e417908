//! Synthetic dependency grammar with gold parses and agreement minimal pairs.
//!
//! Sentences follow a small clause skeleton,
//! `NP_subj [Adv] Verb [NP_obj | Reflexive] [Adv]`, with noun phrases
//! `(Det | Poss) Adj* Noun`. Three agreement rules hold in every generated
//! sentence: subject/verb number, determiner/noun number and
//! reflexive/subject number. Selectional classes tie adjectives to nouns and
//! verbs to their objects, so predicting a word benefits from attending to its
//! syntactic neighbours.

mod generate;
mod pairs;
mod vocab;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::generate_corpus;
pub use pairs::{generate_minimal_pairs, MinimalPair, Phenomenon};
pub use vocab::{Category, Number, Vocabulary, Word, CLS, MASK, NUM_SPECIAL, PAD, SEP};

/// Dependency labels used by the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Det,
    Amod,
    Nsubj,
    Dobj,
    Poss,
    Advmod,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::Det,
        Relation::Amod,
        Relation::Nsubj,
        Relation::Dobj,
        Relation::Poss,
        Relation::Advmod,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Relation::Det => "det",
            Relation::Amod => "amod",
            Relation::Nsubj => "nsubj",
            Relation::Dobj => "dobj",
            Relation::Poss => "poss",
            Relation::Advmod => "advmod",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Token ids with gold heads. `parent[i] == None` marks the root (main verb).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedSentence {
    pub tokens: Vec<u32>,
    pub parent: Vec<Option<usize>>,
    pub relation: Vec<Option<Relation>>,
}

impl ParsedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `(child, parent, relation)` for every non-root word.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize, Relation)> + '_ {
        self.parent
            .iter()
            .zip(&self.relation)
            .enumerate()
            .filter_map(|(i, (p, r))| Some((i, (*p)?, (*r)?)))
    }

    /// Dependents of word `i`.
    pub fn dependents(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.parent[j] == Some(i)).collect()
    }

    /// Single root, every word reaches it, no cycles, labels exactly on arcs.
    pub fn check_tree(&self) -> Result<()> {
        let n = self.len();
        if self.parent.len() != n || self.relation.len() != n {
            return Err(Error::InvalidConfig("parse arrays differ in length".into()));
        }
        let roots = self.parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::InvalidConfig(format!("{roots} roots")));
        }
        for i in 0..n {
            if self.parent[i].is_some() != self.relation[i].is_some() {
                return Err(Error::InvalidConfig(format!("word {i}: label without arc or arc without label")));
            }
            let mut cur = i;
            let mut steps = 0;
            while let Some(p) = self.parent[cur] {
                if p >= n || p == cur {
                    return Err(Error::InvalidConfig(format!("word {cur}: bad head {p}")));
                }
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::InvalidConfig(format!("cycle through word {i}")));
                }
            }
        }
        Ok(())
    }
}

/// Relative frequency of clause skeletons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateWeights {
    pub transitive: f64,
    pub intransitive: f64,
    pub reflexive: f64,
}

impl Default for TemplateWeights {
    fn default() -> Self {
        Self {
            transitive: 0.6,
            intransitive: 0.25,
            reflexive: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Noun forms (singular + plural, so even).
    pub nouns: usize,
    /// Verb forms (singular + plural, so even).
    pub verbs: usize,
    pub adjectives: usize,
    pub determiners: usize,
    pub possessives: usize,
    pub adverbs: usize,
    pub semantic_classes: u32,
    pub min_len: usize,
    pub max_len: usize,
    pub templates: TemplateWeights,
    /// Chance that a noun phrase uses a possessive instead of a determiner.
    pub possessive_prob: f64,
    /// Chance of adding each further adjective, up to `max_adjectives`.
    pub adjective_prob: f64,
    pub max_adjectives: usize,
    /// Chance of an optional adverb in transitive/reflexive clauses.
    pub adverb_prob: f64,
    /// Chance that a class-selected word is drawn from its preferred class.
    pub selection_strength: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            nouns: 50,
            verbs: 50,
            adjectives: 30,
            determiners: 6,
            possessives: 6,
            adverbs: 8,
            semantic_classes: 5,
            min_len: 4,
            max_len: 12,
            templates: TemplateWeights::default(),
            possessive_prob: 0.25,
            adjective_prob: 0.4,
            max_adjectives: 2,
            adverb_prob: 0.3,
            selection_strength: 0.9,
            size: 50_000,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.nouns < 2 || !self.nouns.is_multiple_of(2) || self.verbs < 2 || !self.verbs.is_multiple_of(2) {
            return Err(Error::VocabularyTooSmall(
                "nouns and verbs need an even number (>= 2) of forms".into(),
            ));
        }
        if self.determiners == 0 {
            return Err(Error::VocabularyTooSmall("no determiners".into()));
        }
        if self.semantic_classes == 0 {
            return bad("semantic_classes must be positive");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("length bounds");
        }
        let w = self.templates;
        let total = w.transitive + w.intransitive + w.reflexive;
        if [w.transitive, w.intransitive, w.reflexive].iter().any(|x| *x < 0.0 || !x.is_finite())
            || (total - 1.0).abs() > 1e-9
        {
            return bad("template weights must be non-negative and sum to 1");
        }
        for p in [self.possessive_prob, self.adjective_prob, self.adverb_prob, self.selection_strength] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if w.intransitive > 0.0 && self.adverbs == 0 {
            return Err(Error::VocabularyTooSmall("intransitive clauses need an adverb".into()));
        }
        if self.adjective_prob > 0.0 && self.max_adjectives > 0 && self.adjectives == 0 {
            return Err(Error::VocabularyTooSmall("adjectives requested but none in vocabulary".into()));
        }
        if self.possessive_prob > 0.0 && self.possessives == 0 {
            return Err(Error::VocabularyTooSmall("possessives requested but none in vocabulary".into()));
        }
        if self.adverb_prob > 0.0 && self.adverbs == 0 {
            return Err(Error::VocabularyTooSmall("adverbs requested but none in vocabulary".into()));
        }
        Ok(())
    }
}

/// Attaches a category sequence under the grammar's rules.
///
/// Determiners, possessives and adjectives attach to the next noun; the
/// first noun before the verb is its subject; the noun after the verb is its
/// object; adverbs attach to the verb. Returns `(parent, relation)` per word.
pub fn attach(categories: &[Category]) -> Result<Vec<(Option<usize>, Option<Relation>)>> {
    let verbs: Vec<usize> = (0..categories.len()).filter(|&i| categories[i] == Category::Verb).collect();
    let [verb] = verbs[..] else {
        return Err(Error::InvalidConfig(format!("expected exactly one verb, found {}", verbs.len())));
    };
    let mut out = vec![(None, None); categories.len()];
    let mut pending: Vec<(usize, Relation)> = Vec::new();
    let mut subject = None;
    let mut object = None;
    for (i, &c) in categories.iter().enumerate() {
        match c {
            Category::Determiner => pending.push((i, Relation::Det)),
            Category::Possessive => pending.push((i, Relation::Poss)),
            Category::Adjective => pending.push((i, Relation::Amod)),
            Category::Noun => {
                for (m, r) in pending.drain(..) {
                    out[m] = (Some(i), Some(r));
                }
                let rel = if i < verb {
                    if subject.replace(i).is_some() {
                        return Err(Error::InvalidConfig("two subject nouns".into()));
                    }
                    Relation::Nsubj
                } else {
                    if object.replace(i).is_some() {
                        return Err(Error::InvalidConfig("two object nouns".into()));
                    }
                    Relation::Dobj
                };
                out[i] = (Some(verb), Some(rel));
            }
            Category::Adverb => out[i] = (Some(verb), Some(Relation::Advmod)),
            Category::Verb => {
                if !pending.is_empty() {
                    return Err(Error::InvalidConfig("modifier without a noun before the verb".into()));
                }
            }
            Category::Special => return Err(Error::InvalidConfig("special token inside a sentence".into())),
        }
    }
    if !pending.is_empty() {
        return Err(Error::InvalidConfig("dangling modifier at sentence end".into()));
    }
    if subject.is_none() {
        return Err(Error::InvalidConfig("no subject".into()));
    }
    Ok(out)
}

/// Parses a token sequence with [`attach`].
pub fn parse(tokens: &[u32], vocab: &Vocabulary) -> Result<ParsedSentence> {
    let cats: Vec<Category> = tokens.iter().map(|&t| vocab.category(t)).collect();
    let arcs = attach(&cats)?;
    Ok(ParsedSentence {
        tokens: tokens.to_vec(),
        parent: arcs.iter().map(|a| a.0).collect(),
        relation: arcs.iter().map(|a| a.1).collect(),
    })
}

/// A broken agreement rule, identified by the dependent word's position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    SubjectVerb { subject: usize, verb: usize },
    DeterminerNoun { determiner: usize, noun: usize },
    Reflexive { reflexive: usize, subject: usize },
}

/// Checks the three agreement rules on a parsed sentence.
pub fn agreement_violations(sentence: &ParsedSentence, vocab: &Vocabulary) -> Vec<Violation> {
    let mut out = Vec::new();
    let subject_of = |verb: usize| {
        sentence
            .arcs()
            .find(|&(_, p, r)| p == verb && r == Relation::Nsubj)
            .map(|(c, _, _)| c)
    };
    for (child, head, rel) in sentence.arcs() {
        let (ct, ht) = (sentence.tokens[child], sentence.tokens[head]);
        match rel {
            Relation::Nsubj => {
                if vocab.number(ct) != vocab.number(ht) {
                    out.push(Violation::SubjectVerb { subject: child, verb: head });
                }
            }
            Relation::Det => {
                if let Some(n) = vocab.number(ct) {
                    if Some(n) != vocab.number(ht) {
                        out.push(Violation::DeterminerNoun { determiner: child, noun: head });
                    }
                }
            }
            Relation::Dobj
                if vocab.word(ct).is_some_and(|w| w.reflexive) => {
                    if let Some(s) = subject_of(head) {
                        if vocab.number(ct) != vocab.number(sentence.tokens[s]) {
                            out.push(Violation::Reflexive { reflexive: child, subject: s });
                        }
                    }
                }
            _ => {}
        }
    }
    out
}

/// Parses `tokens` and requires every agreement rule to hold.
pub fn check_grammatical(tokens: &[u32], vocab: &Vocabulary) -> Result<ParsedSentence> {
    let parsed = parse(tokens, vocab)?;
    let v = agreement_violations(&parsed, vocab);
    if v.is_empty() {
        Ok(parsed)
    } else {
        Err(Error::InvalidConfig(format!("agreement violations: {v:?}")))
    }
}
