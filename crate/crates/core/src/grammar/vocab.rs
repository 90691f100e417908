use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::CorpusConfig;
use crate::error::Result;
use crate::rng::{rng_for, Stream};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Special,
    Determiner,
    Adjective,
    Noun,
    Verb,
    Possessive,
    Adverb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Number {
    Singular,
    Plural,
}

impl Number {
    pub fn flip(self) -> Self {
        match self {
            Number::Singular => Number::Plural,
            Number::Plural => Number::Singular,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub id: u32,
    pub text: String,
    pub category: Category,
    /// Grammatical number; `None` for number-neutral words ("the", "my").
    pub number: Option<Number>,
    /// Nouns and verbs come in singular/plural pairs sharing a lemma.
    pub lemma: Option<u32>,
    /// Selectional class (nouns, adjectives) or preferred object class (verbs).
    pub class: Option<u32>,
    #[serde(default)]
    pub reflexive: bool,
}

/// Word list with dense ids; ids `0..4` are PAD, CLS, SEP, MASK.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<Word>,
    pub semantic_classes: u32,
}

const NOUNS: &[(&str, &str)] = &[
    ("bird", "birds"),
    ("dog", "dogs"),
    ("cat", "cats"),
    ("horse", "horses"),
    ("farmer", "farmers"),
    ("teacher", "teachers"),
    ("student", "students"),
    ("doctor", "doctors"),
    ("king", "kings"),
    ("artist", "artists"),
    ("nest", "nests"),
    ("song", "songs"),
    ("house", "houses"),
    ("book", "books"),
    ("letter", "letters"),
    ("apple", "apples"),
    ("river", "rivers"),
    ("garden", "gardens"),
    ("window", "windows"),
    ("story", "stories"),
    ("picture", "pictures"),
    ("car", "cars"),
    ("ship", "ships"),
    ("bridge", "bridges"),
    ("tree", "trees"),
];

const VERBS: &[(&str, &str)] = &[
    ("builds", "build"),
    ("sees", "see"),
    ("likes", "like"),
    ("finds", "find"),
    ("paints", "paint"),
    ("reads", "read"),
    ("writes", "write"),
    ("wants", "want"),
    ("carries", "carry"),
    ("watches", "watch"),
    ("helps", "help"),
    ("follows", "follow"),
    ("needs", "need"),
    ("keeps", "keep"),
    ("loves", "love"),
    ("hates", "hate"),
    ("draws", "draw"),
    ("sells", "sell"),
    ("buys", "buy"),
    ("brings", "bring"),
    ("cleans", "clean"),
    ("fixes", "fix"),
    ("opens", "open"),
    ("moves", "move"),
    ("knows", "know"),
];

const ADJECTIVES: &[&str] = &[
    "ugly", "small", "big", "old", "young", "red", "green", "happy", "quiet", "bright", "dark", "heavy",
    "light", "tall", "short", "warm", "cold", "strange", "famous", "gentle", "clever", "brave", "lazy",
    "noisy", "pretty", "simple", "rich", "poor", "busy", "tiny",
];

const DETERMINERS: &[(&str, Option<Number>)] = &[
    ("the", None),
    ("a", Some(Number::Singular)),
    ("these", Some(Number::Plural)),
    ("this", Some(Number::Singular)),
    ("those", Some(Number::Plural)),
    ("that", Some(Number::Singular)),
];

const POSSESSIVES: &[&str] = &["my", "your", "his", "her", "our", "their"];

const ADVERBS: &[&str] = &["quickly", "often", "rarely", "always", "never", "slowly", "loudly", "gladly"];

const REFLEXIVES: &[(&str, Number)] = &[("itself", Number::Singular), ("themselves", Number::Plural)];

fn pick_text(list: &[&str], i: usize, prefix: &str) -> String {
    list.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("{prefix}{i}"))
}

impl Vocabulary {
    pub fn build(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, Stream::Corpus, u64::MAX);
        let classes = config.semantic_classes;
        let mut words = Vec::new();
        for (id, name) in ["[PAD]", "[CLS]", "[SEP]", "[MASK]"].iter().enumerate() {
            words.push(Word {
                id: id as u32,
                text: name.to_string(),
                category: Category::Special,
                number: None,
                lemma: None,
                class: None,
                reflexive: false,
            });
        }
        let push = |words: &mut Vec<Word>, text: String, category, number, lemma, class, reflexive| {
            let id = words.len() as u32;
            words.push(Word {
                id,
                text,
                category,
                number,
                lemma,
                class,
                reflexive,
            });
        };

        // Balanced class assignment, shuffled under the corpus seed.
        let balanced = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut c: Vec<u32> = (0..n).map(|i| (i as u32) % classes).collect();
            c.shuffle(rng);
            c
        };

        for (text, number) in DETERMINERS.iter().take(config.determiners) {
            push(&mut words, text.to_string(), Category::Determiner, *number, None, None, false);
        }
        for i in config.determiners.min(DETERMINERS.len())..config.determiners {
            let number = [None, Some(Number::Singular), Some(Number::Plural)][i % 3];
            push(&mut words, format!("det{i}"), Category::Determiner, number, None, None, false);
        }
        for i in 0..config.possessives {
            push(&mut words, pick_text(POSSESSIVES, i, "poss"), Category::Possessive, None, None, None, false);
        }

        let noun_lemmas = config.nouns / 2;
        let noun_classes = balanced(noun_lemmas, &mut rng);
        for (l, &class) in noun_classes.iter().enumerate() {
            let (sg, pl) = NOUNS
                .get(l)
                .map(|(s, p)| (s.to_string(), p.to_string()))
                .unwrap_or_else(|| (format!("noun{l}"), format!("noun{l}s")));
            let class = Some(class);
            push(&mut words, sg, Category::Noun, Some(Number::Singular), Some(l as u32), class, false);
            push(&mut words, pl, Category::Noun, Some(Number::Plural), Some(l as u32), class, false);
        }
        for (text, number) in REFLEXIVES {
            push(&mut words, text.to_string(), Category::Noun, Some(*number), None, None, true);
        }

        let verb_lemmas = config.verbs / 2;
        let verb_classes = balanced(verb_lemmas, &mut rng);
        for (l, &class) in verb_classes.iter().enumerate() {
            let (sg, pl) = VERBS
                .get(l)
                .map(|(s, p)| (s.to_string(), p.to_string()))
                .unwrap_or_else(|| (format!("verb{l}s"), format!("verb{l}")));
            let class = Some(class);
            push(&mut words, sg, Category::Verb, Some(Number::Singular), Some(l as u32), class, false);
            push(&mut words, pl, Category::Verb, Some(Number::Plural), Some(l as u32), class, false);
        }

        let adj_classes = balanced(config.adjectives, &mut rng);
        for (i, c) in adj_classes.iter().enumerate() {
            push(&mut words, pick_text(ADJECTIVES, i, "adj"), Category::Adjective, None, None, Some(*c), false);
        }
        for i in 0..config.adverbs {
            push(&mut words, pick_text(ADVERBS, i, "adv"), Category::Adverb, None, None, None, false);
        }
        Ok(Self {
            words,
            semantic_classes: classes,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> Option<&Word> {
        self.words.get(id as usize)
    }

    pub fn category(&self, id: u32) -> Category {
        self.word(id).map(|w| w.category).unwrap_or(Category::Special)
    }

    pub fn number(&self, id: u32) -> Option<Number> {
        self.word(id).and_then(|w| w.number)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < NUM_SPECIAL
    }

    pub fn id_of(&self, text: &str) -> Option<u32> {
        self.words.iter().find(|w| w.text == text).map(|w| w.id)
    }

    pub fn ids_where<F: Fn(&Word) -> bool>(&self, f: F) -> Vec<u32> {
        self.words.iter().filter(|w| f(w)).map(|w| w.id).collect()
    }

    /// The other-number form of a noun, verb or reflexive.
    pub fn flip_number(&self, id: u32) -> Option<u32> {
        let w = self.word(id)?;
        let target = w.number?.flip();
        self.words
            .iter()
            .find(|o| {
                o.category == w.category
                    && o.number == Some(target)
                    && o.reflexive == w.reflexive
                    && (w.reflexive || (o.lemma.is_some() && o.lemma == w.lemma))
            })
            .map(|o| o.id)
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        for (i, &t) in tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(t).map(|w| w.text.as_str()).unwrap_or("?"));
        }
        out
    }

    /// Ids that may stand in for a random replacement during masking.
    pub fn content_ids(&self) -> core::ops::Range<u32> {
        NUM_SPECIAL..self.words.len() as u32
    }
}
