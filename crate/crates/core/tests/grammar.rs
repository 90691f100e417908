use std::collections::HashMap;

use saslab_core::grammar::*;
use saslab_core::Error;

fn small(size: usize) -> (CorpusConfig, Vocabulary) {
    let cfg = CorpusConfig { size, ..Default::default() };
    let vocab = Vocabulary::build(&cfg).unwrap();
    (cfg, vocab)
}

#[test]
fn template_attachment_matches_worked_example() {
    use Category::*;
    let arcs = attach(&[Determiner, Noun, Verb, Determiner, Adjective, Noun]).unwrap();
    let expect = [
        (Some(1), Some(Relation::Det)),
        (Some(2), Some(Relation::Nsubj)),
        (None, None),
        (Some(5), Some(Relation::Det)),
        (Some(5), Some(Relation::Amod)),
        (Some(2), Some(Relation::Dobj)),
    ];
    assert_eq!(arcs, expect);
}

#[test]
fn possessive_example_parses() {
    let (_, vocab) = small(0);
    let ids: Vec<u32> = ["my", "bird", "builds", "ugly", "nests"]
        .iter()
        .map(|w| vocab.id_of(w).unwrap())
        .collect();
    let s = check_grammatical(&ids, &vocab).unwrap();
    let arcs: Vec<_> = s.arcs().collect();
    assert_eq!(
        arcs,
        vec![
            (0, 1, Relation::Poss),
            (1, 2, Relation::Nsubj),
            (3, 4, Relation::Amod),
            (4, 2, Relation::Dobj)
        ]
    );
    assert_eq!(s.dependents(2), vec![1, 4]);
}

#[test]
fn empty_corpus() {
    let (cfg, vocab) = small(0);
    assert!(generate_corpus(&cfg, &vocab).unwrap().is_empty());
}

#[test]
fn vocabulary_is_dense_and_stable() {
    let (cfg, vocab) = small(0);
    for (i, w) in vocab.words.iter().enumerate() {
        assert_eq!(w.id as usize, i);
        if matches!(w.category, Category::Noun | Category::Verb) {
            assert!(w.number.is_some(), "{} lacks number", w.text);
        }
    }
    assert_eq!(vocab, Vocabulary::build(&cfg).unwrap());
    assert_eq!(vocab.word(CLS).unwrap().category, Category::Special);
    let n = |c| vocab.words.iter().filter(|w| w.category == c && !w.reflexive).count();
    assert_eq!((n(Category::Noun), n(Category::Verb), n(Category::Adjective)), (50, 50, 30));
    assert_eq!(n(Category::Determiner), 6);
}

#[test]
fn too_small_vocabulary_is_rejected() {
    let cfg = CorpusConfig { nouns: 0, ..Default::default() };
    assert!(matches!(Vocabulary::build(&cfg), Err(Error::VocabularyTooSmall(_))));
    let cfg = CorpusConfig { adverbs: 0, ..Default::default() };
    assert!(matches!(Vocabulary::build(&cfg), Err(Error::VocabularyTooSmall(_))));
}

#[test]
fn ten_thousand_sentences_are_deterministic_trees_with_agreement() {
    let (cfg, vocab) = small(10_000);
    let a = generate_corpus(&cfg, &vocab).unwrap();
    let b = generate_corpus(&cfg, &vocab).unwrap();
    assert_eq!(a, b);
    let mut counts: HashMap<Relation, usize> = HashMap::new();
    let mut arcs = 0usize;
    for s in &a {
        s.check_tree().unwrap();
        assert!((cfg.min_len..=cfg.max_len).contains(&s.len()));
        assert!(agreement_violations(s, &vocab).is_empty(), "{}", vocab.render(&s.tokens));
        assert_eq!(&parse(&s.tokens, &vocab).unwrap(), s);
        for (_, _, r) in s.arcs() {
            *counts.entry(r).or_default() += 1;
            arcs += 1;
        }
    }
    for r in Relation::ALL {
        let frac = counts.get(&r).copied().unwrap_or(0) as f64 / arcs as f64;
        assert!(frac >= 0.01, "{} only {:.4} of arcs", r.label(), frac);
    }
}

#[test]
fn different_seeds_differ() {
    let (cfg, vocab) = small(50);
    let other = CorpusConfig { seed: 8, ..cfg.clone() };
    assert_ne!(generate_corpus(&cfg, &vocab).unwrap(), generate_corpus(&other, &vocab).unwrap());
}

#[test]
fn minimal_pairs_differ_at_one_position_and_break_one_rule() {
    let (cfg, vocab) = small(0);
    let pairs = generate_minimal_pairs(&cfg, &vocab, 1000, 11).unwrap();
    assert_eq!(pairs.len(), 1000);
    let mut per: HashMap<Phenomenon, usize> = HashMap::new();
    for p in &pairs {
        *per.entry(p.phenomenon).or_default() += 1;
        let diff: Vec<usize> = (0..p.unacceptable.len())
            .filter(|&i| p.unacceptable[i] != p.acceptable.tokens[i])
            .collect();
        assert_eq!(diff, vec![p.position]);
        assert_eq!(p.unacceptable.len(), p.acceptable.len());
        check_grammatical(&p.acceptable.tokens, &vocab).unwrap();
        let bad = parse(&p.unacceptable, &vocab).unwrap();
        let v = agreement_violations(&bad, &vocab);
        assert_eq!(v.len(), 1, "{:?}", v);
        assert!(matches!(
            (p.phenomenon, v[0]),
            (Phenomenon::SubjectVerbAgreement, Violation::SubjectVerb { .. })
                | (Phenomenon::DeterminerNounAgreement, Violation::DeterminerNoun { .. })
                | (Phenomenon::ReflexiveAgreement, Violation::Reflexive { .. })
        ));
    }
    for ph in Phenomenon::ALL {
        assert!((333..=334).contains(&per[&ph]));
    }
}

#[test]
fn subject_verb_pair_differs_at_the_verb() {
    let (cfg, vocab) = small(0);
    let pairs = generate_minimal_pairs(&cfg, &vocab, 30, 3).unwrap();
    let p = pairs.iter().find(|p| p.phenomenon == Phenomenon::SubjectVerbAgreement).unwrap();
    assert_eq!(vocab.category(p.acceptable.tokens[p.position]), Category::Verb);
    assert!(p.acceptable.parent[p.position].is_none());
}

#[test]
fn zero_pairs_and_missing_contrast() {
    let (cfg, vocab) = small(0);
    assert!(generate_minimal_pairs(&cfg, &vocab, 0, 1).unwrap().is_empty());
    let cfg = CorpusConfig { determiners: 1, ..Default::default() };
    let vocab = Vocabulary::build(&cfg).unwrap();
    assert!(matches!(
        generate_minimal_pairs(&cfg, &vocab, 10, 1),
        Err(Error::VocabularyTooSmall(_))
    ));
}

#[test]
fn tree_check_catches_cycles() {
    let s = ParsedSentence {
        tokens: vec![10, 11, 12],
        parent: vec![Some(1), Some(0), None],
        relation: vec![Some(Relation::Det), Some(Relation::Det), None],
    };
    assert!(s.check_tree().is_err());
}
