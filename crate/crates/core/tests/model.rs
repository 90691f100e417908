use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saslab_core::grammar::{generate_corpus, CorpusConfig, Vocabulary, CLS, MASK, SEP};
use saslab_core::model::*;
use saslab_core::numerics::{finite_diff_grad, relative_error, Graph};
use saslab_core::Error;

fn corpus(n: usize) -> (Vocabulary, Vec<Vec<u32>>) {
    let cfg = CorpusConfig { size: n, ..Default::default() };
    let vocab = Vocabulary::build(&cfg).unwrap();
    let sents = generate_corpus(&cfg, &vocab).unwrap().into_iter().map(|s| s.tokens).collect();
    (vocab, sents)
}

fn tiny(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size,
        seed,
        ..Default::default()
    }
}

fn refs(s: &[Vec<u32>]) -> Vec<&[u32]> {
    s.iter().map(|v| v.as_slice()).collect()
}

/// RNG that always yields zero bits, so every uniform draw is 0.0.
struct ZeroRng;

impl RngCore for ZeroRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0)
    }
}

#[test]
fn default_config_is_valid() {
    let cfg = ModelConfig { vocab_size: 200, ..Default::default() };
    cfg.validate().unwrap();
    assert_eq!((cfg.layers, cfg.heads, cfg.d_model, cfg.d_ff), (4, 4, 128, 512));
    let bad = ModelConfig { heads: 3, ..cfg.clone() };
    assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    let p = ModelParams::init(&cfg).unwrap();
    let d = 128;
    let per_layer = 4 * (d * d + d) + 2 * d + (d * 512 + 512) + (512 * d + d) + 2 * d;
    let expect = 200 * d + 16 * d + 2 * d + 4 * per_layer + (d * d + d) + 2 * d + 200;
    assert_eq!(p.num_scalars(), expect);
}

#[test]
fn corrupt_token_thresholds() {
    assert_eq!(corrupt_token(0.0, 9, 5), MASK);
    assert_eq!(corrupt_token(0.79, 9, 5), MASK);
    assert_eq!(corrupt_token(0.85, 9, 5), 5);
    assert_eq!(corrupt_token(0.95, 9, 5), 9);
}

#[test]
fn stubbed_rng_masks_with_mask_symbol() {
    let s = vec![10u32];
    let b = mask_batch(&[&s], 0.15, 50, 16, &mut ZeroRng).unwrap();
    assert_eq!(b.input_ids, vec![CLS, MASK, SEP]);
    assert_eq!(b.labels, vec![IGNORE, 10, IGNORE]);
    assert_eq!(b.mask_positions, vec![(0, 1)]);
}

#[test]
fn masked_fraction_matches_rate() {
    // Long sentences so that the at-least-one rule almost never fires.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sents: Vec<Vec<u32>> = (0..200)
        .map(|_| (0..50).map(|_| rng.random_range(4..60)).collect())
        .collect();
    let b = mask_batch(&refs(&sents), 0.15, 60, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let frac = b.mask_positions.len() as f64 / 10_000.0;
    assert!((frac - 0.15).abs() < 0.01, "fraction {frac}");
    let masked = b.mask_positions.iter().filter(|&&(s, t)| b.input_ids[s * b.seq + t] == MASK).count();
    let share = masked as f64 / b.mask_positions.len() as f64;
    assert!((share - 0.8).abs() < 0.05, "mask share {share}");
}

#[test]
fn masking_labels_and_determinism() {
    let (vocab, sents) = corpus(64);
    let r = refs(&sents);
    let a = mask_batch(&r, 0.15, vocab.len(), 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = mask_batch(&r, 0.15, vocab.len(), 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    for s in 0..a.batch {
        assert!(a.mask_positions.iter().any(|&(q, _)| q == s));
    }
    for (k, &l) in a.labels.iter().enumerate() {
        let at = a.mask_positions.contains(&(k / a.seq, k % a.seq));
        assert_eq!(l != IGNORE, at);
        if at {
            assert_eq!(l, a.original_ids[k]);
        }
    }
}

#[test]
fn too_long_sequence_is_rejected() {
    let s = vec![5u32; 15];
    let err = mask_batch(&[&s], 0.15, 50, 16, &mut ZeroRng).unwrap_err();
    assert_eq!(err, Error::SequenceTooLong { len: 17, max: 16 });
}

#[test]
fn attention_rows_are_distributions() {
    let (vocab, sents) = corpus(8);
    let m = Model::new(tiny(vocab.len(), 1)).unwrap();
    let b = MlmBatch::unmasked(&refs(&sents), 16).unwrap();
    let out = m.forward(&b).unwrap();
    let a = &out.attentions;
    for s in 0..b.batch {
        let len = b.lengths[s];
        for l in 0..a.layers {
            for h in 0..a.heads {
                for i in 0..b.seq {
                    let row: f64 = (0..b.seq).map(|j| a.get(s, l, h, i, j)).sum();
                    let want = if i < len { 1.0 } else { 0.0 };
                    assert!((row - want).abs() < 1e-12);
                    for j in len..b.seq {
                        assert_eq!(a.get(s, l, h, i, j), 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let (vocab, sents) = corpus(256);
    let cfg = ModelConfig { vocab_size: vocab.len(), ..Default::default() };
    let m = Model::new(cfg).unwrap();
    let b = mask_batch(&refs(&sents[..64]), 0.15, vocab.len(), 16, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let loss = mlm_loss(&m.forward(&b).unwrap(), &b).unwrap();
    let oracle = (vocab.len() as f64).ln();
    assert!((loss - oracle).abs() / oracle < 0.05, "loss {loss} vs ln V {oracle}");
}

#[test]
fn forward_is_deterministic_and_batch_order_free() {
    let (vocab, sents) = corpus(6);
    let m = Model::new(tiny(vocab.len(), 2)).unwrap();
    let m2 = Model::new(tiny(vocab.len(), 2)).unwrap();
    assert_eq!(m, m2);
    let b = MlmBatch::unmasked(&refs(&sents), 16).unwrap();
    let o1 = m.forward(&b).unwrap();
    assert_eq!(o1, m.forward(&b).unwrap());
    let mut rev = sents.clone();
    rev.reverse();
    let br = MlmBatch::unmasked(&refs(&rev), 16).unwrap();
    let o2 = m.forward(&br).unwrap();
    let n = sents.len();
    for s in 0..n {
        let (x, y) = (o1.attentions.sentence(s), o2.attentions.sentence(n - 1 - s));
        for (p, q) in x.data.iter().zip(&y.data) {
            assert!((p - q).abs() < 1e-10);
        }
        for (p, q) in o1.cls[s].iter().zip(&o2.cls[n - 1 - s]) {
            assert!((p - q).abs() < 1e-10);
        }
    }
}

#[test]
fn padding_does_not_change_results() {
    let (vocab, sents) = corpus(20);
    let m = Model::new(tiny(vocab.len(), 5)).unwrap();
    let short = sents.iter().min_by_key(|s| s.len()).unwrap().clone();
    let long = sents.iter().max_by_key(|s| s.len()).unwrap().clone();
    assert!(long.len() > short.len());
    let alone = m.forward(&MlmBatch::unmasked(&[&short], 16).unwrap()).unwrap();
    let padded = m.forward(&MlmBatch::unmasked(&[&short, &long], 16).unwrap()).unwrap();
    let (a, b) = (alone.attentions.sentence(0), padded.attentions.sentence(0));
    for (p, q) in a.data.iter().zip(&b.data) {
        assert!((p - q).abs() < 1e-10);
    }
    let len = short.len() + 2;
    let v = vocab.len();
    for r in 0..len * v {
        assert!((alone.logits.data()[r] - padded.logits.data()[r]).abs() < 1e-9);
    }
}

#[test]
fn token_likelihood_matches_forward_pass() {
    let (vocab, sents) = corpus(3);
    let m = Model::new(tiny(vocab.len(), 6)).unwrap();
    let s = &sents[0];
    let p = token_likelihood(&m, s, 1).unwrap();
    let mut masked = s.clone();
    masked[1] = MASK;
    let out = m.forward(&MlmBatch::unmasked(&[&masked], 16).unwrap()).unwrap();
    let v = vocab.len();
    let row = &out.logits.data()[2 * v..3 * v];
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    let oracle = row[s[1] as usize].exp() / z;
    assert!((p - oracle).abs() < 1e-12);
    assert!(token_likelihood(&m, s, s.len()).is_err());
}

#[test]
fn mlm_loss_requires_targets() {
    let (vocab, sents) = corpus(2);
    let m = Model::new(tiny(vocab.len(), 1)).unwrap();
    let b = MlmBatch::unmasked(&refs(&sents), 16).unwrap();
    let out = m.forward(&b).unwrap();
    assert_eq!(mlm_loss(&out, &b), Err(Error::NoMaskedPositions));
}

#[test]
fn whole_model_gradient_matches_finite_differences() {
    let (vocab, sents) = corpus(4);
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 8,
        vocab_size: vocab.len(),
        init_std: 0.3,
        dropout: 0.0,
        ..Default::default()
    };
    let model = Model::new(cfg.clone()).unwrap();
    let b = mask_batch(&refs(&sents), 0.3, vocab.len(), 16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let loss_of = |m: &Model| -> (f64, Vec<saslab_core::numerics::Tensor>) {
        let mut g = Graph::new();
        let enc = m.encode(&mut g, &b, None, true).unwrap();
        let logits = m.head(&mut g, &enc, &b.target_rows()).unwrap();
        let loss = g.cross_entropy(logits, &b.target_ids()).unwrap();
        let value = g.value(loss).item().unwrap();
        let mut grads = g.backward(loss).unwrap();
        (value, enc.params.iter().map(|&v| grads.take(v).unwrap()).collect())
    };
    let (_, grads) = loss_of(&model);
    let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
    let mut flat = model.params.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let coords: Vec<usize> = (0..40).map(|_| rng.random_range(0..flat.len())).collect();
    let numeric = finite_diff_grad(
        |x| {
            let mut m = model.clone();
            let mut off = 0;
            for t in m.params.tensors.iter_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&x[off..off + n]);
                off += n;
            }
            loss_of(&m).0
        },
        &mut flat,
        &coords,
        1e-5,
    );
    for (k, &c) in coords.iter().enumerate() {
        let err = relative_error(analytic[c], numeric[k], 1e-6);
        assert!(err < 1e-4, "coord {c}: {} vs {} ({err})", analytic[c], numeric[k]);
    }
}

fn output_with_logits(batch: &MlmBatch, v: usize, logits: Vec<f64>) -> ForwardOutput {
    ForwardOutput {
        logits: saslab_core::numerics::Tensor::new(vec![batch.batch, batch.seq, v], logits).unwrap(),
        attentions: AttentionTensor {
            batch: batch.batch,
            layers: 0,
            heads: 0,
            seq: batch.seq,
            lengths: batch.lengths.clone(),
            data: vec![],
        },
        cls: vec![],
    }
}

#[test]
fn mlm_loss_fixtures() {
    let s = vec![10u32, 11];
    let b = mask_batch(&[&s], 0.15, 256, 16, &mut ZeroRng).unwrap();
    assert_eq!(b.mask_positions, vec![(0, 1), (0, 2)]);
    let uniform = output_with_logits(&b, 256, vec![0.7; 4 * 256]);
    assert!((mlm_loss(&uniform, &b).unwrap() - 256f64.ln()).abs() < 1e-12);

    let mut sharp = vec![0.0; 4 * 256];
    sharp[256 + 10] = 60.0;
    sharp[2 * 256 + 11] = 60.0;
    assert!(mlm_loss(&output_with_logits(&b, 256, sharp), &b).unwrap() < 1e-20);

    // Two positions over a 3-symbol row: manual log-sum-exp.
    let v = 12;
    let s = vec![4u32, 5];
    let b = mask_batch(&[&s], 0.15, v, 16, &mut ZeroRng).unwrap();
    let mut logits = vec![0.0; 4 * v];
    logits[v + 4] = 1.0;
    logits[v + 7] = 2.0;
    logits[2 * v + 5] = -1.0;
    let l1 = -(1.0 - ((v as f64 - 2.0) + 1f64.exp() + 2f64.exp()).ln());
    let l2 = -(-1.0 - ((v as f64 - 1.0) + (-1f64).exp()).ln());
    let got = mlm_loss(&output_with_logits(&b, v, logits), &b).unwrap();
    assert!((got - (l1 + l2) / 2.0).abs() < 1e-12);
}
