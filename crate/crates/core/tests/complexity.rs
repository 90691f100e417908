use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use saslab_core::complexity::*;
use saslab_core::model::{mask_batch, AttentionTensor, MaskQuery, MaskedLm, Model, ModelConfig, ModelParams};
use saslab_core::numerics::{finite_diff_grad, Tensor};
use saslab_core::{Error, Result};

/// Random orthonormal `k` columns in `d` dimensions (Gram-Schmidt).
fn orthonormal(d: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(c) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|x| x / n).collect());
    }
    cols
}

fn embed(low: &[Vec<f64>], basis: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    low.iter()
        .map(|p| {
            let mut out = vec![0.0; d];
            for (c, &x) in basis.iter().zip(p) {
                for (o, b) in out.iter_mut().zip(c) {
                    *o += x * b;
                }
            }
            out
        })
        .collect()
}

#[test]
fn twonn_recovers_square_and_segment() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sq: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.random(), rng.random()]).collect();
        let basis = orthonormal(32, 2, &mut rng);
        let cloud = PointCloud { points: embed(&sq, &basis, 32), metric: Distance::Euclidean };
        let d = twonn_id(&cloud, 0.1).unwrap().dimension;
        assert!((1.8..=2.2).contains(&d), "square: {d}");
        let seg: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.random()]).collect();
        let basis = orthonormal(10, 1, &mut rng);
        let cloud = PointCloud { points: embed(&seg, &basis, 10), metric: Distance::Euclidean };
        let d = twonn_id(&cloud, 0.1).unwrap().dimension;
        assert!((0.9..=1.1).contains(&d), "segment: {d}");
    }
}

#[test]
fn twonn_degenerate_and_deterministic() {
    let same = PointCloud { points: vec![vec![1.0, 2.0]; 50], metric: Distance::Euclidean };
    assert!(matches!(twonn_id(&same, 0.1), Err(Error::Degenerate(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<Vec<f64>> = (0..200).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
    let c = PointCloud { points: pts, metric: Distance::Cosine };
    assert_eq!(twonn_id(&c, 0.1).unwrap(), twonn_id(&c, 0.1).unwrap());
}

#[test]
fn weight_norms() {
    let mk = |tensors: Vec<Tensor>, names: Vec<&str>| ModelParams {
        names: names.into_iter().map(String::from).collect(),
        tensors,
    };
    let z = mk(vec![Tensor::zeros(&[3, 4])], vec!["a"]);
    assert_eq!(weight_norm(&z, NormSubset::All).unwrap(), 0.0);
    let mut data = vec![0.0; 12];
    data[0] = 3.0;
    data[5] = 4.0;
    let t = mk(vec![Tensor::new(vec![3, 4], data.clone()).unwrap()], vec!["head.w"]);
    assert_eq!(weight_norm(&t, NormSubset::All).unwrap(), 5.0);
    assert_eq!(weight_norm(&t, NormSubset::Head).unwrap(), 5.0);
    let scaled = mk(vec![Tensor::new(vec![3, 4], data.iter().map(|x| -2.5 * x).collect()).unwrap()], vec!["w"]);
    assert_eq!(weight_norm(&scaled, NormSubset::All).unwrap(), 12.5);
    assert!(weight_norm(&scaled, NormSubset::Head).is_err());
}

#[test]
fn fisher_matches_finite_difference_gradient_norm() {
    let model = Model::new(ModelConfig {
        layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 8,
        vocab_size: 12,
        init_std: 0.3,
        dropout: 0.0,
        ..Default::default()
    })
    .unwrap();
    let sents: Vec<Vec<u32>> = vec![vec![4, 5, 6], vec![7, 8, 9, 10]];
    let refs: Vec<&[u32]> = sents.iter().map(|s| s.as_slice()).collect();
    let batch = mask_batch(&refs, 0.5, 12, 16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let f = fisher_approx(&model, std::slice::from_ref(&batch)).unwrap();
    assert!(f > 0.0);
    let mut flat = model.params.flatten();
    let coords: Vec<usize> = (0..flat.len()).collect();
    let g = finite_diff_grad(
        |x| {
            let mut m = model.clone();
            let mut o = 0;
            for t in m.params.tensors.iter_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&x[o..o + n]);
                o += n;
            }
            mlm_gradients(&m, &batch).unwrap().0
        },
        &mut flat,
        &coords,
        1e-5,
    );
    let fd: f64 = g.iter().map(|x| x * x).sum();
    assert!((f - fd).abs() / fd < 1e-3, "{f} vs {fd}");
    assert!(fisher_approx(&model, &[]).is_err());
}

fn fixture(rows: &[Vec<f64>], len: usize) -> AttentionTensor {
    let mut data = vec![0.0; len * len];
    for (i, r) in rows.iter().enumerate() {
        data[i * len..(i + 1) * len].copy_from_slice(r);
    }
    AttentionTensor { batch: 1, layers: 1, heads: 1, seq: len, lengths: vec![len], data }
}

#[test]
fn attention_entropy_fixtures() {
    let k = 4;
    let uni = fixture(&vec![vec![0.25; k]; k], k);
    assert!((attention_entropy(&uni).unwrap() - (k as f64).ln()).abs() < 1e-12);
    let hot: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    assert_eq!(attention_entropy(&fixture(&hot, k)).unwrap(), 0.0);
    let mixed = vec![vec![0.25; k], hot[1].clone(), vec![0.25; k], hot[3].clone()];
    assert!((attention_entropy(&fixture(&mixed, k)).unwrap() - (k as f64).ln() / 2.0).abs() < 1e-12);
}

#[test]
fn attention_distance_profile() {
    let n = 6;
    let uni = fixture(&vec![vec![1.0 / n as f64; n]; n], n);
    let prof = attention_by_distance(&uni, &[(0, 2), (0, 3)], 2).unwrap();
    for (_, v) in &prof {
        assert!((v - 1.0 / n as f64).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect();
    let a = fixture(&rows, n);
    let prof = attention_by_distance(&a, &[(0, 2)], n).unwrap();
    let total: f64 = prof.iter().map(|p| p.1).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(prof.iter().all(|p| (0.0..=1.0).contains(&p.1)));
    assert!(attention_by_distance(&a, &[(0, 9)], 2).is_err());
}

#[test]
fn cka_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let q = orthonormal(6, 6, &mut rng);
    let shift: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 10.0).collect();
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..6).map(|j| 3.0 * q.iter().zip(r).map(|(c, v)| c[j] * v).sum::<f64>() + shift[j]).collect())
        .collect();
    assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-6);
    assert!((linear_cka(&x, &y).unwrap() - linear_cka(&y, &x).unwrap()).abs() < 1e-12);
    let a: Vec<Vec<f64>> = (0..1000).map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let b: Vec<Vec<f64>> = (0..1000).map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    assert!(linear_cka(&a, &b).unwrap() < 0.1);
    let flat = vec![vec![1.0, 2.0]; 10];
    assert!(matches!(linear_cka(&flat, &flat), Err(Error::Degenerate(_))));
}

struct Fixed(Vec<f64>);

impl MaskedLm for Fixed {
    fn vocab_size(&self) -> usize {
        self.0.len()
    }
    fn log_probs(&self, q: &[MaskQuery]) -> Result<Vec<Vec<f64>>> {
        Ok(q.iter().map(|_| self.0.iter().map(|p| p.ln()).collect()).collect())
    }
}

#[test]
fn tvd_properties() {
    assert_eq!(tvd(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
    assert_eq!(tvd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    let q = vec![MaskQuery { tokens: vec![1, 3, 2], position: 1 }; 3];
    let a = Fixed(vec![0.2, 0.3, 0.5]);
    let b = Fixed(vec![0.6, 0.1, 0.3]);
    let c = Fixed(vec![0.1, 0.8, 0.1]);
    let ab = mean_tvd(&a, &b, &q).unwrap();
    assert_eq!(mean_tvd(&a, &a, &q).unwrap(), 0.0);
    assert!((ab - mean_tvd(&b, &a, &q).unwrap()).abs() < 1e-15);
    assert!(ab <= mean_tvd(&a, &c, &q).unwrap() + mean_tvd(&c, &b, &q).unwrap() + 1e-15);
    assert!((0.0..=1.0).contains(&ab));
    assert!(mean_tvd(&a, &Fixed(vec![0.5, 0.5]), &q).is_err());
}
