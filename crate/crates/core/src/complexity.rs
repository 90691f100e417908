//! Complexity and similarity measurements over checkpoints: TwoNN intrinsic
//! dimension, weight norm, gradient-norm Fisher proxy, attention entropy and
//! distance profile, linear CKA and total variation distance.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionTensor, MaskQuery, MaskedLm, MlmBatch, Model, ModelParams};
use crate::numerics::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `1 - cos(x, y)`
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec<f64>>,
    pub metric: Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdEstimate {
    pub dimension: f64,
    pub points_used: usize,
    pub trimmed: usize,
}

fn distance(metric: Distance, a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    match metric {
        Distance::Euclidean => libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()),
        Distance::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (1.0 - dot / (na * nb)).max(0.0)
        }
    }
}

/// TwoNN intrinsic dimension from the ratios `μ = r2 / r1` of second- to
/// first-neighbour distances.
///
/// The largest `trim` fraction of ratios is treated as right-censored at the
/// largest kept ratio, giving the Pareto maximum-likelihood estimate
/// `k / (Σ_{i≤k} ln μ_(i) + (n−k) ln μ_(k))`.
pub fn twonn_id(cloud: &PointCloud, trim: f64) -> Result<IdEstimate> {
    if !(0.0..1.0).contains(&trim) {
        return Err(Error::InvalidConfig(format!("trim fraction {trim}")));
    }
    let mut pts: Vec<&Vec<f64>> = cloud.points.iter().collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    pts.dedup();
    let n = pts.len();
    if n < 10 {
        return Err(Error::Degenerate(format!("{n} distinct points, need at least 10")));
    }
    let norms: Vec<f64> = pts.iter().map(|p| libm::sqrt(p.iter().map(|x| x * x).sum())).collect();
    if cloud.metric == Distance::Cosine && norms.contains(&0.0) {
        return Err(Error::Degenerate("zero vector under cosine distance".into()));
    }
    let mut mu = Vec::with_capacity(n);
    for i in 0..n {
        let (mut r1, mut r2) = (f64::INFINITY, f64::INFINITY);
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = distance(cloud.metric, pts[i], pts[j], norms[i], norms[j]);
            if d < r1 {
                r2 = r1;
                r1 = d;
            } else if d < r2 {
                r2 = d;
            }
        }
        if r1 <= 0.0 {
            return Err(Error::Degenerate("coincident nearest neighbours".into()));
        }
        mu.push(r2 / r1);
    }
    mu.sort_by(|a, b| a.total_cmp(b));
    let k = libm::floor((1.0 - trim) * n as f64).max(1.0) as usize;
    let kept: f64 = mu[..k].iter().map(|m| libm::log(*m)).sum();
    let censored = (n - k) as f64 * libm::log(mu[k - 1]);
    let denom = kept + censored;
    if denom.is_nan() || denom <= 0.0 {
        return Err(Error::Degenerate("all neighbour ratios equal one".into()));
    }
    Ok(IdEstimate {
        dimension: k as f64 / denom,
        points_used: n,
        trimmed: n - k,
    })
}

/// CLS embeddings of `sentences` under the model.
pub fn cls_cloud(model: &Model, sentences: &[&[u32]], batch_size: usize) -> Result<PointCloud> {
    let mut points = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(batch_size.max(1)) {
        let b = MlmBatch::unmasked(chunk, model.config.max_len)?;
        points.extend(model.forward(&b)?.cls);
    }
    Ok(PointCloud {
        points,
        metric: Distance::Cosine,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSubset {
    #[default]
    All,
    /// Output head only.
    Head,
}

pub fn weight_norm(params: &ModelParams, subset: NormSubset) -> Result<f64> {
    if params.tensors.is_empty() {
        return Err(Error::Empty("parameters"));
    }
    let mut sq = 0.0;
    let mut any = false;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        if subset == NormSubset::All || name.starts_with("head.") {
            sq += t.sq_norm();
            any = true;
        }
    }
    if !any {
        return Err(Error::Empty("selected parameters"));
    }
    Ok(libm::sqrt(sq))
}

/// Masked-LM loss and its parameter gradients, dropout off.
pub fn mlm_gradients(model: &Model, batch: &MlmBatch) -> Result<(f64, Vec<crate::numerics::Tensor>)> {
    let mut g = Graph::new();
    let enc = model.encode(&mut g, batch, None, true)?;
    let logits = model.head(&mut g, &enc, &batch.target_rows())?;
    let loss = g.cross_entropy(logits, &batch.target_ids())?;
    let value = g.value(loss).data()[0];
    let params = enc.params.clone();
    let mut grads = g.backward(loss)?;
    let grads = params
        .iter()
        .map(|&v| grads.take(v).ok_or(Error::Degenerate("missing parameter gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

/// Mean over batches of `‖∇ L_MLM‖²`.
pub fn fisher_approx(model: &Model, batches: &[MlmBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Empty("batches"));
    }
    let mut total = 0.0;
    for b in batches {
        let (_, grads) = mlm_gradients(model, b)?;
        let sq: f64 = grads.iter().map(|t| t.sq_norm()).sum();
        if !sq.is_finite() {
            return Err(Error::NonFinite("fisher gradient"));
        }
        total += sq;
    }
    Ok(total / batches.len() as f64)
}

/// Mean Shannon entropy (nats) of attention rows at valid query positions.
pub fn attention_entropy(attn: &AttentionTensor) -> Result<f64> {
    let mut sum = 0.0;
    let mut rows = 0usize;
    for b in 0..attn.batch {
        let len = attn.lengths[b];
        for l in 0..attn.layers {
            for h in 0..attn.heads {
                for i in 0..len {
                    let mut e = 0.0;
                    for j in 0..len {
                        let p = attn.get(b, l, h, i, j);
                        if p > 0.0 {
                            e -= p * libm::log(p);
                        }
                    }
                    sum += e;
                    rows += 1;
                }
            }
        }
    }
    if rows == 0 {
        return Err(Error::Empty("attention rows"));
    }
    Ok(sum / rows as f64)
}

/// For each signed offset `o` in `-max..=max`, the mean weight that a target
/// position `t` places on token `t + o`, over targets, layers and heads.
/// Offsets that fall outside a sentence are skipped for that target.
pub fn attention_by_distance(attn: &AttentionTensor, targets: &[(usize, usize)], max_offset: usize) -> Result<Vec<(i64, f64)>> {
    if targets.is_empty() {
        return Err(Error::Empty("target positions"));
    }
    let m = max_offset as i64;
    let mut sums = alloc::vec![0.0; 2 * max_offset + 1];
    let mut counts = alloc::vec![0usize; 2 * max_offset + 1];
    for &(b, t) in targets {
        let len = attn.lengths[b] as i64;
        if t as i64 >= len {
            return Err(Error::OutOfRange(format!("target ({b}, {t}) beyond length {len}")));
        }
        for o in -m..=m {
            let k = t as i64 + o;
            if k < 0 || k >= len {
                continue;
            }
            let slot = (o + m) as usize;
            for l in 0..attn.layers {
                for h in 0..attn.heads {
                    sums[slot] += attn.get(b, l, h, t, k as usize);
                    counts[slot] += 1;
                }
            }
        }
    }
    Ok((-m..=m)
        .map(|o| {
            let slot = (o + m) as usize;
            (o, if counts[slot] == 0 { 0.0 } else { sums[slot] / counts[slot] as f64 })
        })
        .collect())
}

fn centered(x: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let n = x.len();
    let d = x.first().map_or(0, |r| r.len());
    if n == 0 || d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::ShapeMismatch("ragged or empty activation matrix".into()));
    }
    let mut mean = alloc::vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut out = Vec::with_capacity(n * d);
    for r in x {
        out.extend(r.iter().zip(&mean).map(|(v, m)| v - m));
    }
    Ok((out, d))
}

/// `‖AᵀB‖_F²` for row-major `A[n, da]`, `B[n, db]`.
fn cross_fro2(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut c = alloc::vec![0.0; da * db];
    for r in 0..n {
        let ar = &a[r * da..(r + 1) * da];
        let br = &b[r * db..(r + 1) * db];
        for (i, &x) in ar.iter().enumerate() {
            let row = &mut c[i * db..(i + 1) * db];
            for (cv, &y) in row.iter_mut().zip(br) {
                *cv += x * y;
            }
        }
    }
    c.iter().map(|v| v * v).sum()
}

/// Linear CKA of two activation matrices with aligned rows.
pub fn linear_cka(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} rows", x.len(), y.len())));
    }
    let (xc, dx) = centered(x)?;
    let (yc, dy) = centered(y)?;
    let n = x.len();
    let xx = libm::sqrt(cross_fro2(&xc, dx, &xc, dx, n));
    let yy = libm::sqrt(cross_fro2(&yc, dy, &yc, dy, n));
    let scale = |m: &[Vec<f64>]| m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let tiny = |f: f64, m: &[Vec<f64>]| f <= 1e-12 * n as f64 * scale(m) * scale(m);
    if tiny(xx, x) || tiny(yy, y) {
        return Err(Error::Degenerate("zero-variance activations".into()));
    }
    Ok(cross_fro2(&yc, dy, &xc, dx, n) / (xx * yy))
}

/// `½ Σ |p - q|`
pub fn tvd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} outcomes", p.len(), q.len())));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Mean total variation distance between two models' predictive
/// distributions over the same masked positions.
pub fn mean_tvd<A: MaskedLm + ?Sized, B: MaskedLm + ?Sized>(a: &A, b: &B, queries: &[MaskQuery]) -> Result<f64> {
    if a.vocab_size() != b.vocab_size() {
        return Err(Error::ShapeMismatch(format!(
            "vocabularies {} and {}",
            a.vocab_size(),
            b.vocab_size()
        )));
    }
    if queries.is_empty() {
        return Err(Error::Empty("queries"));
    }
    let (la, lb) = (a.log_probs(queries)?, b.log_probs(queries)?);
    let mut total = 0.0;
    for (x, y) in la.iter().zip(&lb) {
        let p: Vec<f64> = x.iter().map(|v| libm::exp(*v)).collect();
        let q: Vec<f64> = y.iter().map(|v| libm::exp(*v)).collect();
        total += tvd(&p, &q)?;
    }
    Ok(total / queries.len() as f64)
}
