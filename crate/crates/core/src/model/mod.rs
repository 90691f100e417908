//! BERT-style post-LayerNorm encoder trained with masked language modeling.

mod attention;
mod batch;
mod forward;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{rng_for, Stream};

pub use attention::{AttentionTensor, SentenceAttention};
pub use batch::{corrupt_token, mask_batch, MlmBatch, IGNORE};
pub use forward::{mlm_loss, token_likelihood, EncoderVars, ForwardOutput, MaskQuery, MaskedLm, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub tie_output: bool,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_model: 128,
            d_ff: 512,
            max_len: 16,
            vocab_size: 0,
            dropout: 0.1,
            tie_output: true,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layers, heads, d_model and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_len < 3 {
            return bad("max_len must fit CLS, one word and SEP".into());
        }
        if self.vocab_size <= crate::grammar::NUM_SPECIAL as usize {
            return bad("vocab_size must exceed the special symbols".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

/// Kind of parameter, used for initialization and weight-decay grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn spec(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = alloc::vec![
        ("embed.token".to_string(), alloc::vec![v, d], Init::Normal),
        ("embed.position".to_string(), alloc::vec![cfg.max_len, d], Init::Normal),
        ("embed.norm.gain".to_string(), alloc::vec![d], Init::Ones),
        ("embed.norm.bias".to_string(), alloc::vec![d], Init::Zeros),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("attn.query.weight"), alloc::vec![d, d], Init::Normal),
            (p("attn.query.bias"), alloc::vec![d], Init::Zeros),
            (p("attn.key.weight"), alloc::vec![d, d], Init::Normal),
            (p("attn.key.bias"), alloc::vec![d], Init::Zeros),
            (p("attn.value.weight"), alloc::vec![d, d], Init::Normal),
            (p("attn.value.bias"), alloc::vec![d], Init::Zeros),
            (p("attn.output.weight"), alloc::vec![d, d], Init::Normal),
            (p("attn.output.bias"), alloc::vec![d], Init::Zeros),
            (p("attn.norm.gain"), alloc::vec![d], Init::Ones),
            (p("attn.norm.bias"), alloc::vec![d], Init::Zeros),
            (p("ffn.in.weight"), alloc::vec![d, f], Init::Normal),
            (p("ffn.in.bias"), alloc::vec![f], Init::Zeros),
            (p("ffn.out.weight"), alloc::vec![f, d], Init::Normal),
            (p("ffn.out.bias"), alloc::vec![d], Init::Zeros),
            (p("ffn.norm.gain"), alloc::vec![d], Init::Ones),
            (p("ffn.norm.bias"), alloc::vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("head.transform.weight".to_string(), alloc::vec![d, d], Init::Normal),
        ("head.transform.bias".to_string(), alloc::vec![d], Init::Zeros),
        ("head.norm.gain".to_string(), alloc::vec![d], Init::Ones),
        ("head.norm.bias".to_string(), alloc::vec![d], Init::Zeros),
        ("head.output.bias".to_string(), alloc::vec![v], Init::Zeros),
    ]);
    if !cfg.tie_output {
        out.push(("head.output.weight".to_string(), alloc::vec![v, d], Init::Normal));
    }
    out
}

/// Standard normal draw (Box-Muller).
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

impl ModelParams {
    /// Fresh parameters: N(0, init_std) matrices, zero biases, unit gains.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, Stream::Init, 0);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in spec(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| cfg.init_std * standard_normal(&mut rng)).collect(),
                Init::Zeros => alloc::vec![0.0; n],
                Init::Ones => alloc::vec![1.0; n],
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { names, tensors })
    }

    /// Checks names and shapes against a config (e.g. after loading).
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = spec(cfg);
        if expected.len() != self.tensors.len() || self.names.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape, _), (n, t)) in expected.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::ShapeMismatch(format!("{n} {:?}, expected {name} {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Biases, norm parameters and embeddings-free vectors skip weight decay.
    pub fn no_decay_mask(&self) -> Vec<bool> {
        self.names
            .iter()
            .map(|n| n.ends_with(".bias") || n.contains(".norm."))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}
