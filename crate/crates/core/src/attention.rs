//! Multi-head self-attention with a stabilized softmax and optional GELU
//! smoothing of the scaled logits.
//!
//! For each head `h`, with `d = head_dim`:
//!
//! ```text
//! logits_h = Q_h K_hᵀ / √d
//! logits_h = gelu(logits_h)              if logit_smoothing
//! probs_h  = softmax(logits_h)            row-wise, stable or naive
//! out      = concat_h(probs_h V_h) W_o + b_o
//! ```
//!
//! There is no causal mask: every token of the lookback window attends to
//! every other token.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{self, SoftmaxKind};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    /// Apply GELU to the scaled logits before the softmax.
    pub logit_smoothing: bool,
    pub softmax_kind: SoftmaxKind,
    /// Dropout on the attention probabilities, training only.
    pub attn_dropout: f64,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Self {
        AttentionConfig {
            model_dim,
            num_heads,
            logit_smoothing: true,
            softmax_kind: SoftmaxKind::Stable,
            attn_dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config(
                "model_dim and num_heads must be positive".into(),
            ));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::Config(format!(
                "attention dropout {} outside [0, 1)",
                self.attn_dropout
            )));
        }
        Ok(())
    }
}

/// Fused projection weights: one `[model_dim × model_dim]` matrix per role,
/// sliced into heads along the output axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

/// The same parameters, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl AttentionParams {
    pub fn zeros(model_dim: usize) -> Self {
        let w = || Tensor::zeros(&[model_dim, model_dim]);
        let b = || Tensor::zeros(&[model_dim]);
        AttentionParams {
            w_q: w(),
            b_q: b(),
            w_k: w(),
            b_k: b(),
            w_v: w(),
            b_v: b(),
            w_o: w(),
            b_o: b(),
        }
    }

    /// Weights and biases uniform in `±sqrt(1/model_dim)`.
    pub fn init(model_dim: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / model_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| dist.sample(rng));
        AttentionParams {
            w_q: draw(&[model_dim, model_dim]),
            b_q: draw(&[model_dim]),
            w_k: draw(&[model_dim, model_dim]),
            b_k: draw(&[model_dim]),
            w_v: draw(&[model_dim, model_dim]),
            b_v: draw(&[model_dim]),
            w_o: draw(&[model_dim, model_dim]),
            b_o: draw(&[model_dim]),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
        ]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        let mut reg = |t: &Tensor| tape.leaf(t.clone(), trainable);
        AttentionVars {
            w_q: reg(&self.w_q),
            b_q: reg(&self.b_q),
            w_k: reg(&self.w_k),
            b_k: reg(&self.b_k),
            w_v: reg(&self.w_v),
            b_v: reg(&self.b_v),
            w_o: reg(&self.w_o),
            b_o: reg(&self.b_o),
        }
    }
}

impl AttentionVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o, self.b_o,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `[batch × tokens × model_dim]`
    pub out: Var,
    /// `[batch × heads × tokens × tokens]`, before dropout.
    pub probs: Var,
    /// Largest `|QKᵀ/√d|` over all heads, before smoothing.
    pub max_abs_logit: f64,
    pub nonfinite_logits: usize,
    /// Only ever nonzero with the naive softmax.
    pub nonfinite_probs: usize,
}

/// Splits `[B, T, D]` into heads `[B, H, T, D/H]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, t, heads, d / heads])?;
    tape.permute(x, &[0, 2, 1, 3])
}

fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, t, hd) = (s[0], s[1], s[2], s[3]);
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b, t, h * hd])
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Inverted dropout: zero each entry with probability `p` and scale the
/// survivors by `1/(1-p)`, so the expectation is unchanged.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

/// Self-attention over `x: [batch × tokens × model_dim]`.
///
/// Passing `rng` selects training mode (dropout active); `None` is evaluation.
pub fn attention_forward(
    tape: &mut Tape,
    x: Var,
    cfg: &AttentionConfig,
    params: &AttentionVars,
    rng: Option<&mut Rng>,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.model_dim {
        return Err(Error::dim(format!(
            "attention input must be [batch, tokens, {}], got {shape:?}",
            cfg.model_dim
        )));
    }
    let q = linear(tape, x, params.w_q, params.b_q)?;
    let k = linear(tape, x, params.w_k, params.b_k)?;
    let v = linear(tape, x, params.w_v, params.b_v)?;
    let q = split_heads(tape, q, cfg.num_heads)?;
    let k = split_heads(tape, k, cfg.num_heads)?;
    let v = split_heads(tape, v, cfg.num_heads)?;

    let kt = tape.transpose_last(k)?;
    let scores = tape.matmul(q, kt)?;
    let logits = tape.scale(scores, 1.0 / (cfg.head_dim() as f64).sqrt())?;

    let logit_values = tape.value(logits).data();
    let nonfinite_logits = logit_values.iter().filter(|v| !v.is_finite()).count();
    let max_abs_logit = logit_values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if nonfinite_logits > 0 && cfg.softmax_kind == SoftmaxKind::Stable {
        return Err(Error::Instability(format!(
            "{nonfinite_logits} non-finite attention logits"
        )));
    }

    let logits = if cfg.logit_smoothing {
        numerics::gelu(tape, logits)?
    } else {
        logits
    };
    let probs = cfg.softmax_kind.apply(tape, logits)?;
    let nonfinite_probs = tape
        .value(probs)
        .data()
        .iter()
        .filter(|v| !v.is_finite())
        .count();

    let weights = match rng {
        Some(rng) => dropout(tape, probs, cfg.attn_dropout, rng)?,
        None => probs,
    };
    let context = tape.matmul(weights, v)?;
    let context = merge_heads(tape, context)?;
    let out = linear(tape, context, params.w_o, params.b_o)?;
    Ok(AttentionOutput {
        out,
        probs,
        max_abs_logit,
        nonfinite_logits,
        nonfinite_probs,
    })
}

/// Normalized row entropy summary for one head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadEntropy {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Number of attention rows summarized.
    pub rows: usize,
}

/// Per-head attention entropy, each row's entropy divided by `ln(tokens)`.
///
/// 1 means uniform attention, 0 means every row is one-hot. A single-token
/// window is reported as 1 (its only distribution is trivially uniform).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntropyStats {
    pub heads: Vec<HeadEntropy>,
}

impl EntropyStats {
    /// Mean over all rows of all heads.
    pub fn mean(&self) -> f64 {
        let rows: usize = self.heads.iter().map(|h| h.rows).sum();
        if rows == 0 {
            return f64::NAN;
        }
        self.heads
            .iter()
            .map(|h| h.mean * h.rows as f64)
            .sum::<f64>()
            / rows as f64
    }

    pub fn min(&self) -> f64 {
        self.heads
            .iter()
            .map(|h| h.min)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.heads
            .iter()
            .map(|h| h.max)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest per-head mean; the collapse alarm looks at this.
    pub fn min_head_mean(&self) -> f64 {
        self.heads
            .iter()
            .map(|h| h.mean)
            .fold(f64::INFINITY, f64::min)
    }

    /// Folds another batch's statistics into this one (row-weighted).
    pub fn merge(&mut self, other: &EntropyStats) {
        if self.heads.is_empty() {
            self.heads = other.heads.clone();
            return;
        }
        assert_eq!(self.heads.len(), other.heads.len(), "head count");
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            let rows = a.rows + b.rows;
            a.mean = (a.mean * a.rows as f64 + b.mean * b.rows as f64) / rows as f64;
            a.min = a.min.min(b.min);
            a.max = a.max.max(b.max);
            a.rows = rows;
        }
    }
}

/// Normalized entropy of every attention row, grouped by head.
pub fn normalized_row_entropies(probs: &Tensor) -> Result<Vec<Vec<f64>>> {
    let s = probs.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::dim(format!(
            "attention probabilities must be [batch, heads, tokens, tokens], got {s:?}"
        )));
    }
    let (batch, heads, tokens) = (s[0], s[1], s[2]);
    let h = numerics::row_entropy(probs)?;
    let norm = (tokens as f64).ln();
    let mut per_head = vec![Vec::with_capacity(batch * tokens); heads];
    for (i, &v) in h.data().iter().enumerate() {
        let head = (i / tokens) % heads;
        per_head[head].push(if tokens == 1 {
            1.0
        } else {
            (v / norm).clamp(0.0, 1.0)
        });
    }
    Ok(per_head)
}

pub fn attention_entropy(probs: &Tensor) -> Result<EntropyStats> {
    let heads = normalized_row_entropies(probs)?
        .into_iter()
        .map(|rows| HeadEntropy {
            mean: rows.iter().sum::<f64>() / rows.len() as f64,
            min: rows.iter().copied().fold(f64::INFINITY, f64::min),
            max: rows.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            rows: rows.len(),
        })
        .collect();
    Ok(EntropyStats { heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = Rng::seed_from_u64(3);
        let cfg = AttentionConfig::new(4, 2);
        let params = AttentionParams::init(4, &mut rng);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let x = tape.constant(Tensor::from_fn(&[2, 1, 4], |i| i as f64 * 0.3 - 1.0));
        let out = attention_forward(&mut tape, x, &cfg, &vars, None).unwrap();
        assert!(tape.value(out.probs).data().iter().all(|&p| p == 1.0));
        assert_eq!(tape.shape(out.probs), &[2, 2, 1, 1]);
    }

    #[test]
    fn zero_input_gives_uniform_attention_and_zero_output() {
        let mut rng = Rng::seed_from_u64(5);
        let cfg = AttentionConfig::new(6, 3);
        let mut params = AttentionParams::init(6, &mut rng);
        for (name, t) in params.named_mut() {
            if name.starts_with('b') {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 5, 6]));
        let out = attention_forward(&mut tape, x, &cfg, &vars, None).unwrap();
        assert!(tape
            .value(out.probs)
            .data()
            .iter()
            .all(|&p| (p - 0.2).abs() < 1e-15));
        assert!(tape.value(out.out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(6, 4).validate().is_err());
        let mut cfg = AttentionConfig::new(8, 4);
        cfg.attn_dropout = 1.0;
        assert!(cfg.validate().is_err());
        cfg.attn_dropout = 0.3;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.head_dim(), 2);
    }

    #[test]
    fn entropy_of_uniform_and_identity() {
        let uniform = Tensor::full(&[2, 2, 3, 3], 1.0 / 3.0);
        let stats = attention_entropy(&uniform).unwrap();
        for h in &stats.heads {
            assert!((h.mean - 1.0).abs() < 1e-15 && (h.min - 1.0).abs() < 1e-15);
        }
        let eye = Tensor::from_fn(
            &[1, 2, 3, 3],
            |i| if i % 3 == (i / 3) % 3 { 1.0 } else { 0.0 },
        );
        let stats = attention_entropy(&eye).unwrap();
        assert_eq!(stats.mean(), 0.0);
        assert_eq!(stats.max(), 0.0);
    }

    #[test]
    fn merge_is_row_weighted() {
        let mut a = EntropyStats {
            heads: vec![HeadEntropy {
                mean: 1.0,
                min: 1.0,
                max: 1.0,
                rows: 1,
            }],
        };
        let b = EntropyStats {
            heads: vec![HeadEntropy {
                mean: 0.0,
                min: 0.0,
                max: 0.0,
                rows: 3,
            }],
        };
        a.merge(&b);
        assert_eq!(a.heads[0].mean, 0.25);
        assert_eq!(a.heads[0].rows, 4);
        assert_eq!(a.min(), 0.0);
    }
}
