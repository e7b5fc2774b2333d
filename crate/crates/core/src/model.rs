//! The forecasting model: reversible instance normalization around one
//! pre-norm transformer layer over channel-independent patch tokens.
//!
//! ```text
//! x [B, C, L]
//!   → RevIN normalize (per instance and channel, over L)
//!   → patchify        [B·C, T, patch_len]
//!   → patch embedding + positional embedding  [B·C, T, D]
//!   → h + Attention(LayerNorm(h))
//!   → h + FFN(LayerNorm(h)),  FFN = W2 · act(W1 · h)
//!   → flatten [B·C, T·D] → linear head [B·C, P] → [B, C, P]
//!   → RevIN denormalize
//! ```
//!
//! Every channel is tokenized and forecast independently with shared
//! weights; the attention never mixes channels.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::attention::{
    attention_entropy, attention_forward, dropout, AttentionConfig, AttentionOutput,
    AttentionParams, AttentionVars, EntropyStats,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::SoftmaxKind;
use crate::tensor::Tensor;
use crate::Rng;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Feed-forward activation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Prelu,
    Relu,
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Prelu => "prelu",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prelu" => Ok(Activation::Prelu),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!(
                "unknown activation `{other}` (expected prelu, relu or gelu)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub ffn_activation: Activation,
    pub logit_smoothing: bool,
    pub softmax_kind: SoftmaxKind,
    pub revin_affine: bool,
    pub revin_eps: f64,
    pub positional_embedding: bool,
    /// Dropout on the attention and feed-forward residual branches.
    pub dropout: f64,
    /// Dropout on the attention probabilities.
    pub attn_dropout: f64,
    /// Dropout on the flattened tokens entering the head.
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 7,
            lookback: 336,
            horizon: 96,
            patch_len: 16,
            patch_stride: 8,
            model_dim: 16,
            ffn_dim: 128,
            num_heads: 4,
            ffn_activation: Activation::Prelu,
            logit_smoothing: true,
            softmax_kind: SoftmaxKind::Stable,
            revin_affine: true,
            revin_eps: 1e-5,
            positional_embedding: true,
            dropout: 0.3,
            attn_dropout: 0.0,
            head_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// `floor((L − patch_len) / stride) + 1`.
    pub fn token_count(&self) -> usize {
        (self.lookback - self.patch_len) / self.patch_stride + 1
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            logit_smoothing: self.logit_smoothing,
            softmax_kind: self.softmax_kind,
            attn_dropout: self.attn_dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("patch_len", self.patch_len),
            ("patch_stride", self.patch_stride),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.patch_len > self.lookback {
            return Err(Error::Config(format!(
                "patch_len {} exceeds lookback {}",
                self.patch_len, self.lookback
            )));
        }
        if self.revin_eps.is_nan() || self.revin_eps <= 0.0 {
            return Err(Error::Config("revin_eps must be positive".into()));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attn_dropout", self.attn_dropout),
            ("head_dropout", self.head_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        self.attention().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub revin_gamma: Tensor,
    pub revin_beta: Tensor,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub positional: Tensor,
    pub norm1_scale: Tensor,
    pub norm1_offset: Tensor,
    pub attention: AttentionParams,
    pub norm2_scale: Tensor,
    pub norm2_offset: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub prelu_slopes: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// [`ModelParams`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub revin_gamma: Var,
    pub revin_beta: Var,
    pub patch_w: Var,
    pub patch_b: Var,
    pub positional: Var,
    pub norm1_scale: Var,
    pub norm1_offset: Var,
    pub attention: AttentionVars,
    pub norm2_scale: Var,
    pub norm2_offset: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub prelu_slopes: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Same order as [`ModelParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![
            self.revin_gamma,
            self.revin_beta,
            self.patch_w,
            self.patch_b,
            self.positional,
            self.norm1_scale,
            self.norm1_offset,
        ];
        v.extend(self.attention.all());
        v.extend([
            self.norm2_scale,
            self.norm2_offset,
            self.ffn_w1,
            self.ffn_b1,
            self.prelu_slopes,
            self.ffn_w2,
            self.ffn_b2,
            self.head_w,
            self.head_b,
        ]);
        v
    }

    /// Inverse of [`ModelVars::all`].
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        if v.len() != 24 {
            return Err(Error::Contract(format!(
                "expected 24 parameter vars, got {}",
                v.len()
            )));
        }
        Ok(ModelVars {
            revin_gamma: v[0],
            revin_beta: v[1],
            patch_w: v[2],
            patch_b: v[3],
            positional: v[4],
            norm1_scale: v[5],
            norm1_offset: v[6],
            attention: AttentionVars {
                w_q: v[7],
                b_q: v[8],
                w_k: v[9],
                b_k: v[10],
                w_v: v[11],
                b_v: v[12],
                w_o: v[13],
                b_o: v[14],
            },
            norm2_scale: v[15],
            norm2_offset: v[16],
            ffn_w1: v[17],
            ffn_b1: v[18],
            prelu_slopes: v[19],
            ffn_w2: v[20],
            ffn_b2: v[21],
            head_w: v[22],
            head_b: v[23],
        })
    }

    /// Gradients after [`Tape::backward`], zero for parameters the loss does not touch.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.all()
            .into_iter()
            .map(|v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect()
    }
}

impl ModelParams {
    /// Every parameter with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("revin.gamma".into(), &self.revin_gamma),
            ("revin.beta".into(), &self.revin_beta),
            ("patch.w".into(), &self.patch_w),
            ("patch.b".into(), &self.patch_b),
            ("positional".into(), &self.positional),
            ("norm1.scale".into(), &self.norm1_scale),
            ("norm1.offset".into(), &self.norm1_offset),
        ];
        v.extend(
            self.attention
                .named()
                .into_iter()
                .map(|(n, t)| (format!("attn.{n}"), t)),
        );
        v.extend([
            ("norm2.scale".into(), &self.norm2_scale),
            ("norm2.offset".into(), &self.norm2_offset),
            ("ffn.w1".into(), &self.ffn_w1),
            ("ffn.b1".into(), &self.ffn_b1),
            ("ffn.prelu".into(), &self.prelu_slopes),
            ("ffn.w2".into(), &self.ffn_w2),
            ("ffn.b2".into(), &self.ffn_b2),
            ("head.w".into(), &self.head_w),
            ("head.b".into(), &self.head_b),
        ]);
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = vec![
            ("revin.gamma".into(), &mut self.revin_gamma),
            ("revin.beta".into(), &mut self.revin_beta),
            ("patch.w".into(), &mut self.patch_w),
            ("patch.b".into(), &mut self.patch_b),
            ("positional".into(), &mut self.positional),
            ("norm1.scale".into(), &mut self.norm1_scale),
            ("norm1.offset".into(), &mut self.norm1_offset),
        ];
        v.extend(
            self.attention
                .named_mut()
                .into_iter()
                .map(|(n, t)| (format!("attn.{n}"), t)),
        );
        v.extend([
            ("norm2.scale".into(), &mut self.norm2_scale),
            ("norm2.offset".into(), &mut self.norm2_offset),
            ("ffn.w1".into(), &mut self.ffn_w1),
            ("ffn.b1".into(), &mut self.ffn_b1),
            ("ffn.prelu".into(), &mut self.prelu_slopes),
            ("ffn.w2".into(), &mut self.ffn_w2),
            ("ffn.b2".into(), &mut self.ffn_b2),
            ("head.w".into(), &mut self.head_w),
            ("head.b".into(), &mut self.head_b),
        ]);
        v
    }

    /// Rebuilds a parameter set from named tensors, checking each shape against `cfg`.
    pub fn from_named(cfg: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = ModelParams::zeros(cfg);
        let mut seen = std::collections::HashSet::new();
        {
            let mut slots = params.named_mut();
            for (name, tensor) in tensors {
                let slot = slots
                    .iter_mut()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
                if slot.1.shape() != tensor.shape() {
                    return Err(Error::Dimension(format!(
                        "tensor `{name}` has shape {:?} in the checkpoint but the config expects {:?}",
                        tensor.shape(),
                        slot.1.shape()
                    )));
                }
                *slot.1 = tensor;
                seen.insert(name);
            }
            if let Some((missing, _)) = slots.iter().find(|(n, _)| !seen.contains(n)) {
                return Err(Error::Checkpoint(format!("missing tensor `{missing}`")));
            }
        }
        Ok(params)
    }

    /// All-zero parameters with the shapes `cfg` implies.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (c, d, f, t, p) = (
            cfg.channels,
            cfg.model_dim,
            cfg.ffn_dim,
            cfg.token_count(),
            cfg.horizon,
        );
        ModelParams {
            revin_gamma: Tensor::zeros(&[c]),
            revin_beta: Tensor::zeros(&[c]),
            patch_w: Tensor::zeros(&[cfg.patch_len, d]),
            patch_b: Tensor::zeros(&[d]),
            positional: Tensor::zeros(&[t, d]),
            norm1_scale: Tensor::zeros(&[d]),
            norm1_offset: Tensor::zeros(&[d]),
            attention: AttentionParams::zeros(d),
            norm2_scale: Tensor::zeros(&[d]),
            norm2_offset: Tensor::zeros(&[d]),
            ffn_w1: Tensor::zeros(&[d, f]),
            ffn_b1: Tensor::zeros(&[f]),
            prelu_slopes: Tensor::zeros(&[f]),
            ffn_w2: Tensor::zeros(&[f, d]),
            ffn_b2: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[t * d, p]),
            head_b: Tensor::zeros(&[p]),
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut reg = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let revin_gamma = reg(&self.revin_gamma);
        let revin_beta = reg(&self.revin_beta);
        let patch_w = reg(&self.patch_w);
        let patch_b = reg(&self.patch_b);
        let positional = reg(&self.positional);
        let norm1_scale = reg(&self.norm1_scale);
        let norm1_offset = reg(&self.norm1_offset);
        let attention = self.attention.register(tape, trainable);
        let mut reg = |t: &Tensor| tape.leaf(t.clone(), trainable);
        ModelVars {
            revin_gamma,
            revin_beta,
            patch_w,
            patch_b,
            positional,
            norm1_scale,
            norm1_offset,
            attention,
            norm2_scale: reg(&self.norm2_scale),
            norm2_offset: reg(&self.norm2_offset),
            ffn_w1: reg(&self.ffn_w1),
            ffn_b1: reg(&self.ffn_b1),
            prelu_slopes: reg(&self.prelu_slopes),
            ffn_w2: reg(&self.ffn_w2),
            ffn_b2: reg(&self.ffn_b2),
            head_w: reg(&self.head_w),
            head_b: reg(&self.head_b),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Seeded initialization: linear layers uniform in `±sqrt(1/fan_in)`,
/// positional embedding `N(0, 0.02²)`, PReLU slopes 0.25, identity RevIN
/// affine and layer norms.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let (c, d, f, t, p) = (
        cfg.channels,
        cfg.model_dim,
        cfg.ffn_dim,
        cfg.token_count(),
        cfg.horizon,
    );
    let uniform = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
        let bound = (1.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    };
    let patch_w = uniform(&[cfg.patch_len, d], cfg.patch_len, &mut rng);
    let patch_b = uniform(&[d], cfg.patch_len, &mut rng);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let positional = Tensor::from_fn(&[t, d], |_| normal.sample(&mut rng));
    let attention = AttentionParams::init(d, &mut rng);
    let ffn_w1 = uniform(&[d, f], d, &mut rng);
    let ffn_b1 = uniform(&[f], d, &mut rng);
    let ffn_w2 = uniform(&[f, d], f, &mut rng);
    let ffn_b2 = uniform(&[d], f, &mut rng);
    let head_w = uniform(&[t * d, p], t * d, &mut rng);
    let head_b = uniform(&[p], t * d, &mut rng);
    Ok(ModelParams {
        revin_gamma: Tensor::ones(&[c]),
        revin_beta: Tensor::zeros(&[c]),
        patch_w,
        patch_b,
        positional,
        norm1_scale: Tensor::ones(&[d]),
        norm1_offset: Tensor::zeros(&[d]),
        attention,
        norm2_scale: Tensor::ones(&[d]),
        norm2_offset: Tensor::zeros(&[d]),
        ffn_w1,
        ffn_b1,
        prelu_slopes: Tensor::full(&[f], 0.25),
        ffn_w2,
        ffn_b2,
        head_w,
        head_b,
    })
}

/// Per-instance, per-channel statistics of the lookback window.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinStats {
    /// `[batch × C]`
    pub mean: Tensor,
    /// `sqrt(var + eps)`, `[batch × C]`; always `>= sqrt(eps)`.
    pub std: Tensor,
}

impl RevinStats {
    /// Two-pass population mean and variance over the last axis of `[B, C, L]`.
    pub fn compute(x: &Tensor, eps: f64) -> Result<Self> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!(
                "expected [batch, channels, length], got {s:?}"
            )));
        }
        if s[2] < 2 {
            return Err(Error::Contract(format!(
                "instance normalization needs a window of at least 2 steps, got {}",
                s[2]
            )));
        }
        let len = s[2] as f64;
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for row in x.rows() {
            let m = row.iter().sum::<f64>() / len;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len;
            mean.push(m);
            std.push((var + eps).sqrt());
        }
        Ok(RevinStats {
            mean: Tensor::new(&s[..2], mean)?,
            std: Tensor::new(&s[..2], std)?,
        })
    }

    /// Stats shaped `[B, C, 1]` for row broadcasting.
    fn column(t: &Tensor) -> Tensor {
        let s = t.shape();
        t.reshape(&[s[0], s[1], 1]).expect("same element count")
    }
}

/// Repeats a per-channel vector `[C]` over `[B, C, X]`.
fn expand_channels(tape: &mut Tape, v: Var, shape: &[usize]) -> Result<Var> {
    let (b, c, x) = (shape[0], shape[1], shape[2]);
    if tape.shape(v) != [c] {
        return Err(Error::dim(format!(
            "per-channel parameter {:?} does not match {c} channels",
            tape.shape(v)
        )));
    }
    let index = (0..b * c * x).map(|i| (i / x) % c).collect();
    tape.gather(v, shape, index)
}

/// `(x − mean) / sqrt(var + eps)` per instance and channel, then `γ·x + β`
/// when `cfg.revin_affine`. Statistics are treated as constants.
pub fn revin_normalize(
    tape: &mut Tape,
    x: Var,
    cfg: &ModelConfig,
    gamma: Var,
    beta: Var,
) -> Result<(Var, RevinStats)> {
    let stats = RevinStats::compute(tape.value(x), cfg.revin_eps)?;
    let shape = tape.shape(x).to_vec();
    let mean = tape.constant(RevinStats::column(&stats.mean));
    let std = tape.constant(RevinStats::column(&stats.std));
    let centered = tape.sub(x, mean)?;
    let mut out = tape.div(centered, std)?;
    if cfg.revin_affine {
        let g = expand_channels(tape, gamma, &shape)?;
        let b = expand_channels(tape, beta, &shape)?;
        out = tape.mul(out, g)?;
        out = tape.add(out, b)?;
    }
    Ok((out, stats))
}

/// Inverse of [`revin_normalize`] applied to a forecast `[B, C, P]`.
pub fn revin_denormalize(
    tape: &mut Tape,
    y: Var,
    stats: &RevinStats,
    cfg: &ModelConfig,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    if shape.len() != 3 || shape[..2] != *stats.mean.shape() {
        return Err(Error::dim(format!(
            "forecast {shape:?} does not match normalization stats {:?}",
            stats.mean.shape()
        )));
    }
    let mut out = y;
    if cfg.revin_affine {
        if let Some(c) = tape.value(gamma).data().iter().position(|&g| g == 0.0) {
            return Err(Error::Domain(format!(
                "cannot invert instance normalization: gamma is zero for channel {c}"
            )));
        }
        let b = expand_channels(tape, beta, &shape)?;
        let g = expand_channels(tape, gamma, &shape)?;
        out = tape.sub(out, b)?;
        out = tape.div(out, g)?;
    }
    let std = tape.constant(RevinStats::column(&stats.std));
    let mean = tape.constant(RevinStats::column(&stats.mean));
    out = tape.mul(out, std)?;
    tape.add(out, mean)
}

/// Cuts `[B, C, L]` into overlapping patches `[B·C, T, patch_len]`, one
/// sequence per channel. Patch `t` covers steps `t·stride .. t·stride + patch_len`;
/// a remainder shorter than a patch is dropped.
pub fn patchify(tape: &mut Tape, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!(
            "expected [batch, channels, length], got {s:?}"
        )));
    }
    let (b, c, l) = (s[0], s[1], s[2]);
    if cfg.patch_len > l {
        return Err(Error::Config(format!(
            "patch_len {} exceeds lookback {l}",
            cfg.patch_len
        )));
    }
    let tokens = (l - cfg.patch_len) / cfg.patch_stride + 1;
    let mut index = Vec::with_capacity(b * c * tokens * cfg.patch_len);
    for n in 0..b * c {
        for t in 0..tokens {
            let start = n * l + t * cfg.patch_stride;
            index.extend(start..start + cfg.patch_len);
        }
    }
    tape.gather(x, &[b * c, tokens, cfg.patch_len], index)
}

/// Layer normalization over the last axis with learned scale and offset.
pub fn layer_norm(tape: &mut Tape, x: Var, scale: Var, offset: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let axis = shape.len() - 1;
    let mut kept = shape.clone();
    kept[axis] = 1;
    let mean = tape.mean(x, axis)?;
    let mean = tape.reshape(mean, &kept)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean(sq, axis)?;
    let var = tape.reshape(var, &kept)?;
    let var = tape.add_scalar(var, LAYER_NORM_EPS)?;
    let std = tape.sqrt(var)?;
    let normed = tape.div(centered, std)?;
    let scaled = tape.mul(normed, scale)?;
    tape.add(scaled, offset)
}

pub struct ForwardOutput {
    /// `[B, C, P]`
    pub y_hat: Var,
    pub attention: AttentionOutput,
    pub stats: RevinStats,
}

impl ForwardOutput {
    pub fn entropy(&self, tape: &Tape) -> Result<EntropyStats> {
        attention_entropy(tape.value(self.attention.probs))
    }
}

/// Full forward pass on `x: [B, C, L]`. `rng` selects training mode (dropout on).
pub fn latst_forward(
    tape: &mut Tape,
    x: Var,
    cfg: &ModelConfig,
    vars: &ModelVars,
    mut rng: Option<&mut Rng>,
) -> Result<ForwardOutput> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != cfg.channels || s[2] != cfg.lookback {
        return Err(Error::dim(format!(
            "model expects input [batch, {}, {}], got {s:?}",
            cfg.channels, cfg.lookback
        )));
    }
    let batch = s[0];
    let tokens = cfg.token_count();
    let d = cfg.model_dim;

    let (x_norm, stats) = revin_normalize(tape, x, cfg, vars.revin_gamma, vars.revin_beta)?;
    let patches = patchify(tape, x_norm, cfg)?;
    let emb = tape.matmul(patches, vars.patch_w)?;
    let mut h = tape.add(emb, vars.patch_b)?;
    if cfg.positional_embedding {
        h = tape.add(h, vars.positional)?;
    }

    let attn_in = layer_norm(tape, h, vars.norm1_scale, vars.norm1_offset)?;
    let attention = attention_forward(
        tape,
        attn_in,
        &cfg.attention(),
        &vars.attention,
        rng.as_deref_mut(),
    )?;
    let branch = match rng.as_deref_mut() {
        Some(r) => dropout(tape, attention.out, cfg.dropout, r)?,
        None => attention.out,
    };
    h = tape.add(h, branch)?;

    let ffn_in = layer_norm(tape, h, vars.norm2_scale, vars.norm2_offset)?;
    let hidden = tape.matmul(ffn_in, vars.ffn_w1)?;
    let hidden = tape.add(hidden, vars.ffn_b1)?;
    let hidden = match cfg.ffn_activation {
        Activation::Prelu => tape.prelu(hidden, vars.prelu_slopes)?,
        Activation::Relu => tape.relu(hidden)?,
        Activation::Gelu => tape.gelu(hidden)?,
    };
    let ffn_out = tape.matmul(hidden, vars.ffn_w2)?;
    let ffn_out = tape.add(ffn_out, vars.ffn_b2)?;
    let branch = match rng.as_deref_mut() {
        Some(r) => dropout(tape, ffn_out, cfg.dropout, r)?,
        None => ffn_out,
    };
    h = tape.add(h, branch)?;

    let mut flat = tape.reshape(h, &[batch * cfg.channels, tokens * d])?;
    if let Some(r) = rng {
        flat = dropout(tape, flat, cfg.head_dropout, r)?;
    }
    let y = tape.matmul(flat, vars.head_w)?;
    let y = tape.add(y, vars.head_b)?;
    let y = tape.reshape(y, &[batch, cfg.channels, cfg.horizon])?;
    let y_hat = revin_denormalize(tape, y, &stats, cfg, vars.revin_gamma, vars.revin_beta)?;
    Ok(ForwardOutput {
        y_hat,
        attention,
        stats,
    })
}

/// Evaluation-mode forecast for a batch `[B, C, L]`, with its attention entropy.
pub fn forecast(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
) -> Result<(Tensor, EntropyStats)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let input = tape.constant(x.clone());
    let out = latst_forward(&mut tape, input, cfg, &vars, None)?;
    let entropy = out.entropy(&tape)?;
    Ok((tape.value(out.y_hat).clone(), entropy))
}
