//! Shared fixtures and loop-based reference implementations.
#![allow(dead_code)]

use latst::attention::AttentionParams;
use latst::autodiff::{Tape, Var};
use latst::error::Result;
use latst::model::{Activation, ModelConfig, ModelParams};
use latst::numerics::gelu_scalar;
use latst::tensor::Tensor;
use latst::Rng;
use rand::{Rng as _, SeedableRng};

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Magnitudes in `[lo, hi)` with random signs.
pub fn signed(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

pub fn integers(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-9i32..=9) as f64)
}

/// One channel, lookback 8, two patches of 4, width 4, one head, horizon 2.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels: 1,
        lookback: 8,
        horizon: 2,
        patch_len: 4,
        patch_stride: 4,
        model_dim: 4,
        ffn_dim: 6,
        num_heads: 1,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Fills every parameter with random values; RevIN scale stays in `[0.5, 1.5)`.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let mut p = latst::model::init_params(cfg, seed).unwrap();
    for (name, t) in p.named_mut() {
        let fresh = match name.as_str() {
            "revin.gamma" | "norm1.scale" | "norm2.scale" => uniform(&mut r, t.shape(), 0.5, 1.5),
            "ffn.prelu" => uniform(&mut r, t.shape(), 0.1, 0.4),
            _ => uniform(&mut r, t.shape(), -0.8, 0.8),
        };
        *t = fresh;
    }
    p
}

fn row(m: &Tensor, i: usize) -> &[f64] {
    let cols = m.shape()[1];
    &m.data()[i * cols..(i + 1) * cols]
}

/// `x [T × D] · w [D × E] + b [E]`
fn affine(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (d, e) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|xi| {
            (0..e)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += xi[k] * w.data()[k * e + j];
                    }
                    s + b.data()[j]
                })
                .collect()
        })
        .collect()
}

/// Self-attention for one sequence `x [T × D]`, head by head with explicit
/// loops: `softmax(QKᵀ/√d)·V` per head, concatenated, then the output map.
pub fn attention_oracle(
    x: &[Vec<f64>],
    p: &AttentionParams,
    heads: usize,
    smoothing: bool,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let t = x.len();
    let d = x[0].len();
    let hd = d / heads;
    let q = affine(x, &p.w_q, &p.b_q);
    let k = affine(x, &p.w_k, &p.b_k);
    let v = affine(x, &p.w_v, &p.b_v);
    let mut concat = vec![vec![0.0; d]; t];
    let mut probs = Vec::new();
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut ph = vec![vec![0.0; t]; t];
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for c in cols.clone() {
                    s += q[i][c] * k[j][c];
                }
                s /= (hd as f64).sqrt();
                logits[j] = if smoothing { gelu_scalar(s) } else { s };
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..t {
                ph[i][j] = (logits[j] - m).exp() / z;
            }
            for c in cols.clone() {
                let mut s = 0.0;
                for j in 0..t {
                    s += ph[i][j] * v[j][c];
                }
                concat[i][c] = s;
            }
        }
        probs.push(ph);
    }
    (affine(&concat, &p.w_o, &p.b_o), probs)
}

fn layer_norm(x: &[Vec<f64>], scale: &Tensor, offset: &Tensor) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - m) / s * scale.data()[j] + offset.data()[j])
                .collect()
        })
        .collect()
}

/// Whole-model forecast for one window `x [C × L]`, evaluation mode, written
/// as nested loops over channels, tokens and features.
pub fn model_oracle(cfg: &ModelConfig, p: &ModelParams, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let l = cfg.lookback;
    let tokens = cfg.token_count();
    let d = cfg.model_dim;
    let mut out = Vec::new();
    for (c, series) in x.iter().enumerate() {
        let mean = series.iter().sum::<f64>() / l as f64;
        let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
        let std = (var + cfg.revin_eps).sqrt();
        let (g, b) = (p.revin_gamma.data()[c], p.revin_beta.data()[c]);
        let norm: Vec<f64> = series
            .iter()
            .map(|v| {
                let z = (v - mean) / std;
                if cfg.revin_affine {
                    z * g + b
                } else {
                    z
                }
            })
            .collect();

        let patches: Vec<Vec<f64>> = (0..tokens)
            .map(|t| norm[t * cfg.patch_stride..t * cfg.patch_stride + cfg.patch_len].to_vec())
            .collect();
        let mut h = affine(&patches, &p.patch_w, &p.patch_b);
        if cfg.positional_embedding {
            for (t, ht) in h.iter_mut().enumerate() {
                for (j, v) in ht.iter_mut().enumerate() {
                    *v += row(&p.positional, t)[j];
                }
            }
        }

        let a_in = layer_norm(&h, &p.norm1_scale, &p.norm1_offset);
        let (a_out, _) = attention_oracle(&a_in, &p.attention, cfg.num_heads, cfg.logit_smoothing);
        for t in 0..tokens {
            for j in 0..d {
                h[t][j] += a_out[t][j];
            }
        }

        let f_in = layer_norm(&h, &p.norm2_scale, &p.norm2_offset);
        let mut hidden = affine(&f_in, &p.ffn_w1, &p.ffn_b1);
        for r in hidden.iter_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                *v = match cfg.ffn_activation {
                    Activation::Prelu => {
                        if *v >= 0.0 {
                            *v
                        } else {
                            p.prelu_slopes.data()[j] * *v
                        }
                    }
                    Activation::Relu => v.max(0.0),
                    Activation::Gelu => gelu_scalar(*v),
                };
            }
        }
        let f_out = affine(&hidden, &p.ffn_w2, &p.ffn_b2);
        for t in 0..tokens {
            for j in 0..d {
                h[t][j] += f_out[t][j];
            }
        }

        let flat: Vec<f64> = h.concat();
        let y = affine(&[flat], &p.head_w, &p.head_b).remove(0);
        out.push(
            y.iter()
                .map(|v| {
                    let z = if cfg.revin_affine { (v - b) / g } else { *v };
                    z * std + mean
                })
                .collect(),
        );
    }
    out
}

/// `Σ w ⊙ f(inputs)` with fixed weights in `[0.5, 1.5)`.
pub fn weighted<F>(f: F, seed: u64) -> impl Fn(&mut Tape, &[Var]) -> Result<Var>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    move |tape, vars| {
        let y = f(tape, vars)?;
        let shape = tape.shape(y).to_vec();
        let w = tape.constant(uniform(&mut rng(seed ^ 0x5eed), &shape, 0.5, 1.5));
        let y = tape.mul(y, w)?;
        tape.sum_all(y)
    }
}

pub type Op = (
    &'static str,
    Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
    Box<dyn Fn(&mut latst::Rng) -> Vec<Tensor>>,
);

/// Rows whose entries are a shuffled ladder, so no two lie within the step.
pub fn distinct_rows(r: &mut latst::Rng, rows: usize, cols: usize) -> Tensor {
    use rand::seq::SliceRandom;
    let mut data = Vec::new();
    for _ in 0..rows {
        let mut ladder: Vec<f64> = (0..cols).map(|i| i as f64 * 0.3).collect();
        ladder.shuffle(r);
        data.extend(ladder);
    }
    Tensor::new(&[rows, cols], data).unwrap()
}

pub fn primitive_ops() -> Vec<Op> {
    fn pos(r: &mut latst::Rng, s: &[usize]) -> Tensor {
        uniform(r, s, 0.5, 1.5)
    }
    vec![
        (
            "matmul",
            Box::new(|t, v| t.matmul(v[0], v[1])),
            Box::new(|r| vec![pos(r, &[3, 4]), pos(r, &[4, 2])]),
        ),
        (
            "batched matmul",
            Box::new(|t, v| t.matmul(v[0], v[1])),
            Box::new(|r| vec![pos(r, &[2, 3, 4]), pos(r, &[2, 4, 2])]),
        ),
        (
            "shared-rhs matmul",
            Box::new(|t, v| t.matmul(v[0], v[1])),
            Box::new(|r| vec![pos(r, &[2, 3, 4]), pos(r, &[4, 2])]),
        ),
        (
            "add",
            Box::new(|t, v| t.add(v[0], v[1])),
            Box::new(|r| vec![signed(r, &[2, 3], 0.5, 2.0), signed(r, &[2, 3], 0.5, 2.0)]),
        ),
        (
            "add leading broadcast",
            Box::new(|t, v| t.add(v[0], v[1])),
            Box::new(|r| vec![pos(r, &[2, 3]), pos(r, &[3])]),
        ),
        (
            "sub trailing broadcast",
            Box::new(|t, v| t.sub(v[0], v[1])),
            Box::new(|r| vec![pos(r, &[2, 3]), pos(r, &[2, 1])]),
        ),
        (
            "mul",
            Box::new(|t, v| t.mul(v[0], v[1])),
            Box::new(|r| vec![signed(r, &[2, 3], 0.5, 2.0), signed(r, &[2, 3], 0.5, 2.0)]),
        ),
        (
            "div",
            Box::new(|t, v| t.div(v[0], v[1])),
            Box::new(|r| vec![signed(r, &[2, 3], 0.5, 2.0), uniform(r, &[3], 1.0, 2.0)]),
        ),
        (
            "exp",
            Box::new(|t, v| t.exp(v[0])),
            Box::new(|r| vec![uniform(r, &[5], -2.0, 2.0)]),
        ),
        (
            "log",
            Box::new(|t, v| t.log(v[0])),
            Box::new(|r| vec![uniform(r, &[5], 0.5, 3.0)]),
        ),
        (
            "neg",
            Box::new(|t, v| t.neg(v[0])),
            Box::new(|r| vec![uniform(r, &[5], -2.0, 2.0)]),
        ),
        (
            "scale",
            Box::new(|t, v| t.scale(v[0], -1.7)),
            Box::new(|r| vec![uniform(r, &[5], -2.0, 2.0)]),
        ),
        (
            "add_scalar",
            Box::new(|t, v| t.add_scalar(v[0], 3.0)),
            Box::new(|r| vec![uniform(r, &[5], -2.0, 2.0)]),
        ),
        (
            "sqrt",
            Box::new(|t, v| t.sqrt(v[0])),
            Box::new(|r| vec![uniform(r, &[5], 0.5, 3.0)]),
        ),
        (
            "relu",
            Box::new(|t, v| t.relu(v[0])),
            Box::new(|r| vec![signed(r, &[6], 0.2, 2.0)]),
        ),
        (
            "gelu",
            Box::new(|t, v| t.gelu(v[0])),
            Box::new(|r| vec![uniform(r, &[6], -0.3, 3.0)]),
        ),
        (
            "prelu",
            Box::new(|t, v| t.prelu(v[0], v[1])),
            Box::new(|r| vec![signed(r, &[4, 3], 0.2, 2.0), uniform(r, &[3], 0.1, 0.5)]),
        ),
        (
            "sum axis 0",
            Box::new(|t, v| t.sum(v[0], 0)),
            Box::new(|r| vec![uniform(r, &[3, 4], -1.0, 1.0)]),
        ),
        (
            "mean axis 1",
            Box::new(|t, v| t.mean(v[0], 1)),
            Box::new(|r| vec![uniform(r, &[3, 4], -1.0, 1.0)]),
        ),
        (
            "max axis 1",
            Box::new(|t, v| t.max(v[0], 1)),
            Box::new(|r| vec![distinct_rows(r, 3, 4)]),
        ),
        (
            "sum_all",
            Box::new(|t, v| t.sum_all(v[0])),
            Box::new(|r| vec![uniform(r, &[2, 3], -1.0, 1.0)]),
        ),
        (
            "mean_all",
            Box::new(|t, v| t.mean_all(v[0])),
            Box::new(|r| vec![uniform(r, &[2, 3], -1.0, 1.0)]),
        ),
        (
            "reshape",
            Box::new(|t, v| t.reshape(v[0], &[3, 2])),
            Box::new(|r| vec![uniform(r, &[2, 3], -1.0, 1.0)]),
        ),
        (
            "gather",
            Box::new(|t, v| t.gather(v[0], &[2, 4], vec![0, 1, 1, 5, 2, 2, 2, 3])),
            Box::new(|r| vec![uniform(r, &[6], -1.0, 1.0)]),
        ),
        (
            "permute",
            Box::new(|t, v| t.permute(v[0], &[2, 0, 1])),
            Box::new(|r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)]),
        ),
        (
            "transpose_last",
            Box::new(|t, v| t.transpose_last(v[0])),
            Box::new(|r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)]),
        ),
    ]
}
