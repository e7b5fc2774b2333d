mod common;

use common::{attention_oracle, rng, uniform};
use latst::attention::{attention_forward, AttentionConfig, AttentionParams, AttentionVars};
use latst::autodiff::{finite_diff_check_many, Tape};
use latst::error::Error;
use latst::numerics::SoftmaxKind;
use latst::tensor::Tensor;
use proptest::prelude::*;

fn to_rows(x: &Tensor, b: usize) -> Vec<Vec<f64>> {
    let (t, d) = (x.shape()[1], x.shape()[2]);
    (0..t)
        .map(|i| x.data()[(b * t + i) * d..(b * t + i + 1) * d].to_vec())
        .collect()
}

fn forward(
    x: &Tensor,
    cfg: &AttentionConfig,
    p: &AttentionParams,
) -> latst::error::Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = attention_forward(&mut tape, xv, cfg, &vars, None)?;
    Ok((tape.value(out.out).clone(), tape.value(out.probs).clone()))
}

#[test]
fn matches_loop_oracle_on_small_configurations() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        for tokens in 1..=4 {
            for heads in 1..=2 {
                for hd in 1..=3 {
                    for smoothing in [false, true] {
                        let d = heads * hd;
                        let mut r = rng(seed * 1000 + (tokens * 100 + heads * 10 + hd) as u64);
                        let p = AttentionParams::init(d, &mut r);
                        let x = uniform(&mut r, &[2, tokens, d], -2.0, 2.0);
                        let mut cfg = AttentionConfig::new(d, heads);
                        cfg.logit_smoothing = smoothing;
                        let (out, probs) = forward(&x, &cfg, &p).unwrap();
                        for b in 0..2 {
                            let (want, want_p) =
                                attention_oracle(&to_rows(&x, b), &p, heads, smoothing);
                            for i in 0..tokens {
                                for j in 0..d {
                                    let got = out.get(&[b, i, j]);
                                    worst = worst.max((got - want[i][j]).abs());
                                }
                                for h in 0..heads {
                                    for j in 0..tokens {
                                        let got = probs.get(&[b, h, i, j]);
                                        worst = worst.max((got - want_p[h][i][j]).abs());
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

#[test]
fn naive_overflows_where_stable_does_not() {
    let mut r = rng(9);
    let mut p = AttentionParams::init(4, &mut r);
    p.w_q = p.w_q.map(|v| v * 1e3);
    p.w_k = p.w_k.map(|v| v * 1e3);
    let x = Tensor::from_fn(&[1, 4, 4], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
    let mut cfg = AttentionConfig::new(4, 1);
    cfg.logit_smoothing = false;

    cfg.softmax_kind = SoftmaxKind::Naive;
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let naive = attention_forward(&mut tape, xv, &cfg, &vars, None).unwrap();
    assert!(
        naive.nonfinite_probs > 0,
        "max |logit| {}",
        naive.max_abs_logit
    );

    cfg.softmax_kind = SoftmaxKind::Stable;
    let (_, probs) = forward(&x, &cfg, &p).unwrap();
    assert!(probs.is_finite());
    for row in probs.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn stable_kind_refuses_non_finite_logits() {
    let mut p = AttentionParams::zeros(2);
    p.w_q = Tensor::full(&[2, 2], 1e200);
    p.w_k = Tensor::full(&[2, 2], 1e200);
    let x = Tensor::ones(&[1, 2, 2]);
    let err = forward(&x, &AttentionConfig::new(2, 1), &p).unwrap_err();
    assert!(matches!(err, Error::Instability(_)), "{err}");
}

#[test]
fn gradient_check_three_tokens_two_heads() {
    let mut r = rng(21);
    let d = 4;
    let p = AttentionParams::init(d, &mut r);
    let mut inputs = vec![uniform(&mut r, &[2, 3, d], -1.0, 1.0)];
    inputs.extend(p.named().iter().map(|(_, t)| (*t).clone()));
    let cfg = AttentionConfig::new(d, 2);
    let check = finite_diff_check_many(
        |tape, v| {
            let vars = AttentionVars {
                w_q: v[1],
                b_q: v[2],
                w_k: v[3],
                b_k: v[4],
                w_v: v[5],
                b_v: v[6],
                w_o: v[7],
                b_o: v[8],
            };
            let out = attention_forward(tape, v[0], &cfg, &vars, None)?;
            tape.sum_all(out.out)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-4, "{check:?}");
}

#[test]
fn dropout_preserves_the_expectation() {
    let mut r = rng(4);
    let p = AttentionParams::init(2, &mut r);
    let x = uniform(&mut r, &[1, 3, 2], -1.0, 1.0);
    let mut cfg = AttentionConfig::new(2, 1);
    cfg.attn_dropout = 0.3;
    let (clean, _) = forward(&x, &cfg, &p).unwrap();

    let n = 20_000;
    let mut sum = vec![0.0; clean.len()];
    let mut sum_sq = vec![0.0; clean.len()];
    let mut drop_rng = rng(77);
    for _ in 0..n {
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = attention_forward(&mut tape, xv, &cfg, &vars, Some(&mut drop_rng)).unwrap();
        for (i, v) in tape.value(out.out).data().iter().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    for i in 0..clean.len() {
        let mean = sum[i] / n as f64;
        let var = sum_sq[i] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - clean.data()[i]).abs() <= 3.0 * se,
            "element {i}: mean {mean}, clean {}, se {se}",
            clean.data()[i]
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_are_row_stochastic_at_large_weight_scales(
        seed in any::<u64>(),
        scale in prop::sample::select(vec![1.0, 1e2, 1e4]),
        smoothing in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let mut p = AttentionParams::init(4, &mut r);
        for (_, t) in p.named_mut() {
            *t = t.map(|v| v * scale);
        }
        let x = uniform(&mut r, &[2, 5, 4], -3.0, 3.0);
        let mut cfg = AttentionConfig::new(4, 2);
        cfg.logit_smoothing = smoothing;
        let (_, probs) = forward(&x, &cfg, &p).unwrap();
        for row in probs.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
