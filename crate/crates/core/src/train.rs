//! MSE objective, Adam, and the epoch loop with early stopping.

use std::time::Instant;

use rand::SeedableRng;

use crate::attention::EntropyStats;
use crate::autodiff::{Tape, Var};
use crate::data::{batch_indices, Datasets, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{latst_forward, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::Rng;

/// Batch size used for validation and test scoring.
pub const EVAL_BATCH: usize = 64;

/// Mean of squared differences over every element of `[batch × C × P]`.
pub fn mse_loss(tape: &mut Tape, y_hat: Var, y: Var) -> Result<Var> {
    if tape.shape(y_hat) != tape.shape(y) {
        return Err(Error::dim(format!(
            "mse_loss shapes differ: {:?} vs {:?}",
            tape.shape(y_hat),
            tape.shape(y)
        )));
    }
    let diff = tape.sub(y_hat, y)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub hyper: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ModelParams, hyper: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        OptimState {
            hyper,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter. `step` counts from 1.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    hyper: &AdamConfig,
) {
    let t = step.min(i32::MAX as u64) as i32;
    let b1t = 1.0 - hyper.beta1.powi(t);
    let b2t = 1.0 - hyper.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        first[i] = hyper.beta1 * first[i] + (1.0 - hyper.beta1) * g;
        second[i] = hyper.beta2 * second[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = first[i] / b1t;
        let v_hat = second[i] / b2t;
        param[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

/// Applies one Adam step. Any non-finite gradient aborts before a single
/// parameter is touched.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    let mut named = params.named_mut();
    if named.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            named.len()
        )));
    }
    for ((name, p), g) in named.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Instability(format!(
                "non-finite gradient for `{name}` (element {i}) at optimizer step {}",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    for (k, ((_, p), g)) in named.iter_mut().zip(grads).enumerate() {
        adam_update(
            p.data_mut(),
            g.data(),
            &mut state.first[k],
            &mut state.second[k],
            state.step,
            &state.hyper,
        );
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    /// Stop after this many consecutive epochs without a strictly lower validation MSE.
    pub patience: usize,
    pub lr: f64,
    /// Multiplies the learning rate after every epoch; 1 keeps it constant.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 100,
            patience: 10,
            lr: 1e-4,
            lr_decay: 1.0,
            batch_size: 8,
            grad_clip: None,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub entropy_mean: f64,
    pub entropy_min: f64,
    pub entropy_per_head: Vec<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub total_seconds: f64,
}

/// Forecast error and attention entropy over a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// On the standardized scale.
    pub mse: f64,
    /// On the original data scale.
    pub raw_mse: f64,
    pub entropy: EntropyStats,
    pub windows: usize,
}

/// Deterministic evaluation. Per-batch squared-error sums are merged in
/// batch order and divided by the total element count.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParams,
    dataset: &WindowedDataset,
    batch_size: usize,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Contract(format!(
            "cannot evaluate on the empty {} split",
            dataset.split.name()
        )));
    }
    let (mut sse, mut raw_sse, mut count) = (0.0, 0.0, 0usize);
    let mut entropy = EntropyStats::default();
    for idx in batch_indices(dataset.len(), batch_size, false, 0) {
        let batch = dataset.batch(&idx)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let x = tape.constant(batch.inputs);
        let out = latst_forward(&mut tape, x, cfg, &vars, None)?;
        let y_hat = tape.value(out.y_hat);
        if !y_hat.is_finite() {
            return Err(Error::Instability(format!(
                "non-finite forecast on the {} split",
                dataset.split.name()
            )));
        }
        sse += squared_error(y_hat, &batch.targets);
        raw_sse += squared_error(
            &dataset.scaler.inverse_channel_major(y_hat),
            &dataset.scaler.inverse_channel_major(&batch.targets),
        );
        count += batch.targets.len();
        entropy.merge(&out.entropy(&tape)?);
    }
    Ok(Evaluation {
        mse: sse / count as f64,
        raw_mse: raw_sse / count as f64,
        entropy,
        windows: dataset.len(),
    })
}

fn squared_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// MSE of repeating each window's last observed value across the horizon.
pub fn repeat_last_mse(dataset: &WindowedDataset) -> Result<f64> {
    let (mut sse, mut count) = (0.0, 0usize);
    let l = dataset.spec.lookback;
    for idx in batch_indices(dataset.len(), 256, false, 0) {
        let batch = dataset.batch(&idx)?;
        let p = dataset.spec.horizon;
        for (row, target) in batch.inputs.rows().zip(batch.targets.rows()) {
            let last = row[l - 1];
            sse += target.iter().map(|y| (y - last) * (y - last)).sum::<f64>();
            count += p;
        }
    }
    Ok(sse / count as f64)
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Instability(msg) => {
            Error::Instability(format!("epoch {epoch}, batch {batch}: {msg}"))
        }
        other => other,
    }
}

/// Trains with Adam, keeping the parameters of the epoch with the lowest
/// validation MSE (training loss when the validation split is empty).
///
/// Each epoch shuffles the training windows, takes one optimizer step per
/// batch, then evaluates the validation split and records attention entropy
/// on a fixed probe batch. The test split is scored once, with the returned
/// parameters.
pub fn train(
    cfg: &ModelConfig,
    init: ModelParams,
    data: &Datasets,
    schedule: &Schedule,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let started = Instant::now();
    let mut report = TrainReport::default();
    let mut params = init;
    let mut best = params.clone();
    let mut state = OptimState::new(
        &params,
        AdamConfig {
            lr: schedule.lr,
            ..AdamConfig::default()
        },
    );
    let mut dropout_rng = Rng::seed_from_u64(schedule.seed);
    let probe_set = if data.val.is_empty() {
        &data.train
    } else {
        &data.val
    };
    let probe: Vec<usize> = (0..probe_set.len().min(schedule.batch_size)).collect();
    let probe = probe_set.batch(&probe)?;

    let mut best_score = f64::INFINITY;
    let mut stale = 0;
    for epoch in 1..=schedule.epochs {
        let epoch_start = Instant::now();
        let lr = state.hyper.lr;
        let mut loss_sum = 0.0;
        let mut windows = 0usize;
        let order = batch_indices(
            data.train.len(),
            schedule.batch_size,
            true,
            schedule.seed.wrapping_add(epoch as u64),
        );
        for (b, idx) in order.iter().enumerate() {
            let batch = data.train.batch(idx)?;
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let x = tape.constant(batch.inputs);
            let y = tape.constant(batch.targets);
            let out = latst_forward(&mut tape, x, cfg, &vars, Some(&mut dropout_rng))
                .map_err(|e| with_context(e, epoch, b))?;
            let loss = mse_loss(&mut tape, out.y_hat, y)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Instability(format!(
                    "epoch {epoch}, batch {b}: non-finite training loss"
                )));
            }
            tape.backward(loss)?;
            let mut grads = vars.grads(&tape);
            if let Some(max_norm) = schedule.grad_clip {
                clip_grad_norm(&mut grads, max_norm);
            }
            adam_step(&mut params, &grads, &mut state).map_err(|e| with_context(e, epoch, b))?;
            loss_sum += loss_value * idx.len() as f64;
            windows += idx.len();
        }
        let train_loss = loss_sum / windows as f64;

        let val_mse = if data.val.is_empty() {
            f64::NAN
        } else {
            evaluate(cfg, &params, &data.val, EVAL_BATCH)
                .map_err(|e| with_context(e, epoch, 0))?
                .mse
        };
        let entropy = {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, false);
            let x = tape.constant(probe.inputs.clone());
            let out = latst_forward(&mut tape, x, cfg, &vars, None)
                .map_err(|e| with_context(e, epoch, 0))?;
            out.entropy(&tape)?
        };
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mse,
            entropy_mean: entropy.mean(),
            entropy_min: entropy.min(),
            entropy_per_head: entropy.heads.iter().map(|h| h.mean).collect(),
            lr,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });

        let score = if data.val.is_empty() {
            train_loss
        } else {
            val_mse
        };
        if score < best_score {
            best_score = score;
            best = params.clone();
            report.best_epoch = Some(epoch);
            report.best_val_mse = Some(score);
            stale = 0;
        } else {
            stale += 1;
            if stale >= schedule.patience {
                break;
            }
        }
        state.hyper.lr *= schedule.lr_decay;
    }
    if report.best_epoch.is_none() {
        best = params;
    }
    if !data.test.is_empty() {
        report.test_mse = Some(evaluate(cfg, &best, &data.test, EVAL_BATCH)?.mse);
    }
    report.total_seconds = started.elapsed().as_secs_f64();
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap());
        let z = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let l = mse_loss(&mut tape, a, z).unwrap();
        assert_eq!(tape.value(l).item(), 2.5);
        let l = mse_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let w = tape.constant(Tensor::zeros(&[1, 2, 1]));
        assert!(matches!(
            mse_loss(&mut tape, a, w),
            Err(Error::Dimension(_))
        ));
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 1,
            lookback: 8,
            horizon: 2,
            patch_len: 4,
            patch_stride: 4,
            model_dim: 4,
            ffn_dim: 4,
            num_heads: 1,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_gradients_leave_params_but_count_the_step() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 0).unwrap();
        let before = params.clone();
        let grads: Vec<Tensor> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut state = OptimState::new(
            &params,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 0).unwrap();
        let before = params.clone();
        let grads: Vec<Tensor> = params
            .named()
            .iter()
            .map(|(_, t)| t.map(|v| v * 3.0 + 1.0))
            .collect();
        let mut state = OptimState::new(
            &params,
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
        );
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 0).unwrap();
        let mut grads: Vec<Tensor> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        grads[2].data_mut()[1] = f64::NAN;
        let mut state = OptimState::new(&params, AdamConfig::default());
        let err = adam_step(&mut params, &grads, &mut state).unwrap_err();
        assert!(matches!(err, Error::Instability(_)));
        assert!(err.to_string().contains("patch.w"), "{err}");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::vector(&[3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }
}
