//! The work behind the `latst` subcommands: data preparation, report files,
//! ablation tables and attention diagnostics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::normalized_row_entropies;
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    chronological_split, load_csv, make_windows, standardize, Datasets, WindowedDataset,
};
use crate::error::{Error, Result};
use crate::model::{init_params, latst_forward, Activation, ModelConfig, ModelParams};
use crate::numerics::SoftmaxKind;
use crate::train::{evaluate, train, Evaluation, TrainReport, EVAL_BATCH};

/// Mean normalized entropy below which a head counts as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.05;

pub const EPOCHS_HEADER: &str = "epoch,train_loss,val_mse,entropy_mean,entropy_min,lr,seconds";

/// Loads, splits, standardizes and windows the configured dataset. The
/// returned model config has its channel count taken from the data.
pub fn prepare(cfg: &RunConfig) -> Result<(Datasets, ModelConfig)> {
    cfg.validate()?;
    let table = load_csv(&cfg.data, &cfg.date_column)?;
    let ranges = chronological_split(table.rows(), &cfg.split)?;
    let (table, scaler) = standardize(&table, ranges.train.clone())?;
    let data = make_windows(&table, &ranges, cfg.window, &scaler)?;
    let mut model = cfg.model.clone();
    model.channels = table.channels();
    model.lookback = cfg.window.lookback;
    model.horizon = cfg.window.horizon;
    model.validate()?;
    Ok((data, model))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |v| v.to_string())
}

pub fn epochs_csv(report: &TrainReport) -> String {
    let mut s = format!("{EPOCHS_HEADER}\n");
    for e in &report.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.epoch, e.train_loss, e.val_mse, e.entropy_mean, e.entropy_min, e.lr, e.seconds
        );
    }
    s
}

pub fn summary_text(report: &TrainReport, cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "test_mse = {}", fmt_opt(report.test_mse));
    let _ = writeln!(
        s,
        "best_epoch = {}",
        report
            .best_epoch
            .map_or_else(|| "none".into(), |e| e.to_string())
    );
    let _ = writeln!(s, "best_val_mse = {}", fmt_opt(report.best_val_mse));
    let _ = writeln!(s, "epochs_run = {}", report.epochs.len());
    let _ = writeln!(s, "total_seconds = {}", report.total_seconds);
    s.push_str(&cfg.to_text());
    s
}

/// Reads one `key = value` entry back out of `summary.txt`-style text.
pub fn summary_value(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: TrainReport,
    pub out_dir: PathBuf,
}

/// Trains and writes `model.ckpt`, `epochs.csv` and `summary.txt` into the
/// configured output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (data, model) = prepare(cfg)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    let init = init_params(&model, cfg.schedule.seed)?;
    let (params, report) = train(&model, init, &data, &cfg.schedule)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Checkpoint::from_params(&params, &cfg.to_text()).save(&dir.join("model.ckpt"))?;
    write_file(&dir.join("epochs.csv"), &epochs_csv(&report))?;
    write_file(&dir.join("summary.txt"), &summary_text(&report, cfg))?;
    Ok(TrainOutcome {
        params,
        report,
        out_dir: dir.clone(),
    })
}

/// Config stored in a checkpoint with `overrides` applied on top.
pub fn checkpoint_config(ck: &Checkpoint, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::parse(&ck.config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn pick_split<'a>(data: &'a Datasets, split: &str) -> Result<&'a WindowedDataset> {
    match split {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        other => Err(Error::Config(format!(
            "unknown split `{other}` (expected train, val or test)"
        ))),
    }
}

/// Scores a checkpoint on one split with the config it was trained under,
/// after `overrides`.
pub fn cmd_eval(checkpoint: &Path, overrides: &[String], split: &str) -> Result<Evaluation> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = checkpoint_config(&ck, overrides)?;
    let (data, model) = prepare(&cfg)?;
    let params = ck.into_params(&model)?;
    evaluate(&model, &params, pick_split(&data, split)?, EVAL_BATCH)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Activation,
    Gelu,
    Softmax,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(AblationAxis::Activation),
            "gelu" => Ok(AblationAxis::Gelu),
            "softmax" => Ok(AblationAxis::Softmax),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (expected activation, gelu or softmax)"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Activation => "activation",
            AblationAxis::Gelu => "gelu",
            AblationAxis::Softmax => "softmax",
        }
    }

    /// Variant labels with the config each one trains under.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = base.clone();
            f(&mut c.model);
            c
        };
        match self {
            AblationAxis::Activation => vec![
                (
                    "prelu".into(),
                    with(&|m| m.ffn_activation = Activation::Prelu),
                ),
                (
                    "relu".into(),
                    with(&|m| m.ffn_activation = Activation::Relu),
                ),
            ],
            AblationAxis::Gelu => vec![
                (
                    "logit_smoothing=on".into(),
                    with(&|m| m.logit_smoothing = true),
                ),
                (
                    "logit_smoothing=off".into(),
                    with(&|m| m.logit_smoothing = false),
                ),
            ],
            AblationAxis::Softmax => vec![
                (
                    "stable".into(),
                    with(&|m| m.softmax_kind = SoftmaxKind::Stable),
                ),
                (
                    "naive".into(),
                    with(&|m| m.softmax_kind = SoftmaxKind::Naive),
                ),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VariantResult {
    Finished {
        test_mse: Option<f64>,
        best_val_mse: Option<f64>,
        best_epoch: Option<usize>,
    },
    Diverged(String),
}

impl VariantResult {
    pub fn cell(&self) -> String {
        match self {
            VariantResult::Finished { test_mse, .. } => {
                test_mse.map_or_else(|| "none".into(), |v| format!("{v:.6}"))
            }
            VariantResult::Diverged(_) => "diverged".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub result: VariantResult,
}

/// Trains every variant of `axis` on the same data and seed. Numerical
/// failures become `diverged` rows; anything else aborts.
pub fn cmd_ablate(cfg: &RunConfig, axis: AblationAxis) -> Result<Vec<AblationRow>> {
    let (data, _) = prepare(cfg)?;
    let mut rows = Vec::new();
    for (variant, vcfg) in axis.variants(cfg) {
        let mut model = vcfg.model.clone();
        model.channels = data.train.channels();
        let outcome = init_params(&model, vcfg.schedule.seed)
            .and_then(|init| train(&model, init, &data, &vcfg.schedule));
        let result = match outcome {
            Ok((_, report)) => VariantResult::Finished {
                test_mse: report.test_mse,
                best_val_mse: report.best_val_mse,
                best_epoch: report.best_epoch,
            },
            Err(e @ (Error::Instability(_) | Error::Domain(_))) => {
                VariantResult::Diverged(e.to_string())
            }
            Err(e) => return Err(e),
        };
        rows.push(AblationRow { variant, result });
    }
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(
        &dir.join(format!("ablation_{}.csv", axis.name())),
        &ablation_csv(&rows),
    )?;
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,test_mse,best_val_mse,best_epoch,status\n");
    for r in rows {
        let line = match &r.result {
            VariantResult::Finished {
                test_mse,
                best_val_mse,
                best_epoch,
            } => format!(
                "{},{},{},{},ok",
                r.variant,
                fmt_opt(*test_mse),
                fmt_opt(*best_val_mse),
                best_epoch.map_or_else(|| "none".into(), |e| e.to_string())
            ),
            VariantResult::Diverged(_) => format!("{},,,,diverged", r.variant),
        };
        s.push_str(&line);
        s.push('\n');
    }
    s
}

pub fn ablation_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.variant.len())
        .max()
        .unwrap_or(0)
        .max(axis.name().len());
    let mut s = format!("{:<width$}  test_mse\n", axis.name());
    for r in rows {
        let _ = writeln!(s, "{:<width$}  {}", r.variant, r.result.cell());
    }
    s
}

/// Per-head normalized-entropy histogram and logit magnitudes over a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnosis {
    pub bins: usize,
    /// `[head][bin]` row counts; bin `b` covers `[b/bins, (b+1)/bins)`, the last bin includes 1.
    pub histogram: Vec<Vec<usize>>,
    /// Exact mean normalized entropy per head.
    pub head_means: Vec<f64>,
    pub max_abs_logit: f64,
    pub nonfinite_logits: usize,
    pub nonfinite_probs: usize,
    /// Batches whose forward pass aborted on non-finite values.
    pub unstable_batches: usize,
    pub batches: usize,
}

impl Diagnosis {
    pub fn new(bins: usize) -> Self {
        Diagnosis {
            bins,
            histogram: Vec::new(),
            head_means: Vec::new(),
            max_abs_logit: 0.0,
            nonfinite_logits: 0,
            nonfinite_probs: 0,
            unstable_batches: 0,
            batches: 0,
        }
    }

    /// Adds attention probabilities `[batch, heads, T, T]` to the histogram.
    pub fn add_probs(&mut self, probs: &crate::tensor::Tensor) -> Result<()> {
        let per_head = normalized_row_entropies(probs)?;
        if self.histogram.is_empty() {
            self.histogram = vec![vec![0; self.bins]; per_head.len()];
        }
        for (h, rows) in per_head.iter().enumerate() {
            for &e in rows {
                let b = ((e * self.bins as f64).floor() as usize).min(self.bins - 1);
                self.histogram[h][b] += 1;
            }
        }
        if self.head_means.is_empty() {
            self.head_means = vec![0.0; per_head.len()];
        }
        for (h, rows) in per_head.iter().enumerate() {
            let seen: usize = self.histogram[h].iter().sum::<usize>() - rows.len();
            let total = seen + rows.len();
            let sum = self.head_means[h] * seen as f64 + rows.iter().sum::<f64>();
            self.head_means[h] = sum / total.max(1) as f64;
        }
        Ok(())
    }

    pub fn collapsed_heads(&self) -> Vec<usize> {
        self.head_means
            .iter()
            .enumerate()
            .filter(|(_, m)| **m < COLLAPSE_THRESHOLD)
            .map(|(h, _)| h)
            .collect()
    }

    pub fn collapse(&self) -> bool {
        !self.collapsed_heads().is_empty()
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("head,bin_low,bin_high,count\n");
        for (h, counts) in self.histogram.iter().enumerate() {
            for (b, c) in counts.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{h},{},{},{c}",
                    b as f64 / self.bins as f64,
                    (b + 1) as f64 / self.bins as f64
                );
            }
        }
        s
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "batches = {}", self.batches);
        let _ = writeln!(s, "unstable_batches = {}", self.unstable_batches);
        let _ = writeln!(s, "max_abs_logit = {}", self.max_abs_logit);
        let _ = writeln!(s, "nonfinite_logits = {}", self.nonfinite_logits);
        let _ = writeln!(s, "nonfinite_probs = {}", self.nonfinite_probs);
        for (h, m) in self.head_means.iter().enumerate() {
            let _ = writeln!(s, "head_{h}_mean_entropy = {m:.4}");
        }
        let _ = writeln!(s, "collapse = {}", self.collapse());
        s
    }
}

/// Runs `params` over `dataset` in evaluation mode and collects attention
/// diagnostics. Batches that blow up are counted rather than propagated.
pub fn diagnose(
    model: &ModelConfig,
    params: &ModelParams,
    dataset: &WindowedDataset,
    bins: usize,
) -> Result<Diagnosis> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let mut d = Diagnosis::new(bins);
    for idx in crate::data::batch_indices(dataset.len(), EVAL_BATCH, false, 0) {
        let batch = dataset.batch(&idx)?;
        d.batches += 1;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let x = tape.constant(batch.inputs);
        let out = match latst_forward(&mut tape, x, model, &vars, None) {
            Ok(out) => out,
            Err(Error::Instability(_) | Error::Domain(_)) => {
                d.unstable_batches += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let a = &out.attention;
        d.max_abs_logit = d.max_abs_logit.max(a.max_abs_logit);
        d.nonfinite_logits += a.nonfinite_logits;
        d.nonfinite_probs += a.nonfinite_probs;
        if a.nonfinite_probs == 0 {
            d.add_probs(tape.value(a.probs))?;
        }
    }
    Ok(d)
}

/// Loads a checkpoint, diagnoses it on `split` and writes
/// `entropy_histogram.csv` into the output directory.
pub fn cmd_diagnose(
    checkpoint: &Path,
    overrides: &[String],
    split: &str,
    bins: usize,
) -> Result<Diagnosis> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = checkpoint_config(&ck, overrides)?;
    let (data, model) = prepare(&cfg)?;
    let params = ck.into_params(&model)?;
    let d = diagnose(&model, &params, pick_split(&data, split)?, bins)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("entropy_histogram.csv"), &d.histogram_csv())?;
    Ok(d)
}
