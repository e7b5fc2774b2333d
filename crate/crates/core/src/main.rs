use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use latst::cli::{self, AblationAxis};
use latst::config::RunConfig;
use latst::error::Result;

#[derive(Parser)]
#[command(
    name = "latst",
    version,
    about = "Single-layer time-series transformer with stabilized attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.ckpt, epochs.csv and summary.txt.
    Train {
        /// `key = value` config file.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. `-s epochs=20`.
        #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a split.
    Eval {
        checkpoint: PathBuf,
        #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also report MSE on the original data scale.
        #[arg(long)]
        raw: bool,
    },
    /// Train each variant along one axis and print a comparison table.
    Ablate {
        /// activation, gelu or softmax.
        axis: String,
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Attention entropy histogram and logit magnitudes for a checkpoint.
    Diagnose {
        checkpoint: PathBuf,
        /// Dataset to probe; defaults to the one in the checkpoint config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, overrides } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            let out = cli::cmd_train(&cfg)?;
            for e in &out.report.epochs {
                eprintln!(
                    "epoch {:>3}  train {:.6}  val {:.6}  entropy {:.3}/{:.3}",
                    e.epoch, e.train_loss, e.val_mse, e.entropy_mean, e.entropy_min
                );
            }
            print!("{}", cli::summary_text(&out.report, &cfg));
            println!("wrote {}", out.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            overrides,
            split,
            raw,
        } => {
            let ev = cli::cmd_eval(&checkpoint, &overrides, &split)?;
            println!("windows = {}", ev.windows);
            println!("mse = {}", ev.mse);
            if raw {
                println!("raw_mse = {}", ev.raw_mse);
            }
            for (h, head) in ev.entropy.heads.iter().enumerate() {
                println!(
                    "head_{h}_entropy = mean {:.4} min {:.4} max {:.4}",
                    head.mean, head.min, head.max
                );
            }
        }
        Command::Ablate {
            axis,
            config,
            overrides,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = load_config(config.as_ref(), &overrides)?;
            let rows = cli::cmd_ablate(&cfg, axis)?;
            print!("{}", cli::ablation_table(axis, &rows));
            for r in &rows {
                if let cli::VariantResult::Diverged(why) = &r.result {
                    eprintln!("{}: {why}", r.variant);
                }
            }
        }
        Command::Diagnose {
            checkpoint,
            data,
            mut overrides,
            split,
            bins,
        } => {
            if let Some(d) = data {
                overrides.insert(0, format!("data={}", d.display()));
            }
            let d = cli::cmd_diagnose(&checkpoint, &overrides, &split, bins)?;
            print!("{}", d.report());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
