use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latst::checkpoint::{Checkpoint, MAGIC};
use latst::cli::{
    cmd_ablate, cmd_diagnose, cmd_eval, cmd_train, summary_value, AblationAxis, VariantResult,
};
use latst::config::{RunConfig, KEYS};
use latst::error::Error;
use latst::model::init_params;

fn synthetic_csv() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic.csv")
}

fn small_overrides(out: &Path) -> Vec<String> {
    vec![
        format!("data={}", synthetic_csv().display()),
        "split=generic".into(),
        "lookback=32".into(),
        "horizon=8".into(),
        "window_stride=4".into(),
        "patch_len=8".into(),
        "patch_stride=8".into(),
        "model_dim=8".into(),
        "ffn_dim=16".into(),
        "num_heads=2".into(),
        "epochs=2".into(),
        "lr=0.001".into(),
        "seed=11".into(),
        format!("out_dir={}", out.display()),
    ]
}

fn small_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&small_overrides(out)).unwrap();
    cfg
}

fn latst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latst"))
        .args(args)
        .output()
        .unwrap()
}

fn with_sets<'a>(mut args: Vec<&'a str>, sets: &'a [String]) -> Vec<&'a str> {
    for s in sets {
        args.push("-s");
        args.push(s);
    }
    args
}

#[test]
fn train_writes_all_outputs_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_train(&small_config(dir.path())).unwrap();
    for f in ["model.ckpt", "epochs.csv", "summary.txt"] {
        assert!(out.out_dir.join(f).is_file(), "{f}");
    }
    let summary = std::fs::read_to_string(out.out_dir.join("summary.txt")).unwrap();
    let test_mse: f64 = summary_value(&summary, "test_mse")
        .unwrap()
        .parse()
        .unwrap();
    assert!(test_mse.is_finite());
    for key in KEYS {
        assert!(
            summary_value(&summary, key).is_some(),
            "summary is missing `{key}`"
        );
    }

    let csv = std::fs::read_to_string(out.out_dir.join("epochs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,train_loss,val_mse,entropy_mean,entropy_min,lr,seconds")
    );
    assert_eq!(lines.count(), out.report.epochs.len());

    let ev = cmd_eval(&out.out_dir.join("model.ckpt"), &[], "test").unwrap();
    assert_eq!(ev.mse, test_mse);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let path = dir.path().join("model.ckpt");
    cmd_train(&cfg).unwrap();
    let first = std::fs::read(&path).unwrap();
    cmd_train(&cfg).unwrap();
    assert!(first == std::fs::read(&path).unwrap(), "checkpoints differ");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut model = cfg.model.clone();
    model.channels = 2;
    let params = init_params(&model, 3).unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_params(&params, &cfg.to_text())
        .save(&path)
        .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config_text, cfg.to_text());
    let back = loaded.into_params(&model).unwrap();
    for ((na, a), (nb, b)) in params.named().iter().zip(back.named().iter()) {
        assert_eq!(na, nb);
        let bits =
            |t: &latst::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn unknown_key_names_the_key() {
    let err = RunConfig::parse("epochs = 3\nbatchsize = 8\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let msg = err.to_string();
    assert!(msg.contains("batchsize") && msg.contains("line 2"), "{msg}");

    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "batchsize = 8\n").unwrap();
    let o = latst(&["train", "-c", conf.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batchsize"));
}

#[test]
fn corrupted_magic_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_train(&small_config(dir.path())).unwrap();
    let path = out.out_dir.join("model.ckpt");
    let mut bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..6], MAGIC);
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        cmd_eval(&path, &[], "test"),
        Err(Error::Checkpoint(_))
    ));
    let o = latst(&["eval", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn horizon_mismatch_names_both_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_train(&small_config(dir.path())).unwrap();
    let path = out.out_dir.join("model.ckpt");
    let err = cmd_eval(&path, &["horizon=12".into()], "test").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)), "{msg}");
    assert!(msg.contains("8") && msg.contains("12"), "{msg}");
    let o = latst(&["eval", path.to_str().unwrap(), "-s", "horizon=12"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diagnose_fresh_and_overflowing_models() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.model.channels = 2;
    let params = init_params(&cfg.model, 0).unwrap();
    let fresh = dir.path().join("fresh.ckpt");
    Checkpoint::from_params(&params, &cfg.to_text())
        .save(&fresh)
        .unwrap();
    let d = cmd_diagnose(&fresh, &[], "test", 10).unwrap();
    assert!(!d.collapse(), "{}", d.report());
    assert!(d.head_means.iter().all(|&m| m > 0.5));
    assert!(dir.path().join("entropy_histogram.csv").is_file());

    let mut hot = params.clone();
    hot.attention.w_q = hot.attention.w_q.map(|v| v * 1e160);
    hot.attention.w_k = hot.attention.w_k.map(|v| v * 1e160);
    cfg.apply_overrides(&["softmax_kind=naive", "logit_smoothing=false"])
        .unwrap();
    let path = dir.path().join("hot.ckpt");
    Checkpoint::from_params(&hot, &cfg.to_text())
        .save(&path)
        .unwrap();
    let d = cmd_diagnose(&path, &[], "test", 10).unwrap();
    assert!(d.nonfinite_logits > 0, "{}", d.report());
    let o = latst(&["diagnose", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("nonfinite_logits"));
}

#[test]
fn ablation_rows_follow_the_axis() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.schedule.epochs = 1;
    for (axis, want) in [
        (AblationAxis::Activation, vec!["prelu", "relu"]),
        (
            AblationAxis::Gelu,
            vec!["logit_smoothing=on", "logit_smoothing=off"],
        ),
        (AblationAxis::Softmax, vec!["stable", "naive"]),
    ] {
        let rows = cmd_ablate(&cfg, axis).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, want);
        assert!(dir
            .path()
            .join(format!("ablation_{}.csv", axis.name()))
            .is_file());
    }
}

#[test]
fn diverged_variants_do_not_fail_the_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.schedule.epochs = 1;
    cfg.apply_overrides(&["lr=1e200"]).unwrap();
    let rows = cmd_ablate(&cfg, AblationAxis::Softmax).unwrap();
    assert!(rows
        .iter()
        .any(|r| matches!(r.result, VariantResult::Diverged(_))));
    assert!(rows.iter().any(|r| r.result.cell() == "diverged"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let sets = small_overrides(dir.path());
    let o = latst(&with_sets(vec!["train"], &sets));
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    assert_eq!(latst(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(latst(&["train", "-s", "lr=abc"]).status.code(), Some(1));
    let missing = dir.path().join("nope.csv");
    let set = format!("data={}", missing.display());
    assert_eq!(latst(&["train", "-s", &set]).status.code(), Some(2));

    let mut unstable = sets.clone();
    unstable.extend(["lr=1e200".to_string(), "epochs=3".to_string()]);
    let o = latst(&with_sets(vec!["train"], &unstable));
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}
