//! Binary surface tests: exit codes, flag handling, and artifact layout.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowalign"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fa-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY: &[&str] = &[
    "--set",
    "data.size=8",
    "--set",
    "data.train_count=16",
    "--set",
    "data.pair_count=24",
    "--set",
    "flow.hidden=24",
    "--set",
    "flow.cond_dim=8",
    "--set",
    "flow.pretrain_steps=10",
    "--set",
    "reward.hidden=24",
    "--set",
    "reward.dim=8",
    "--set",
    "reward.epochs_hi=1",
    "--set",
    "reward.epochs_lo=1",
    "--set",
    "align.rollout_steps=6",
    "--set",
    "align.steps=2",
    "--set",
    "eval.prompts=4",
    "--set",
    "eval.rollout_steps=6",
    "--set",
    "curve.batch=2",
];

#[test]
fn unknown_flag_names_it_and_fails() {
    let out = bin().args(["align", "--bogus-flag"]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--bogus-flag"), "stderr: {stderr}");
}

#[test]
fn unknown_subcommand_fails_with_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage") || stderr.contains("frobnicate"));
}

#[test]
fn unknown_config_key_names_it_and_fails() {
    let dir = tmp_dir("badkey");
    let out = bin()
        .args(["gen-data", "--set", "nope.key=1", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.key"), "stderr: {stderr}");
}

#[test]
fn align_writes_metrics_checkpoint_and_resolved_config() {
    let dir = tmp_dir("align");
    let run = |args: &[&str]| {
        let out = bin()
            .args(args)
            .args(TINY)
            .arg("--out")
            .arg(&dir)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&["train-flow"]);
    run(&["train-reward"]);
    run(&["align", "--seed", "7"]);
    for file in ["metrics.csv", "aligned_flow.ckpt", "resolved.cfg"] {
        assert!(dir.join(file).exists(), "missing {file}");
    }
    let resolved = std::fs::read_to_string(dir.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("align.seed = 7"));
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,reward,"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn recovery_curve_emits_csv_rows() {
    let dir = tmp_dir("curve");
    let train = bin()
        .args(["train-flow"])
        .args(TINY)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(train.status.success());
    let out = bin()
        .args(["recovery-curve"])
        .args(TINY)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.join("recovery.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,fraction,mse,seed,config_hash"));
    assert!(lines.count() >= 4);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn report_twice_is_bit_identical() {
    let dir_a = tmp_dir("report-a");
    let dir_b = tmp_dir("report-b");
    for dir in [&dir_a, &dir_b] {
        let out = bin()
            .args(["report", "--seed", "5"])
            .args(TINY)
            .args(["--set", "study.steps=2"])
            .arg("--out")
            .arg(dir)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "report failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for name in ["recovery.csv", "hacking.csv", "ablation.csv", "summary.csv", "resolved.cfg"] {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs across identical report runs");
    }
    std::fs::remove_dir_all(&dir_a).ok();
    std::fs::remove_dir_all(&dir_b).ok();
}
