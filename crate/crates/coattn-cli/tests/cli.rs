//! End-to-end tests of the `coattn` binary: exit codes, determinism, file
//! artifacts, and the documented workflows.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn coattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coattn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn gen_bundle(dir: &Path, name: &str, items: u32, noise: &str, seed: u32) -> PathBuf {
    let path = dir.join(name);
    let out = coattn(&[
        "gen-synth",
        "--items",
        &items.to_string(),
        "--dim",
        "8",
        "--frames",
        "2",
        "--noise",
        noise,
        "--seed",
        &seed.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn gen_synth_reports_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_bundle(dir.path(), "a.emb", 12, "0.05", 7);
    let first = std::fs::read(&a).unwrap();
    let out = coattn(&[
        "gen-synth", "--items", "12", "--dim", "8", "--frames", "2", "--noise", "0.05", "--seed",
        "7", "--out",
        dir.path().join("b.emb").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    assert!(stdout(&out).contains("audio_items=12"));
    assert!(stdout(&out).contains("dim=8"));
    let second = std::fs::read(dir.path().join("b.emb")).unwrap();
    assert_eq!(first, second, "same flags must give identical bytes");
}

#[test]
fn gen_synth_rejects_single_item() {
    let dir = tempfile::tempdir().unwrap();
    let out = coattn(&[
        "gen-synth", "--items", "1", "--dim", "8", "--frames", "2", "--out",
        dir.path().join("x.emb").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn train_rejects_single_variant_with_depth() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), "s.emb", 8, "0.05", 7);
    let out = coattn(&[
        "train",
        "--bundle",
        bundle.to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
        "--variant",
        "single",
        "--depth",
        "2",
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn train_is_deterministic_and_logs_epoch_lines() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), "s.emb", 8, "0.05", 7);
    let run = |tag: &str| -> (Vec<u8>, String) {
        let ckpt = dir.path().join(format!("{tag}.ckpt"));
        let log = dir.path().join(format!("{tag}.log"));
        let out = coattn(&[
            "train",
            "--bundle",
            bundle.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--loss-log",
            log.to_str().unwrap(),
            "--variant",
            "iterating",
            "--depth",
            "1",
            "--heads",
            "2",
            "--batch",
            "4",
            "--epochs",
            "4",
            "--seed",
            "11",
        ]);
        assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        for epoch in 0..4 {
            assert!(stdout(&out).contains(&format!("epoch={epoch} loss=")));
        }
        (
            std::fs::read(&ckpt).unwrap(),
            std::fs::read_to_string(&log).unwrap(),
        )
    };
    let (ckpt_a, log_a) = run("a");
    let (ckpt_b, log_b) = run("b");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints must be bit-identical");
    assert_eq!(log_a, log_b, "loss logs must be bit-identical");
    assert_eq!(log_a.lines().count(), 4);
}

#[test]
fn full_batch_noiseless_losses_decrease_after_epoch_five() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), "clean.emb", 16, "0", 7);
    let out = coattn(&[
        "train",
        "--bundle",
        bundle.to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
        "--variant",
        "single",
        "--depth",
        "1",
        "--heads",
        "2",
        "--batch",
        "16",
        "--epochs",
        "50",
        "--lr",
        "0.001",
        "--seed",
        "7",
    ]);
    assert_eq!(exit_code(&out), 0);
    let losses: Vec<f64> = stdout(&out)
        .lines()
        .filter_map(|l| l.strip_prefix("epoch=")?.split("loss=").nth(1)?.parse().ok())
        .collect();
    assert_eq!(losses.len(), 50);
    for w in losses[5..].windows(2) {
        assert!(
            w[1] < w[0] + 1e-6,
            "loss increased after epoch 5: {} -> {}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn paper_shaped_training_flags_run() {
    // Depth-5 iterating cascade at batch 32 over a synthetic bundle.
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), "s.emb", 64, "0.1", 3);
    let out = coattn(&[
        "train",
        "--bundle",
        bundle.to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
        "--variant",
        "iterating",
        "--depth",
        "5",
        "--heads",
        "2",
        "--batch",
        "32",
        "--epochs",
        "2",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_directions_agree_on_noiseless_trained_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("clean.emb");
    let out = coattn(&[
        "gen-synth", "--items", "12", "--dim", "16", "--frames", "2", "--noise", "0", "--seed",
        "5", "--out",
        bundle.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let ckpt = dir.path().join("m.ckpt");
    let out = coattn(&[
        "train",
        "--bundle",
        bundle.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--variant",
        "iterating",
        "--depth",
        "2",
        "--heads",
        "4",
        "--batch",
        "6",
        "--epochs",
        "100",
        "--seed",
        "5",
    ]);
    assert_eq!(exit_code(&out), 0);
    let t2a = coattn(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bundle",
        bundle.to_str().unwrap(),
        "--direction",
        "t2a",
    ]);
    let a2t = coattn(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bundle",
        bundle.to_str().unwrap(),
        "--direction",
        "a2t",
    ]);
    assert_eq!(exit_code(&t2a), 0);
    assert_eq!(exit_code(&a2t), 0);
    assert!(stdout(&t2a).contains("map_at_10=1"));
    assert_eq!(stdout(&t2a), stdout(&a2t));
}

#[test]
fn eval_without_checkpoint_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), "s.emb", 4, "0.05", 7);
    let out = coattn(&["eval", "--bundle", bundle.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn eval_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let bundle8 = gen_bundle(dir.path(), "d8.emb", 8, "0.05", 7);
    let ckpt = dir.path().join("m.ckpt");
    let out = coattn(&[
        "train",
        "--bundle",
        bundle8.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--variant",
        "single",
        "--depth",
        "1",
        "--heads",
        "2",
        "--batch",
        "4",
        "--epochs",
        "1",
    ]);
    assert_eq!(exit_code(&out), 0);
    // A 4-dimensional bundle against the 8-dimensional checkpoint.
    let path = dir.path().join("d4.emb");
    let out = coattn(&[
        "gen-synth", "--items", "4", "--dim", "4", "--frames", "2", "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let out = coattn(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bundle",
        path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn eval_writes_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), "s.emb", 6, "0.05", 7);
    let ckpt = dir.path().join("m.ckpt");
    coattn(&[
        "train",
        "--bundle",
        bundle.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--variant",
        "single",
        "--depth",
        "1",
        "--heads",
        "2",
        "--batch",
        "3",
        "--epochs",
        "2",
    ]);
    let json_path = dir.path().join("report.json");
    let out = coattn(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bundle",
        bundle.to_str().unwrap(),
        "--json",
        json_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    for key in ["map_at_10", "r_at_1", "r_at_5", "r_at_10", "num_queries"] {
        assert!(parsed.get(key).is_some(), "missing key {key}");
    }
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), "s.emb", 4, "0.05", 7);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = coattn(&[
        "eval",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--bundle",
        bundle.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn gradcheck_passes_by_default_and_with_depth_two_stacking() {
    let out = coattn(&["gradcheck"]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("gradcheck=pass"));
    assert!(stdout(&out).contains("group=layer0.sa_audio.w_q"));

    let out = coattn(&["gradcheck", "--variant", "stacking", "--depth", "2"]);
    assert_eq!(exit_code(&out), 0);
    assert!(stdout(&out).contains("gradcheck=pass"));
}

#[test]
fn gradcheck_break_me_fails_and_names_the_group() {
    let out = coattn(&["gradcheck", "--break-me"]);
    assert_eq!(exit_code(&out), 1);
    let combined = format!("{}{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    assert!(combined.contains("gradcheck=fail"));
    assert!(combined.contains("layer0.sa_audio.w_q"));
}

#[test]
fn gradcheck_rejects_invalid_variant_depth_combo() {
    let out = coattn(&["gradcheck", "--variant", "single", "--depth", "2"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn config_file_drives_training_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), "s.emb", 8, "0.05", 7);
    let ckpt = dir.path().join("m.ckpt");
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "bundle = {}\nout = {}\nvariant = single\ndepth = 1\nheads = 2\nbatch_size = 4\nepochs = 3\nseed = 9\n",
            bundle.display(),
            ckpt.display()
        ),
    )
    .unwrap();
    let out = coattn(&["train", "--config", conf.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("epoch=")).count(), 3);

    // --epochs overrides the file value.
    let out = coattn(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--epochs",
        "5",
    ]);
    assert_eq!(exit_code(&out), 0);
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("epoch=")).count(), 5);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "battch_size = 4\n").unwrap();
    let out = coattn(&["train", "--config", conf.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("battch_size"));
}

#[test]
fn pairs_manifest_overrides_bundle_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), "s.emb", 6, "0.05", 7);
    let pairs = dir.path().join("pairs.tsv");
    // Keep only the first four pairs.
    std::fs::write(
        &pairs,
        "t0000\ta0000\nt0001\ta0001\nt0002\ta0002\nt0003\ta0003\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = coattn(&[
        "train",
        "--bundle",
        bundle.to_str().unwrap(),
        "--pairs",
        pairs.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--variant",
        "single",
        "--depth",
        "1",
        "--heads",
        "2",
        "--batch",
        "4",
        "--epochs",
        "1",
    ]);
    assert_eq!(exit_code(&out), 0);
    let eval = coattn(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bundle",
        bundle.to_str().unwrap(),
        "--pairs",
        pairs.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&eval), 0);
    assert!(stdout(&eval).contains("num_queries=4"));

    // A dangling id in the manifest is a validation error.
    std::fs::write(&pairs, "t0000\tghost\n").unwrap();
    let out = coattn(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bundle",
        bundle.to_str().unwrap(),
        "--pairs",
        pairs.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn resume_reproduces_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), "s.emb", 8, "0.05", 7);
    let full = dir.path().join("full.ckpt");
    let half = dir.path().join("half.ckpt");
    let resumed = dir.path().join("resumed.ckpt");
    let base = [
        "--bundle",
        bundle.to_str().unwrap(),
        "--variant",
        "single",
        "--depth",
        "1",
        "--heads",
        "2",
        "--batch",
        "4",
        "--seed",
        "13",
    ];

    let mut args = vec!["train", "--out", full.to_str().unwrap(), "--epochs", "6"];
    args.extend_from_slice(&base);
    assert_eq!(exit_code(&coattn(&args)), 0);

    let mut args = vec!["train", "--out", half.to_str().unwrap(), "--epochs", "3"];
    args.extend_from_slice(&base);
    assert_eq!(exit_code(&coattn(&args)), 0);

    let out = coattn(&[
        "train",
        "--resume",
        half.to_str().unwrap(),
        "--bundle",
        bundle.to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
        "--epochs",
        "6",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(
        std::fs::read(&full).unwrap(),
        std::fs::read(&resumed).unwrap(),
        "resumed checkpoint must match the uninterrupted run"
    );
}

#[test]
fn help_is_available_for_every_command() {
    for cmd in ["gen-synth", "train", "eval", "gradcheck"] {
        let out = coattn(&[cmd, "--help"]);
        assert_eq!(exit_code(&out), 0);
        assert!(!stdout(&out).is_empty());
    }
    // The deliberate-fault flag stays undocumented.
    let out = coattn(&["gradcheck", "--help"]);
    assert!(!stdout(&out).contains("break-me"));
}
