use std::path::Path;
use std::process::{Command, Output};

use facestream::config::{Profile, RunConfig};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facestream")).current_dir(dir).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// A config small enough for a few seconds of training.
fn quick_config(dir: &Path) {
    let mut cfg = RunConfig::for_profile(Profile::SyntheticSmall);
    cfg.data.frames = 48;
    cfg.train.stage1_epochs = 1;
    cfg.train.stage2_epochs = 1;
    cfg.train.window_stride_units = 8;
    std::fs::write(dir.join("run.toml"), cfg.to_toml()).unwrap();
}

#[test]
fn full_session_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quick_config(d);
    let c = |rest: &[&str]| -> Output {
        let args: Vec<&str> = ["--config", "run.toml"].iter().chain(rest).copied().collect();
        run(d, &args)
    };

    assert_eq!(code(&c(&["train", "--stage", "2", "--data", "data", "--out", "ckpt"])), 3);
    assert_eq!(code(&c(&["synth", "--out", "data"])), 0);
    let missing = c(&["train", "--stage", "2", "--data", "data", "--out", "ckpt"]);
    assert_eq!(code(&missing), 3);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("codec.ckpt"));
    assert_eq!(code(&c(&["train", "--stage", "3", "--data", "data", "--out", "ckpt"])), 2);

    assert_eq!(code(&c(&["train", "--stage", "1", "--data", "data", "--out", "ckpt"])), 0);
    assert_eq!(code(&c(&["train", "--stage", "2", "--data", "data", "--out", "ckpt"])), 0);
    for f in ["ckpt/codec.ckpt", "ckpt/model.ckpt", "ckpt/stage1_loss.csv", "ckpt/stage2_loss.csv"] {
        assert!(d.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(d.join("ckpt/stage1_loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let gen = ["generate", "--checkpoint", "ckpt/model.ckpt", "--audio", "data/test_000.sgaf", "--out", "out.sgmo"];
    assert_eq!(code(&c(&[&gen[..], &["--style", "0"]].concat())), 0);
    assert_eq!(code(&c(&[&gen[..], &["--style", "99"]].concat())), 2);
    assert_eq!(code(&c(&["generate", "--checkpoint", "ckpt/model.ckpt", "--audio", "nope.sgaf", "--style", "0", "--out", "x.sgmo"])), 3);

    assert_eq!(code(&c(&["eval", "--pred", "data/test_000.sgmo", "--gt", "data/test_000.sgmo", "--report", "self.csv"])), 0);
    let report = std::fs::read_to_string(d.join("self.csv")).unwrap();
    assert_eq!(report, "sequence_id,LVE,FDD,MOD\ntest_000,0e0,0e0,0e0\n");

    assert_eq!(code(&c(&["eval", "--checkpoint", "ckpt/model.ckpt", "--data", "data", "--report", "eval.csv"])), 0);
    let report = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("mean,"));

    let bench =
        ["stream-bench", "--checkpoint", "ckpt/model.ckpt", "--audio", "data/test_000.sgaf", "--lengths", "10,30", "--report", "bench.csv"];
    assert_eq!(code(&c(&bench)), 0);
    let report = std::fs::read_to_string(d.join("bench.csv")).unwrap();
    assert!(report.starts_with("length,first_frame_latency_s,mean_frame_s,slope_check\n10,"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "schema_version = 99\n").unwrap();
    assert_eq!(code(&run(dir.path(), &["--config", "bad.toml", "synth", "--out", "data"])), 2);
    assert_eq!(code(&run(dir.path(), &["--config", "absent.toml", "synth", "--out", "data"])), 2);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 2);
}
