//! Black-box checks of the command-line interface: exit codes, clobber
//! protection, output contracts, and byte-stable plot rendering.

use std::path::Path;
use std::process::{Command, Output};

fn mlfvo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlfvo")).args(args).current_dir(cwd).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_CFG: &str = "\
data.root = data\n\
data.sequence = 00\n\
data.height = 16\n\
data.width = 32\n\
model.depth_channels = 4,4,8,8\n\
model.pose_widths = 4,4,8,8\n\
model.regressor_hidden = 8,8\n\
train.epochs = 1\n\
train.batch_size = 2\n\
train.lr_switch_epoch = 0\n\
synth.frames = 4\n";

#[test]
fn help_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mlfvo(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(mlfvo(&["train", "--help"], dir.path()).status.code(), Some(0));
    assert_eq!(mlfvo(&["--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(mlfvo(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(mlfvo(&[], dir.path()).status.code(), Some(1));
}

#[test]
fn unknown_config_key_exits_1_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), "train.momentum = 0.9\n").unwrap();
    let out = mlfvo(&["train", "--config", "cfg.txt", "--run-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("train.momentum"), "{}", stderr(&out));
}

#[test]
fn invalid_strategy_exits_1_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), "model.strategy = resnet\n").unwrap();
    let out = mlfvo(&["train", "--config", "cfg.txt", "--run-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("strategy"), "{}", stderr(&out));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), TINY_CFG).unwrap();
    let out = mlfvo(&["train", "--config", "cfg.txt", "--run-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn existing_outputs_need_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("cfg.txt"), TINY_CFG).unwrap();
    let out = mlfvo(&["synth", "--config", "cfg.txt", "--out", "data/00"], root);
    assert!(out.status.success(), "{}", stderr(&out));

    // second synth into the same non-empty directory is refused
    let out = mlfvo(&["synth", "--config", "cfg.txt", "--out", "data/00"], root);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--overwrite"), "{}", stderr(&out));
    let out = mlfvo(&["synth", "--config", "cfg.txt", "--out", "data/00", "--overwrite"], root);
    assert!(out.status.success(), "{}", stderr(&out));

    // same protection for plain output files
    std::fs::write(root.join("plot.svg"), "occupied").unwrap();
    let out = mlfvo(&["plot", "data/00/poses.txt", "--out", "plot.svg"], root);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--overwrite"), "{}", stderr(&out));
}

#[test]
fn infer_writes_one_pose_line_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("cfg.txt"), TINY_CFG).unwrap();
    for args in [
        vec!["synth", "--config", "cfg.txt", "--out", "data/00"],
        vec!["train", "--config", "cfg.txt", "--run-dir", "run"],
        vec![
            "infer",
            "--config",
            "cfg.txt",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--out",
            "pred.txt",
        ],
    ] {
        let out = mlfvo(&args, root);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    }
    let pred = std::fs::read_to_string(root.join("pred.txt")).unwrap();
    assert_eq!(pred.lines().count(), 4, "one camera-to-world pose per frame");
    assert!(pred.lines().all(|l| l.split_whitespace().count() == 12));

    // prediction and ground truth have equal length, so eval succeeds
    let out = mlfvo(&["eval", "--gt", "data/00/poses.txt", "--pred", "pred.txt"], root);
    assert!(out.status.success(), "{}", stderr(&out));

    // a truncated prediction is a data error
    let short: String = pred.lines().take(3).map(|l| format!("{l}\n")).collect();
    std::fs::write(root.join("short.txt"), short).unwrap();
    let out = mlfvo(&["eval", "--gt", "data/00/poses.txt", "--pred", "short.txt"], root);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

const FIXTURE_POSES: &str = "\
1 0 0 0 0 1 0 0 0 0 1 0\n\
1 0 0 0.5 0 1 0 0 0 0 1 1\n\
1 0 0 1.5 0 1 0 0 0 0 1 2.25\n\
1 0 0 2 0 1 0 0 0 0 1 4\n\
1 0 0 1.75 0 1 0 0 0 0 1 6\n";

#[test]
fn plot_output_matches_golden_svg() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("a.txt"), FIXTURE_POSES).unwrap();
    let out = mlfvo(&["plot", "run=a.txt", "--out", "traj.svg"], root);
    assert!(out.status.success(), "{}", stderr(&out));
    let got = std::fs::read(root.join("traj.svg")).unwrap();
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/traj.svg");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden_path, &got).unwrap();
    }
    let want = std::fs::read(&golden_path).unwrap();
    assert_eq!(got, want, "SVG output drifted from tests/golden/traj.svg");
}
