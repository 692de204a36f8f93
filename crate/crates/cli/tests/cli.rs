//! End-to-end tests that drive the compiled `roadcast` binary through its
//! documented workflows: data generation, training, evaluation, prediction,
//! rollout, basis inspection, config files, and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn roadcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadcast"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary should run")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        stderr(out)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

/// Generates a 16x24 log named `name` in `dir`; `extra` appends flags like
/// `--frames`/`--seed`. Returns the log's path.
fn gen_small(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec![
        "gen-data",
        "--out",
        name,
        "--height",
        "16",
        "--width",
        "24",
    ];
    args.extend_from_slice(extra);
    let out = roadcast(dir, &args);
    assert_ok(&out);
    path
}

/// Names of the `pred_*.pgm` files in `dir`, sorted.
fn pred_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("pred_"))
        .collect();
    names.sort();
    names
}

#[test]
fn gen_data_reports_counts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = roadcast(
        dir,
        &[
            "gen-data", "--out", "a.advl", "--frames", "40", "--height", "16", "--width", "24",
            "--seed", "7",
        ],
    );
    assert_ok(&out);
    assert_eq!(stdout(&out).trim(), "frames=40 actions=39");

    roadcast(
        dir,
        &[
            "gen-data", "--out", "b.advl", "--frames", "40", "--height", "16", "--width", "24",
            "--seed", "7",
        ],
    );
    let a = fs::read(dir.join("a.advl")).unwrap();
    let b = fs::read(dir.join("b.advl")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical logs");

    roadcast(
        dir,
        &[
            "gen-data", "--out", "c.advl", "--frames", "40", "--height", "16", "--width", "24",
            "--seed", "8",
        ],
    );
    let c = fs::read(dir.join("c.advl")).unwrap();
    assert_ne!(a, c, "different seeds must give different logs");

    let bad = roadcast(dir, &["gen-data", "--out", "d.advl", "--frames", "1"]);
    assert_eq!(exit_code(&bad), 2);
}

#[test]
fn gen_data_defaults_produce_the_standard_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = roadcast(tmp.path(), &["gen-data"]);
    assert_ok(&out);
    assert_eq!(stdout(&out).trim(), "frames=500 actions=499");
    assert!(tmp.path().join("roadworld.advl").exists());
}

#[test]
fn train_prints_advertised_param_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // full-size frames, just enough of them for a W=16 window
    let out = roadcast(
        dir,
        &["gen-data", "--out", "t.advl", "--frames", "20", "--seed", "1"],
    );
    assert_ok(&out);

    let w4 = roadcast(
        dir,
        &[
            "train", "--model", "sdf-tiling", "--window", "4", "--data", "t.advl", "--out",
            "w4", "--epochs", "1", "--seed", "0",
        ],
    );
    assert_ok(&w4);
    let lines = stdout(&w4);
    assert_eq!(
        lines.lines().next().unwrap(),
        "params=958400",
        "full output:\n{lines}"
    );

    let w16 = roadcast(
        dir,
        &[
            "train", "--model", "sdf-tiling", "--window", "16", "--data", "t.advl", "--out",
            "w16", "--epochs", "1", "--seed", "0",
        ],
    );
    assert_ok(&w16);
    assert_eq!(stdout(&w16).lines().next().unwrap(), "params=986048");

    let copy = roadcast(
        dir,
        &["train", "--model", "copy", "--data", "t.advl", "--out", "nope"],
    );
    assert_eq!(exit_code(&copy), 2);
    assert!(stderr(&copy).contains("copy"), "stderr: {}", stderr(&copy));
}

#[test]
fn eval_copy_on_a_static_world_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(
        dir,
        "s.advl",
        &[
            "--frames", "13", "--noise", "0", "--gain-steer", "0", "--gain-accel", "0",
            "--gain-brake", "0", "--seed", "4",
        ],
    );
    let out = roadcast(
        dir,
        &["eval", "--model", "copy", "--window", "2", "--data", "s.advl"],
    );
    assert_ok(&out);
    assert_eq!(
        stdout(&out).trim(),
        "model=copy n=11 mse_e4=0.0000 ssim=1.0000"
    );
}

#[test]
fn train_eval_roundtrip_with_window_crosscheck() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir, "m.advl", &["--frames", "50", "--noise", "0.005", "--seed", "3"]);

    let train = roadcast(
        dir,
        &[
            "train", "--model", "sdf-tiling", "--window", "2", "--basis", "8", "--data",
            "m.advl", "--out", "tdir", "--epochs", "2", "--lr", "1e-3", "--batch", "8",
            "--seed", "1",
        ],
    );
    assert_ok(&train);
    let log = stdout(&train);
    assert!(log.lines().next().unwrap().starts_with("params="));
    assert_eq!(
        log.lines().filter(|l| l.starts_with("epoch=")).count(),
        2,
        "output:\n{log}"
    );
    assert!(log.contains("best_epoch="));
    for artifact in ["best.advt", "final.advt", "loss.csv"] {
        assert!(dir.join("tdir").join(artifact).exists(), "missing {artifact}");
    }
    let curve = fs::read_to_string(dir.join("tdir/loss.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "epoch,mean_mse");
    assert_eq!(curve.lines().count(), 3, "header plus one row per epoch");

    let eval = |args: &[&str]| roadcast(dir, args);
    let first = eval(&[
        "eval", "--checkpoint", "tdir/final.advt", "--data", "m.advl", "--csv", "r.csv",
    ]);
    assert_ok(&first);
    let line = stdout(&first);
    assert!(
        line.starts_with("model=sdf-tiling n=48 mse_e4="),
        "summary line: {line}"
    );
    let again = eval(&["eval", "--checkpoint", "tdir/final.advt", "--data", "m.advl"]);
    assert_eq!(stdout(&again), line, "evaluation must be reproducible");

    let report = fs::read_to_string(dir.join("r.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "log,n,mse_e4,ssim");
    assert_eq!(report.lines().count(), 2);

    let best = eval(&["eval", "--checkpoint", "tdir/best.advt", "--data", "m.advl"]);
    assert_ok(&best);

    let clash = eval(&[
        "eval", "--checkpoint", "tdir/final.advt", "--data", "m.advl", "--window", "4",
    ]);
    assert_eq!(exit_code(&clash), 2);
    assert!(stderr(&clash).contains("window mismatch"), "{}", stderr(&clash));
}

#[test]
fn predict_copy_emits_last_frame_as_next_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir, "m.advl", &["--frames", "10", "--noise", "0", "--seed", "3"]);

    let out = roadcast(
        dir,
        &[
            "predict", "--model", "copy", "--window", "2", "--data", "m.advl", "--start",
            "0", "--steps", "2", "--out", "pdir",
        ],
    );
    assert_ok(&out);
    let pdir = dir.join("pdir");
    assert_eq!(pred_files(&pdir), ["pred_000002.pgm", "pred_000003.pgm"]);

    let true2 = fs::read(pdir.join("true_000002.pgm")).unwrap();
    let true3 = fs::read(pdir.join("true_000003.pgm")).unwrap();
    assert_ne!(true2, true3, "the world must actually move");
    // copy's prediction for frame 3 is the last frame of window [1,2]
    let pred3 = fs::read(pdir.join("pred_000003.pgm")).unwrap();
    assert_eq!(pred3, true2);

    let off_end = roadcast(
        dir,
        &[
            "predict", "--model", "copy", "--window", "2", "--data", "m.advl", "--start",
            "9", "--out", "x",
        ],
    );
    assert_eq!(exit_code(&off_end), 2);

    let too_many = roadcast(
        dir,
        &[
            "predict", "--model", "copy", "--window", "2", "--data", "m.advl", "--steps",
            "9", "--out", "x",
        ],
    );
    assert_eq!(exit_code(&too_many), 2);
    assert!(stderr(&too_many).contains("action index"), "{}", stderr(&too_many));
}

#[test]
fn rollout_copy_repeats_the_last_window_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir, "m.advl", &["--frames", "10", "--noise", "0", "--seed", "3"]);

    let out = roadcast(
        dir,
        &[
            "rollout", "--model", "copy", "--window", "2", "--data", "m.advl", "--steps",
            "3", "--out", "rdir",
        ],
    );
    assert_ok(&out);
    let rdir = dir.join("rdir");
    assert_eq!(
        pred_files(&rdir),
        ["pred_000002.pgm", "pred_000003.pgm", "pred_000004.pgm"]
    );
    // feeding copy's own output back freezes the rollout on frame 1
    let p2 = fs::read(rdir.join("pred_000002.pgm")).unwrap();
    let p3 = fs::read(rdir.join("pred_000003.pgm")).unwrap();
    let p4 = fs::read(rdir.join("pred_000004.pgm")).unwrap();
    assert_eq!(p2, p3);
    assert_eq!(p3, p4);
    for idx in 2..5 {
        assert!(rdir.join(format!("true_{idx:06}.pgm")).exists());
    }

    let too_long = roadcast(
        dir,
        &[
            "rollout", "--model", "copy", "--window", "2", "--data", "m.advl", "--steps",
            "20", "--out", "x",
        ],
    );
    assert_eq!(exit_code(&too_long), 2);
}

#[test]
fn inspect_basis_exports_descending_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir, "m.advl", &["--frames", "30", "--noise", "0.005", "--seed", "3"]);

    let train = roadcast(
        dir,
        &[
            "train", "--model", "sdf-tiling", "--window", "2", "--basis", "8", "--data",
            "m.advl", "--out", "tdir", "--epochs", "1", "--lr", "1e-3", "--seed", "1",
        ],
    );
    assert_ok(&train);

    let out = roadcast(
        dir,
        &[
            "inspect-basis", "--checkpoint", "tdir/final.advt", "--data", "m.advl", "--out",
            "bdir",
        ],
    );
    assert_ok(&out);
    let line = stdout(&out);
    assert!(line.starts_with("basis_images=8 "), "stdout: {line}");
    let err: f32 = line
        .trim()
        .rsplit("identity_max_err=")
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        err < 1e-5,
        "prediction must equal the weighted basis sum, err {err}"
    );

    let bdir = dir.join("bdir");
    for rank in 0..8 {
        assert!(bdir.join(format!("basis_{rank:02}.pgm")).exists());
    }
    assert!(bdir.join("prediction.pgm").exists());
    let csv = fs::read_to_string(bdir.join("weights.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "rank,basis,weight,raw_min,raw_max");
    let weights: Vec<f32> = lines
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(weights.len(), 8);
    assert!(
        weights.windows(2).all(|w| w[0] >= w[1]),
        "weights must be sorted descending: {weights:?}"
    );

    // the sdf alias trains the fully connected model, which has no basis
    let vector = roadcast(
        dir,
        &[
            "train", "--model", "sdf", "--window", "2", "--hidden", "32", "--data",
            "m.advl", "--out", "vdir", "--epochs", "1", "--seed", "1",
        ],
    );
    assert_ok(&vector);
    let refused = roadcast(
        dir,
        &[
            "inspect-basis", "--checkpoint", "vdir/final.advt", "--data", "m.advl", "--out",
            "x",
        ],
    );
    assert_eq!(exit_code(&refused), 2);
    assert!(stderr(&refused).contains("sdf-tiling"), "{}", stderr(&refused));
}

#[test]
fn config_files_resolve_with_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    fs::write(
        dir.join("gen.cfg"),
        "# small smoke world\nframes = 30\nseed = 5\n",
    )
    .unwrap();
    let from_file = roadcast(
        dir,
        &[
            "gen-data", "--config", "gen.cfg", "--out", "x.advl", "--height", "16",
            "--width", "24",
        ],
    );
    assert_ok(&from_file);
    assert_eq!(stdout(&from_file).trim(), "frames=30 actions=29");

    let flag_wins = roadcast(
        dir,
        &[
            "gen-data", "--config", "gen.cfg", "--frames", "20", "--out", "y.advl",
            "--height", "16", "--width", "24",
        ],
    );
    assert_ok(&flag_wins);
    assert_eq!(stdout(&flag_wins).trim(), "frames=20 actions=19");

    fs::write(dir.join("typo.cfg"), "frame = 30\n").unwrap();
    let unknown = roadcast(dir, &["gen-data", "--config", "typo.cfg", "--out", "z.advl"]);
    assert_eq!(exit_code(&unknown), 2);
    let msg = stderr(&unknown);
    assert!(
        msg.contains("unknown config key 'frame'"),
        "stderr should name the bad key: {msg}"
    );

    // unknown keys are rejected before any data is touched
    fs::write(dir.join("train.cfg"), "epoch = 3\n").unwrap();
    let train_unknown = roadcast(
        dir,
        &[
            "train", "--config", "train.cfg", "--data", "missing.advl", "--out", "o",
        ],
    );
    assert_eq!(exit_code(&train_unknown), 2);
    assert!(stderr(&train_unknown).contains("'epoch'"), "{}", stderr(&train_unknown));
}

#[test]
fn usage_and_model_resolution_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir, "m.advl", &["--frames", "6", "--seed", "0"]);

    // clap usage error: missing required --data/--out
    let usage = roadcast(dir, &["train"]);
    assert_eq!(exit_code(&usage), 2);

    // a checkpoint and a baseline at once is contradictory
    let both = roadcast(
        dir,
        &[
            "eval", "--checkpoint", "a.advt", "--model", "copy", "--data", "m.advl",
        ],
    );
    assert_eq!(exit_code(&both), 2);

    // neither is underspecified
    let neither = roadcast(dir, &["eval", "--data", "m.advl"]);
    assert_eq!(exit_code(&neither), 2);

    // only the copy baseline runs without a checkpoint
    let needs_ckpt = roadcast(
        dir,
        &["eval", "--model", "sdf-tiling", "--data", "m.advl"],
    );
    assert_eq!(exit_code(&needs_ckpt), 2);
    assert!(stderr(&needs_ckpt).contains("checkpoint"), "{}", stderr(&needs_ckpt));
}

#[test]
fn divergence_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir, "d.advl", &["--frames", "30", "--noise", "0.01", "--seed", "1"]);
    let out = roadcast(
        dir,
        &[
            "train", "--model", "sdf-tiling", "--window", "2", "--basis", "8", "--data",
            "d.advl", "--out", "ddir", "--lr", "1e12", "--epochs", "3", "--batch", "16",
            "--seed", "1",
        ],
    );
    assert_eq!(exit_code(&out), 3);
    assert!(
        stderr(&out).contains("diverged at epoch"),
        "stderr: {}",
        stderr(&out)
    );
}
