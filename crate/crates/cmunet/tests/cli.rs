//! End-to-end tests of the installed binary: exit codes, artifact layout,
//! determinism across invocations, and the infer -> eval round trip.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cmunet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Synthesize a dataset and write a config pointing at it.
fn setup(dir: &Path, count: usize, epochs: usize) -> (PathBuf, PathBuf, PathBuf) {
    let data = dir.join("data");
    let out = dir.join("run");
    let config = dir.join("run.conf");
    let synth = run(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--size",
        "32",
        "--seed",
        "11",
    ]);
    assert_eq!(code(&synth), 0, "{}", stderr(&synth));
    fs::write(
        &config,
        format!(
            "# test run\nin_channels=3\nchannels=4,8,16,32,64\nconvmixer_depth=2\n\
             convmixer_kernel=3\ninput_size=32\nepochs={epochs}\nbatch_size=4\nlr=0.001\n\
             seed=0\ndata={}\nout={}\n",
            data.display(),
            out.display()
        ),
    )
    .unwrap();
    (config, data, out)
}

fn train_ok(config: &Path) -> Output {
    let out = run(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    out
}

/// The log's wall-time column is the one legitimately non-deterministic
/// field; strip it before comparing runs.
fn log_without_wall_time(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').expect("5 columns").0)
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn exit_codes_follow_the_contract() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["train"])), 1); // missing required --config

    // Missing config file: I/O error -> 2.
    let missing = run(&["train", "--config", "/definitely/not/here.conf"]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("error:"));

    // Unknown gradcheck op: usage error -> 1.
    assert_eq!(code(&run(&["gradcheck", "--op", "bogus"])), 1);

    // Config with an unknown key: configuration error -> 1.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "flavor=vanilla\n").unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unknown config key"));
}

#[test]
fn training_writes_artifacts_and_repeats_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _data, out) = setup(dir.path(), 6, 2);

    train_ok(&config);
    let best = out.join("best.ckpt");
    let last = out.join("last.ckpt");
    let log = out.join("train_log.csv");
    for p in [&best, &last, &log] {
        assert!(p.exists(), "missing {}", p.display());
    }
    assert!(out.join("config.conf").exists());
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);

    let best1 = fs::read(&best).unwrap();
    let last1 = fs::read(&last).unwrap();
    let log1 = log_without_wall_time(&log);

    // Second run with the identical config reproduces everything bitwise
    // (modulo the wall-time log column).
    train_ok(&config);
    assert_eq!(fs::read(&best).unwrap(), best1, "best checkpoints differ across runs");
    assert_eq!(fs::read(&last).unwrap(), last1, "last checkpoints differ across runs");
    assert_eq!(log_without_wall_time(&log), log1, "logs differ beyond wall time");

    // Reference mode must agree with the default parallel mode bitwise.
    let reference = bin()
        .args(["train", "--config", config.to_str().unwrap()])
        .env("CMUNET_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&reference), 0, "{}", stderr(&reference));
    assert_eq!(fs::read(&best).unwrap(), best1, "reference mode diverged from parallel mode");
}

#[test]
fn zero_epochs_writes_initialization_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _data, out) = setup(dir.path(), 4, 0);
    train_ok(&config);

    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.is_empty(), "expected an empty log, got {log:?}");
    // With no validation signal, best falls back to the last (initial) state.
    assert_eq!(fs::read(out.join("best.ckpt")).unwrap(), fs::read(out.join("last.ckpt")).unwrap());
}

#[test]
fn eval_reports_per_image_rows_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data, out) = setup(dir.path(), 6, 2);
    train_ok(&config);

    let best = out.join("best.ckpt");
    let eval = run(&["eval", "--checkpoint", best.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let text = stdout(&eval);
    for i in 0..6 {
        assert!(text.contains(&format!("synth_{i:04}")), "missing row in:\n{text}");
    }
    assert!(text.contains("(n=6)"), "missing aggregate in:\n{text}");

    // Two checkpoints -> mean±std summary line.
    let two = run(&[
        "eval",
        "--checkpoint",
        best.to_str().unwrap(),
        "--checkpoint",
        out.join("last.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&two), 0, "{}", stderr(&two));
    let text = stdout(&two);
    assert!(text.contains("mean over 2 runs"), "{text}");
    assert!(text.contains('±'), "expected mean±std formatting in:\n{text}");
}

#[test]
fn corrupted_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data, out) = setup(dir.path(), 4, 1);
    train_ok(&config);

    let path = out.join("best.ckpt");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&path, bytes).unwrap();

    let eval = run(&["eval", "--checkpoint", path.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&eval), 2);
    assert!(stderr(&eval).contains("checksum mismatch"), "{}", stderr(&eval));
}

#[test]
fn infer_eval_round_trip_scores_perfect_iou() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data, out) = setup(dir.path(), 6, 3);
    train_ok(&config);
    let best = out.join("best.ckpt");

    // Predict a mask for every image; write them as a derived dataset whose
    // ground truth *is* the prediction.
    let derived = dir.path().join("derived");
    fs::create_dir_all(derived.join("masks")).unwrap();
    fs::create_dir_all(derived.join("images")).unwrap();
    let mut first_mask_bytes = None;
    for i in 0..6 {
        let name = format!("synth_{i:04}.png");
        let image = data.join("images").join(&name);
        let mask = derived.join("masks").join(&name);
        fs::copy(&image, derived.join("images").join(&name)).unwrap();

        let infer = run(&[
            "infer",
            "--checkpoint",
            best.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--out",
            mask.to_str().unwrap(),
        ]);
        assert_eq!(code(&infer), 0, "{}", stderr(&infer));

        // The emitted mask is strictly binary 0/255.
        let png = image::open(&mask).unwrap().to_luma8();
        assert_eq!((png.width(), png.height()), (32, 32));
        assert!(png.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));

        if i == 0 {
            // Inferring twice produces identical bytes.
            let again = derived.join("again.png");
            let rerun = run(&[
                "infer",
                "--checkpoint",
                best.to_str().unwrap(),
                "--image",
                image.to_str().unwrap(),
                "--out",
                again.to_str().unwrap(),
            ]);
            assert_eq!(code(&rerun), 0);
            assert_eq!(fs::read(&mask).unwrap(), fs::read(&again).unwrap());
            first_mask_bytes = Some(fs::read(&mask).unwrap());
        }
    }
    assert!(first_mask_bytes.is_some());

    // Evaluating against its own predictions is a perfect score.
    let eval = run(&["eval", "--checkpoint", best.to_str().unwrap(), "--data", derived.to_str().unwrap()]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let text = stdout(&eval);
    let aggregate = text.lines().find(|l| l.contains("(n=6)")).expect("aggregate line");
    assert!(
        aggregate.matches("100.00").count() >= 5,
        "expected all five metrics at 100.00 in: {aggregate}"
    );
}

#[test]
fn gradcheck_selector_prints_one_row() {
    let out = run(&["gradcheck", "--op", "conv2d"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().filter(|l| l.contains("conv2d")).collect();
    assert_eq!(rows.len(), 1, "{text}");
    assert!(rows[0].contains("ok"), "{text}");
}

#[test]
fn ablate_prints_three_ordered_rows_with_shared_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data, _out) = setup(dir.path(), 5, 1);
    let out = run(&["ablate", "--config", config.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);

    let rows: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("baseline") || l.starts_with("+convmixer"))
        .collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert!(rows[0].starts_with("baseline"));
    assert!(rows[1].starts_with("+convmixer "));
    assert!(rows[2].starts_with("+convmixer+msag"));

    let params: Vec<u64> = rows
        .iter()
        .map(|r| r.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(params[0] < params[1] && params[1] < params[2], "{params:?}");

    let seeds: Vec<&str> =
        rows.iter().map(|r| r.split_whitespace().last().unwrap()).collect();
    assert!(seeds.iter().all(|&s| s == seeds[0]), "split seeds differ: {seeds:?}");
}
