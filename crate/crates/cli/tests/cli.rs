//! End-to-end runs of the `mqt` binary: pipeline smoke, exit codes and
//! determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mqt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mqt")).args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A tiny config that keeps in-test training around a second.
fn tiny_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        "height = 8\nwidth = 8\nobjects_min = 2\nobjects_max = 2\nlength = 6\n\
         d_model = 16\nd_ff = 32\nn_heads = 2\nn_enc_layers = 1\nn_dec_layers = 1\n\
         d_app = 8\nn_det_queries = 6\nn_tags = 4\n\
         iterations = 60\nlog_every = 10\nseed = 5\n",
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn simulate_train_track_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let seq = dir.path().join("seq");
    let run = dir.path().join("run");
    let tracked = dir.path().join("tracked");
    let evals = dir.path().join("eval");

    assert_code(&mqt(&["simulate", "--config", &cfg, "--out", seq.to_str().unwrap()]), 0);
    for f in ["seqinfo.toml", "gt.txt", "det.txt", "frames/frame_000001.bin", "effective_config.toml"] {
        assert!(seq.join(f).exists(), "missing {}", f);
    }

    assert_code(
        &mqt(&[
            "train",
            "--config",
            &cfg,
            "--data",
            seq.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ]),
        0,
    );
    assert!(run.join("model.ckpt").exists());
    let curve = fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("iteration,total,box,app\n"));
    assert!(curve.lines().count() > 3);

    assert_code(
        &mqt(&[
            "track",
            "--config",
            &cfg,
            "--checkpoint",
            run.join("model.ckpt").to_str().unwrap(),
            "--sequence",
            seq.to_str().unwrap(),
            "--out",
            tracked.to_str().unwrap(),
        ]),
        0,
    );
    assert!(tracked.join("tracks.txt").exists());
    assert!(tracked.join("tracks.app.csv").exists());

    let out = mqt(&[
        "eval",
        "--gt",
        seq.join("gt.txt").to_str().unwrap(),
        "--pred",
        tracked.join("tracks.txt").to_str().unwrap(),
        "--out",
        evals.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let report = fs::read_to_string(evals.join("report.txt")).unwrap();
    assert!(report.contains("MOTA"), "report: {}", report);
    assert!(evals.join("report.csv").exists());
}

#[test]
fn eval_gt_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let seq = dir.path().join("seq");
    assert_code(&mqt(&["simulate", "--config", &cfg, "--out", seq.to_str().unwrap()]), 0);

    let evals = dir.path().join("eval");
    let out = mqt(&[
        "eval",
        "--gt",
        seq.join("gt.txt").to_str().unwrap(),
        "--pred",
        seq.join("gt.txt").to_str().unwrap(),
        "--out",
        evals.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let csv = fs::read_to_string(evals.join("report.csv")).unwrap();
    let total = csv.lines().last().unwrap();
    let fields: Vec<&str> = total.split(',').collect();
    assert_eq!(fields[5], "1", "MOTA must be exactly 1, row: {}", total);
    assert_eq!(fields[6], "1", "IDF1 must be exactly 1, row: {}", total);
}

#[test]
fn track_public_mode_without_detections_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let seq = dir.path().join("seq");
    let run = dir.path().join("run");
    assert_code(&mqt(&["simulate", "--config", &cfg, "--out", seq.to_str().unwrap()]), 0);
    assert_code(
        &mqt(&["train", "--config", &cfg, "--data", seq.to_str().unwrap(), "--out", run.to_str().unwrap()]),
        0,
    );
    // Remove the default detections file: public mode now has nothing.
    fs::remove_file(seq.join("det.txt")).unwrap();
    let out = mqt(&[
        "track",
        "--config",
        &cfg,
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--sequence",
        seq.to_str().unwrap(),
        "--mode",
        "public",
        "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("detections"));
}

#[test]
fn malformed_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "no_such_key = true\n").unwrap();
    let out = mqt(&["simulate", "--config", bad.to_str().unwrap(), "--out", dir.path().join("s").to_str().unwrap()]);
    assert_code(&out, 1);
}

#[test]
fn missing_input_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = mqt(&[
        "eval",
        "--gt",
        dir.path().join("nope.txt").to_str().unwrap(),
        "--pred",
        dir.path().join("nope.txt").to_str().unwrap(),
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
}

#[test]
fn unknown_subcommand_exits_one() {
    let out = mqt(&["frobnicate"]);
    assert_code(&out, 1);
}

#[test]
fn simulate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_code(&mqt(&["simulate", "--config", &cfg, "--out", a.to_str().unwrap()]), 0);
    assert_code(&mqt(&["simulate", "--config", &cfg, "--out", b.to_str().unwrap()]), 0);
    for f in ["gt.txt", "det.txt", "seqinfo.toml", "frames/frame_000003.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{} differs", f);
    }
}

#[test]
fn track_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let seq = dir.path().join("seq");
    let run = dir.path().join("run");
    assert_code(&mqt(&["simulate", "--config", &cfg, "--out", seq.to_str().unwrap()]), 0);
    assert_code(
        &mqt(&["train", "--config", &cfg, "--data", seq.to_str().unwrap(), "--out", run.to_str().unwrap()]),
        0,
    );
    let ta = dir.path().join("ta");
    let tb = dir.path().join("tb");
    for t in [&ta, &tb] {
        assert_code(
            &mqt(&[
                "track",
                "--config",
                &cfg,
                "--checkpoint",
                run.join("model.ckpt").to_str().unwrap(),
                "--sequence",
                seq.to_str().unwrap(),
                "--out",
                t.to_str().unwrap(),
            ]),
            0,
        );
    }
    for f in ["tracks.txt", "tracks.app.csv", "effective_config.toml"] {
        assert_eq!(
            fs::read(ta.join(f)).unwrap(),
            fs::read(tb.join(f)).unwrap(),
            "{} differs between identical runs",
            f
        );
    }
}

#[test]
fn b2f_keeps_supported_tracks_and_fills() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("b2f.toml");
    fs::write(&cfg_path, "height = 8\nwidth = 8\nlength = 5\n").unwrap();

    // Forward track 0 with a gap at frame 3; backward pass covers it.
    let fwd = dir.path().join("fwd.txt");
    fs::write(&fwd, "1,0,1,1,2,2,1,-1,-1,-1\n2,0,1.5,1,2,2,1,-1,-1,-1\n4,0,2.5,1,2,2,1,-1,-1,-1\n").unwrap();
    let bwd = dir.path().join("bwd.txt");
    fs::write(
        &bwd,
        "1,5,1,1,2,2,1,-1,-1,-1\n2,5,1.5,1,2,2,1,-1,-1,-1\n3,5,2,1,2,2,1,-1,-1,-1\n4,5,2.5,1,2,2,1,-1,-1,-1\n",
    )
    .unwrap();

    let out_dir = dir.path().join("ref");
    let out = mqt(&[
        "b2f",
        "--config",
        cfg_path.to_str().unwrap(),
        "--forward",
        fwd.to_str().unwrap(),
        "--backward",
        bwd.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let refined = fs::read_to_string(out_dir.join("refined.txt")).unwrap();
    // Gap frame 3 is filled, so the track now covers frames 1..=4.
    assert_eq!(refined.lines().count(), 4, "refined: {}", refined);
}
