use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssmradnet::dataset::file_bytes;
use ssmradnet::sim::Dims;

const TINY: &str = "\
# small synthetic model
model.preset = synthetic
model.chirps_per_frame = 4
model.s_per_chirp = 16
train.epochs = 2
sim.seed = 3
bench.frames = 3
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ssmradnet"));
    c.env("SSMRADNET_THREADS", "1");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("spawn")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], dir: &Path) -> i32 {
    run(args, dir).status.code().expect("exit code")
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), TINY).unwrap();
    let root = dir.path().to_path_buf();
    (dir, root)
}

#[test]
fn simulate_is_deterministic_and_sized() {
    let (_g, d) = setup();
    let out = ok(
        &["simulate", "--config", "run.cfg", "--frames", "3", "--out", "a.adcc"],
        &d,
    );
    assert_eq!(out.lines().count(), 3);
    ok(
        &["simulate", "--config", "run.cfg", "--frames", "3", "--out", "b.adcc"],
        &d,
    );
    let (a, b) = (fs::read(d.join("a.adcc")).unwrap(), fs::read(d.join("b.adcc")).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.len() as u64, file_bytes(3, Dims::new(4, 16, 8), (32, 32)));
}

#[test]
fn simulate_noise_only_frame() {
    let (_g, d) = setup();
    let out = ok(
        &[
            "simulate",
            "--config",
            "run.cfg",
            "--set",
            "sim.min_targets=0",
            "--set",
            "sim.max_targets=0",
            "--frames",
            "1",
            "--out",
            "n.adcc",
        ],
        &d,
    );
    assert_eq!(out.trim(), "frame 0: 0 targets");
    let info = ok(&["inspect", "n.adcc"], &d);
    assert!(info.contains("frames=1"), "{info}");
}

#[test]
fn train_run_dir_layout_and_echo_reproduces() {
    let (_g, d) = setup();
    ok(
        &["simulate", "--config", "run.cfg", "--frames", "2", "--out", "t.adcc"],
        &d,
    );
    ok(
        &[
            "train",
            "--config",
            "run.cfg",
            "--train",
            "t.adcc",
            "--val",
            "t.adcc",
            "--run-dir",
            "r1",
        ],
        &d,
    );
    for f in ["config.echo", "checkpoint.ssmc", "log.csv"] {
        assert!(d.join("r1").join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(d.join("r1/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    ok(
        &[
            "train",
            "--config",
            "r1/config.echo",
            "--train",
            "t.adcc",
            "--val",
            "t.adcc",
            "--run-dir",
            "r2",
        ],
        &d,
    );
    assert_eq!(
        fs::read(d.join("r1/checkpoint.ssmc")).unwrap(),
        fs::read(d.join("r2/checkpoint.ssmc")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("r1/config.echo")).unwrap(),
        fs::read(d.join("r2/config.echo")).unwrap()
    );
}

#[test]
fn overfit_then_eval_reaches_high_dice() {
    let (_g, d) = setup();
    let extra = [
        "--set",
        "train.epochs=60",
        "--set",
        "train.batch_size=2",
        "--set",
        "train.lr=0.01",
        "--set",
        "train.seg_loss=bce+jaccard",
    ];
    ok(
        &["simulate", "--config", "run.cfg", "--frames", "2", "--out", "t.adcc"],
        &d,
    );
    let mut args = vec!["train", "--config", "run.cfg", "--train", "t.adcc", "--run-dir", "r"];
    args.extend(extra);
    ok(&args, &d);
    let report = ok(&["eval", "--checkpoint", "r/checkpoint.ssmc", "--data", "t.adcc"], &d);
    let dice: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("dice="))
        .expect("dice line")
        .parse()
        .unwrap();
    assert!(dice >= 0.99, "{report}");
}

#[test]
fn infer_stream_and_batch_write_identical_masks() {
    let (_g, d) = setup();
    ok(
        &["simulate", "--config", "run.cfg", "--frames", "3", "--out", "t.adcc"],
        &d,
    );
    ok(
        &["train", "--config", "run.cfg", "--train", "t.adcc", "--run-dir", "r"],
        &d,
    );
    ok(
        &[
            "infer",
            "--checkpoint",
            "r/checkpoint.ssmc",
            "--data",
            "t.adcc",
            "--run-dir",
            "r",
            "--stream",
        ],
        &d,
    );
    let streamed: Vec<Vec<u8>> = (0..3)
        .map(|i| fs::read(d.join(format!("r/masks/frame_{i:05}.pgm"))).unwrap())
        .collect();
    ok(
        &[
            "infer",
            "--checkpoint",
            "r/checkpoint.ssmc",
            "--data",
            "t.adcc",
            "--run-dir",
            "b",
            "--batch",
        ],
        &d,
    );
    for (i, s) in streamed.iter().enumerate() {
        assert!(s.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(s, &fs::read(d.join(format!("b/masks/frame_{i:05}.pgm"))).unwrap());
    }
}

#[test]
fn bench_default_config_is_under_a_million_params() {
    let (_g, d) = setup();
    ok(&["bench", "--set", "bench.mode=none", "--out", "report.txt"], &d);
    let report = fs::read_to_string(d.join("report.txt")).unwrap();
    let params: u64 = report
        .lines()
        .find_map(|l| l.strip_prefix("params="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(params < 1_000_000);
}

#[test]
fn bench_measures_latency() {
    let (_g, d) = setup();
    let table = ok(&["bench", "--config", "run.cfg", "--out", "report.txt"], &d);
    assert!(table.contains("MACs / frame"));
    let report = fs::read_to_string(d.join("report.txt")).unwrap();
    for key in [
        "latency_batch_p50_ms=",
        "latency_streaming_p95_ms=",
        "latency_streaming_tick_p99_us=",
    ] {
        assert!(report.contains(key), "{key}");
    }
}

#[test]
fn exit_codes() {
    let (_g, d) = setup();
    assert_eq!(code(&["bench", "--set", "model.bogus=1"], &d), 2);
    fs::write(d.join("bad.cfg"), "model.preset = synthetic\nnot a line\n").unwrap();
    assert_eq!(code(&["bench", "--config", "bad.cfg"], &d), 2);

    ok(
        &["simulate", "--config", "run.cfg", "--frames", "2", "--out", "t.adcc"],
        &d,
    );
    let bytes = fs::read(d.join("t.adcc")).unwrap();
    fs::write(d.join("cut.adcc"), &bytes[..bytes.len() - 7]).unwrap();
    assert_eq!(code(&["inspect", "cut.adcc"], &d), 3);
    fs::write(d.join("junk.bin"), b"JUNKJUNK").unwrap();
    assert_eq!(code(&["inspect", "junk.bin"], &d), 3);

    ok(
        &["train", "--config", "run.cfg", "--train", "t.adcc", "--run-dir", "r"],
        &d,
    );
    let mismatch = run(
        &[
            "eval",
            "--checkpoint",
            "r/checkpoint.ssmc",
            "--data",
            "t.adcc",
            "--set",
            "model.preset=synthetic",
        ],
        &d,
    );
    assert_eq!(mismatch.status.code(), Some(2));
    let err = String::from_utf8_lossy(&mismatch.stderr);
    assert!(err.contains("s_per_chirp") && err.contains("chirps_per_frame"), "{err}");

    let nan = run(
        &[
            "train",
            "--config",
            "run.cfg",
            "--set",
            "train.lr=inf",
            "--set",
            "train.epochs=3",
            "--train",
            "t.adcc",
            "--run-dir",
            "n",
        ],
        &d,
    );
    assert_eq!(nan.status.code(), Some(4), "{}", String::from_utf8_lossy(&nan.stderr));
}
