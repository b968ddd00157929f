//! End-to-end runs of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

use guided_deblur::blur::BlurKernel;
use guided_deblur::checkpoint::Checkpoint;
use guided_deblur::data;
use guided_deblur::tensor::Tensor;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guided-deblur"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const STILL: &str = "preset = toy
trajectory.max_speed = 0
trajectory.max_accel = 0
trajectory.psf_sigma_min = 0
trajectory.psf_sigma_max = 0
trajectory.exposure_jitter = 0
data.noise_sigma = 0
";

#[test]
fn still_camera_kernels_are_centered_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("still.cfg");
    std::fs::write(&cfg, STILL).unwrap();
    let out = dir.path().join("k");
    let res = cli(&["gen-kernels", "--config", p(&cfg), "--count", "5", "--seed", "3", "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for i in 0..5 {
        let k = BlurKernel::load(&out.join(format!("{i:05}.bkrn"))).unwrap();
        assert_eq!(k, BlurKernel::delta(17));
    }
}

#[test]
fn gen_kernels_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (d, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        assert_eq!(code(&cli(&["gen-kernels", "--count", "3", "--seed", seed, "--out", p(d)])), 0);
    }
    let read = |d: &Path| std::fs::read(d.join("00001.bkrn")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn gen_dataset_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("set");
    assert_eq!(code(&cli(&["gen-dataset", "--count", "3", "--seed", "1", "--out", p(&out)])), 0);
    let manifest = data::read_manifest(&out).unwrap();
    assert_eq!(manifest.len(), 3);
    for i in 0..3 {
        let sharp = data::read_image(&out.join(format!("{i:05}_sharp.png"))).unwrap();
        let blurred = data::read_image(&out.join(format!("{i:05}_blurred.png"))).unwrap();
        assert_eq!(sharp.shape(), &[3, 64, 64]);
        assert_eq!(blurred.shape(), sharp.shape());
        BlurKernel::load(&out.join(format!("{i:05}.bkrn"))).unwrap();
    }
}

#[test]
fn invalid_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.dblf");
    let img = dir.path().join("x.png");
    data::write_image(&img, &Tensor::full([3, 8, 8], 0.5)).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["gen-kernels", "--config", "no-such-preset.cfg", "--count", "1", "--out", p(dir.path())],
        vec!["deblur", "--analysis", p(&missing), "--synthesis", p(&missing), "--in", p(&img), "--out", p(&img)],
        vec!["gradcheck", "--module", "nonexistent"],
        vec!["pretrain-analysis", "--out", p(&missing), "--resume", p(&missing)],
        vec!["frobnicate"],
    ];
    for args in cases {
        let res = cli(&args);
        assert_eq!(code(&res), 1, "{args:?}: {}", String::from_utf8_lossy(&res.stderr));
    }
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "preset = toy\nnot.a.key = 3\n").unwrap();
    assert_eq!(code(&cli(&["gen-kernels", "--config", p(&bad), "--count", "1", "--out", p(dir.path())])), 1);
}

#[test]
fn train_commands_write_loadable_checkpoints_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.dblf");
    let s = dir.path().join("s.dblf");
    let e = dir.path().join("e.dblf");
    for (cmd, out) in [("pretrain-analysis", &a), ("pretrain-synthesis", &s)] {
        let res = cli(&[cmd, "--out", p(out), "--iterations", "2", "--seed", "4"]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    }
    let res = cli(&["train-e2e", "--resume", p(&a), "--resume", p(&s), "--out", p(&e), "--iterations", "1"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let ck = Checkpoint::load(&e).unwrap();
    assert!(ck.has_network("analysis") && ck.has_network("synthesis"));

    let log = std::fs::read_to_string(dir.path().join("a.dblf.loss.txt")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[1].split(' ').collect();
    assert_eq!(fields[0], "2");
    assert!(fields[1].parse::<f64>().unwrap() > 0.0);
    assert_eq!(fields[2].parse::<f64>().unwrap(), 1e-3);

    // resuming e2e from a checkpoint that lacks the analysis network is invalid
    let res = cli(&["train-e2e", "--resume", p(&s), "--out", p(&e), "--iterations", "1"]);
    assert_eq!(code(&res), 1);

    let img = dir.path().join("in.png");
    let deblurred = dir.path().join("out.png");
    let kernel = dir.path().join("k.bkrn");
    data::write_image(&img, &Tensor::from_fn([3, 40, 52], |i| (i % 7) as f32 / 7.0)).unwrap();
    let res = cli(&[
        "deblur", "--analysis", p(&e), "--synthesis", p(&e), "--in", p(&img), "--out", p(&deblurred),
        "--kernel-out", p(&kernel),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(data::read_image(&deblurred).unwrap().shape(), &[3, 40, 52]);
    assert_eq!(BlurKernel::load(&kernel).unwrap().size(), 17);
}

#[test]
fn evaluate_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("set");
    let ck = dir.path().join("n.dblf");
    assert_eq!(code(&cli(&["gen-dataset", "--count", "2", "--seed", "5", "--out", p(&set)])), 0);
    assert_eq!(code(&cli(&["pretrain-synthesis", "--iterations", "1", "--out", p(&ck)])), 0);
    assert_eq!(code(&cli(&["pretrain-analysis", "--iterations", "0", "--out", p(&dir.path().join("a.dblf"))])), 0);
    let a = dir.path().join("a.dblf");
    let mut reports = Vec::new();
    for name in ["r1.csv", "r2.csv"] {
        let report = dir.path().join(name);
        let res = cli(&["evaluate", "--analysis", p(&a), "--synthesis", p(&ck), "--data", p(&set), "--report", p(&report)]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        reports.push(std::fs::read(&report).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let text = String::from_utf8(reports.remove(0)).unwrap();
    assert!(text.starts_with("path,psnr_db,mssim\n"));
    assert!(text.lines().last().unwrap().starts_with("MEAN,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn gradcheck_subcommand_passes() {
    let res = cli(&["gradcheck", "--module", "xcorr"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&cli(&["--help"])), 0);
}
