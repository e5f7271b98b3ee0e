use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csdn::data::dataset::read_pgm;
use csdn::{count_parameters, NetworkConfig};

fn csdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csdn"))
        .args(args)
        .env("CSDN_THREADS", "0")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Asserts failure with `code` and an `error:` line mentioning `needle`.
fn fails(o: &Output, code: i32, needle: &str) {
    assert_eq!(o.status.code(), Some(code), "stdout: {}\nstderr: {}", stdout(o), stderr(o));
    let err = stderr(o);
    let line = err.lines().find(|l| l.starts_with("error:")).unwrap_or_else(|| panic!("no error line in {:?}", err));
    assert!(err.contains(needle), "{:?} does not mention {:?} (first line {:?})", err, needle, line);
}

fn gen(dir: &Path, n_train: usize, n_val: usize, seed: u64) {
    let o = csdn(&[
        "gen-data",
        "--out",
        p(dir),
        "--n-train",
        &n_train.to_string(),
        "--n-val",
        &n_val.to_string(),
        "--size",
        "64",
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A two-epoch tiny-network run on a 4 + 2 sample dataset.
fn trained(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = tmp.join("data");
    gen(&data, 4, 2, 5);
    let cfg = tmp.join("run.cfg");
    std::fs::write(&cfg, "# smoke run\nnetwork = tiny\nepochs = 2\nbatch_size = 2\nseed = 3\n").unwrap();
    let out = tmp.join("run");
    let o = csdn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (data, out)
}

#[test]
fn gen_data_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 3, 2, 9);
    gen(&b, 3, 2, 9);
    let dirs = std::fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 5);
    assert!(a.join("manifest.txt").is_file());
    assert_eq!(tree(&a), tree(&b));
    let c = tmp.path().join("c");
    gen(&c, 3, 2, 10);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn gen_data_rejects_bad_size_and_non_empty_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    fails(&csdn(&["gen-data", "--out", p(&dir), "--size", "100"]), 1, "multiple of 64");
    gen(&dir, 1, 1, 0);
    let o = csdn(&["gen-data", "--out", p(&dir), "--n-train", "1", "--n-val", "1", "--size", "64"]);
    fails(&o, 1, "--force");
    let o = csdn(&["gen-data", "--out", p(&dir), "--n-train", "1", "--n-val", "1", "--size", "64", "--force"]);
    assert!(o.status.success());
}

#[test]
fn usage_errors_exit_one() {
    fails(&csdn(&["train", "--bogus"]), 1, "--bogus");
    fails(&csdn(&["no-such-command"]), 1, "no-such-command");
}

#[test]
fn malformed_config_cites_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs = 2\nlr = = 3\n").unwrap();
    let o = csdn(&["train", "--config", p(&cfg), "--data", p(tmp.path()), "--out", p(&tmp.path().join("o"))]);
    fails(&o, 1, "line 2");
    std::fs::write(&cfg, "epochs = 2\nbatchsize = 3\n").unwrap();
    let o = csdn(&["train", "--config", p(&cfg), "--data", p(tmp.path()), "--out", p(&tmp.path().join("o"))]);
    fails(&o, 1, "unknown key `batchsize`");
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = csdn(&["train", "--data", p(&tmp.path().join("nope")), "--out", p(&tmp.path().join("o"))]);
    fails(&o, 2, "manifest");
}

#[test]
fn train_resume_eval_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = trained(tmp.path());
    for f in ["best.ckpt", "last.ckpt", "train_log.csv", "config.txt"] {
        assert!(run.join(f).is_file(), "{} missing", f);
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,loss,lr,val_dsc_lumen,val_dsc_eem,val_hd95_lumen,val_hd95_eem");
    assert_eq!(log.lines().count(), 3);

    // Resume continues at the recorded epoch.
    let cfg = tmp.path().join("more.cfg");
    std::fs::write(&cfg, "network = tiny\nepochs = 3\nbatch_size = 2\nseed = 3\n").unwrap();
    let last = run.join("last.ckpt");
    let o = csdn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--resume", p(&last)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let epochs: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["0", "1", "2"]);

    // Eval writes the per-sample report.
    let report = tmp.path().join("report.csv");
    let o = csdn(&["eval", "--weights", p(&last), "--data", p(&data), "--split", "val", "--report", p(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("L-DSC"));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "sample_id,region,dsc,iou,hd95_mm");
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    // Infer: label range, overlay size, byte-identical reruns.
    let sample = data.join("s00004");
    let (o1, o2) = (tmp.path().join("i1"), tmp.path().join("i2"));
    for out in [&o1, &o2] {
        let o = csdn(&["infer", "--weights", p(&last), "--input", p(&sample), "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("lumen: dsc"));
    }
    let (w, h, px) = read_pgm(&o1.join("label.pgm")).unwrap();
    assert_eq!((w, h), (64, 64));
    assert!(px.iter().all(|&v| v <= 2));
    let ppm = std::fs::read(o1.join("overlay.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(ppm.len(), 13 + 64 * 64 * 3);
    assert_eq!(tree(&o1), tree(&o2));

    // Infer without a label file, and with a frame missing.
    let bare = tmp.path().join("bare");
    std::fs::create_dir(&bare).unwrap();
    for f in ["frame1.pgm", "frame2.pgm", "frame3.pgm"] {
        std::fs::copy(sample.join(f), bare.join(f)).unwrap();
    }
    let o = csdn(&["infer", "--weights", p(&last), "--input", p(&bare), "--out", p(&tmp.path().join("i3"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stdout(&o).contains("dsc"));
    std::fs::remove_file(bare.join("frame3.pgm")).unwrap();
    let o = csdn(&["infer", "--weights", p(&last), "--input", p(&bare), "--out", p(&tmp.path().join("i4"))]);
    fails(&o, 2, "frame3.pgm");

    // Bench on the trained weights.
    let o = csdn(&["bench", "--weights", p(&last), "--size", "64", "--iters", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let field = |k: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(k)).unwrap_or_else(|| panic!("{} missing in {}", k, text));
        line.split(':').nth(1).unwrap().trim().parse().unwrap()
    };
    assert_eq!(field("params") as usize, count_parameters(&NetworkConfig::tiny()).unwrap());
    assert!(field("fps") > 0.0);
    assert!(field("latency_p95_ms") >= field("latency_p50_ms"));
    assert!(text.contains("published reference"));
}

#[test]
fn eval_oracle_mode_and_missing_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 0, 1);
    let report = tmp.path().join("r.csv");
    let o = csdn(&["eval", "--oracle", "--data", p(&data), "--split", "train", "--report", p(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&report).unwrap();
    for row in csv.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(&cols[2..], ["1.000000", "1.000000", "0.000000"], "{}", row);
    }
    fails(&csdn(&["eval", "--oracle", "--data", p(&data), "--split", "val"]), 2, "no samples");
    fails(&csdn(&["eval", "--oracle", "--data", p(&data), "--split", "test"]), 2, "unknown split");
}

#[test]
fn bench_rejects_too_few_iterations() {
    fails(&csdn(&["bench", "--size", "64", "--iters", "5"]), 1, "below the minimum");
}

#[test]
fn bench_is_stable_within_a_process() {
    use csdn::metrics::fps_benchmark;
    let net = csdn::Csdn::<f32>::new(NetworkConfig::tiny(), 0).unwrap();
    // Median of a few paired measurements damps scheduler noise.
    let mut ratios: Vec<f64> = (0..3)
        .map(|_| {
            let a = fps_benchmark(&net, (128, 128), 1, 2, 20).unwrap().fps;
            let b = fps_benchmark(&net, (128, 128), 1, 2, 20).unwrap().fps;
            a / b
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let r = ratios[1];
    assert!((0.75..=1.0 / 0.75).contains(&r), "fps ratio {}", r);
}

#[test]
fn gradcheck_refuses_large_networks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("big.cfg");
    std::fs::write(&cfg, "network = reference\n").unwrap();
    fails(&csdn(&["gradcheck", "--config", p(&cfg)]), 1, "at most 100000 parameters");
}

#[cfg(feature = "inject-grad-bug")]
#[test]
fn gradcheck_catches_an_injected_bug() {
    let o = csdn(&["gradcheck"]);
    fails(&o, 3, "prelu");
    assert!(stdout(&o).lines().any(|l| l.starts_with("prelu") && l.ends_with("FAIL")));
}
