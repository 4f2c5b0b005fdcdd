use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ea-interp"));
    c.env_remove("EA_INTERP_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut all = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            all.extend(files_under(&p));
        } else {
            all.push(p);
        }
    }
    all.sort();
    all
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("train.cfg");
    fs::write(
        &path,
        format!(
            "flow_channels = 4,8,8,8,8,8\nrefine_channels = 4,8,8,8,8,8\ndiscriminator_width = 4\n\
             synthetic_samples = 2\nbatch_size = 2\naugment = false\nepochs = 5\nseed = 3\n\
             run_dir = {}\n",
            dir.join("run").display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn help_exits_zero_everywhere() {
    assert_eq!(code(&run(&["--help"])), 0);
    for sub in ["train", "eval", "interp", "edges", "flow", "synth"] {
        let out = run(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(stdout(&out).contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["train", "--config", &format!("{d}/absent.cfg")])), 1);
    assert_eq!(code(&run(&["synth", "--out", d, "--size", "16"])), 1);
    assert_eq!(code(&run(&["edges", "--in", "x.png", "--out", "y.png", "--low", "0.5", "--high", "0.1"])), 1);
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&run(&["train", "--config", cfg, "--set", "epochs"])), 1);
    assert_eq!(code(&run(&["train", "--config", cfg, "--set", "unknown_key=1"])), 1);
    assert_eq!(code(&run(&["train", "--config", cfg, "--lr", "0"])), 1);
    let out = bin().args(["train", "--config", cfg]).env("EA_INTERP_SEED", "minus one").output().unwrap();
    assert_eq!(code(&out), 1);
    assert_eq!(
        code(&run(&["interp", "--frame0", "a.png", "--frame1", "b.png", "--checkpoint", "c", "--t", "1.5", "--out", d])),
        1
    );
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("missing.png");
    let out = run(&["edges", "--in", missing.to_str().unwrap(), "--out", d.join("e.png").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.png"));
    assert!(!d.join("e.png").exists());

    assert_eq!(code(&run(&["synth", "--out", d.join("data").to_str().unwrap(), "--count", "1"])), 0);
    let frame = d.join("data/synthetic_000/im1.png");
    let bogus = d.join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = run(&[
        "flow",
        "--frame0",
        frame.to_str().unwrap(),
        "--frame1",
        frame.to_str().unwrap(),
        "--checkpoint",
        bogus.to_str().unwrap(),
        "--out-flo",
        d.join("f").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn flags_override_config_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = bin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--set", "batch_size=1", "--lr", "0.002"])
        .env("EA_INTERP_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for line in ["epochs = 1", "seed = 77", "batch_size = 1", "learning_rate = 0.002"] {
        assert!(text.lines().any(|l| l == line), "missing `{line}` in\n{text}");
    }

    let out = bin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--seed", "5", "--force"])
        .env("EA_INTERP_SEED", "77")
        .output()
        .unwrap();
    assert!(stdout(&out).lines().any(|l| l == "seed = 5"));
}

#[test]
fn one_epoch_run_then_eval_interp_and_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = d.join("run/0001.ckpt");
    assert!(stdout(&out).contains(&format!("checkpoint {}", ckpt.display())));
    let run_files: Vec<String> =
        files_under(&d.join("run")).iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(run_files, ["0001.ckpt", "0001.manifest", "config.txt", "metrics.csv"]);

    assert_eq!(code(&run(&["synth", "--out", d.join("data").to_str().unwrap(), "--count", "2"])), 0);
    let report = d.join("reports/eval.csv");
    let out = run(&[
        "eval",
        "--dataset-root",
        d.join("data").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("PSNR="));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next().unwrap(), "sample,psnr,ssim");

    let out = run(&[
        "eval",
        "--dataset-root",
        d.join("data").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--report",
        d.join("mf.csv").to_str().unwrap(),
        "--mode",
        "multi_frame",
    ]);
    assert_eq!(code(&out), 1);

    let f0 = d.join("data/synthetic_000/im1.png");
    let f1 = d.join("data/synthetic_000/im3.png");
    let frames = d.join("frames");
    let out = run(&[
        "interp",
        "--frame0",
        f0.to_str().unwrap(),
        "--frame1",
        f1.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--factor",
        "4",
        "--out",
        frames.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let made: Vec<String> =
        files_under(&frames).iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(made, ["out_1.png", "out_2.png", "out_3.png"]);

    let flows = d.join("flows");
    fs::create_dir(&flows).unwrap();
    let out = run(&[
        "flow",
        "--frame0",
        f0.to_str().unwrap(),
        "--frame1",
        f1.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out-flo",
        flows.join("pair").to_str().unwrap(),
        "--out-viz",
        flows.join("pair").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let made: Vec<String> =
        files_under(&flows).iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(made, ["pair_bwd.flo", "pair_bwd.png", "pair_fwd.flo", "pair_fwd.png"]);

    let edges = d.join("edges.png");
    let out = run(&["edges", "--in", f0.to_str().unwrap(), "--out", edges.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(edges.is_file());
}
