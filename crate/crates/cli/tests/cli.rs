use karat_core::simplex::project_simplex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SMALL: &str = "\
model.dim = 16
model.depth = 2
train.epochs = 3
train.warmup_epochs = 1
train.batch_size = 8
data.train_size = 32
data.test_size = 16
";

fn karat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_karat")).args(args).env("KARAT_THREADS", "1").output().unwrap()
}

fn karat_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_karat"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn train_run(dir: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = write_config(dir, extra);
    let out = dir.join("run");
    let o = karat(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    out
}

#[test]
fn missing_dataset_path_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "data.format = idx\n");
    let o = karat(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("data.train"), "{}", text(&o.stderr));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.learning_rate = 0.1\n");
    let o = karat(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("train.learning_rate"));

    let cfg = write_config(dir.path(), "model.dim = 32\n");
    let o = karat(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("duplicate key `model.dim`"), "{}", text(&o.stderr));

    let o = karat(&["train", "--config", &cfg.replace("run.cfg", "absent.cfg")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn override_reaches_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "attention.kind = karat\n");
    let out = dir.path().join("o");
    let o = karat(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--attention.sharing=universal", "--attention.grid_size=2"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let resolved = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("attention.sharing = universal"));
    assert!(resolved.contains("attention.grid_size = 2"));
    assert!(resolved.contains("model.image_size = 16"));
}

#[test]
fn smoke_run_and_rerun_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = train_run(dir.path(), "");
    let metrics = std::fs::read_to_string(first.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,step,lr,train_loss,top1,top5");
    assert!(lines.len() > 3);
    for e in 1..=3 {
        assert!(first.join(format!("epoch_{e:03}.ckpt")).exists());
    }
    assert!(first.join("best.ckpt").exists());

    let again = dir.path().join("again");
    let resolved = first.join("config.resolved");
    let o = karat(&["train", "--config", resolved.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    for f in ["metrics.csv", "epoch_003.ckpt", "best.ckpt", "config.resolved"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let o = karat(&["eval", "--config", resolved.to_str().unwrap(), &format!("--eval.checkpoint={}", first.join("best.ckpt").display())]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("top1="));
}

#[test]
fn eval_with_wrong_geometry_fails() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_run(dir.path(), "");
    let o = karat(&[
        "eval",
        "--config",
        run.join("config.resolved").to_str().unwrap(),
        "--model.depth=3",
        &format!("--eval.checkpoint={}", run.join("best.ckpt").display()),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o.stderr));
}

#[test]
fn analysis_commands() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_run(dir.path(), "");
    let resolved = run.join("config.resolved");
    let resolved = resolved.to_str().unwrap();
    let out = dir.path().join("analysis");
    let out = out.to_str().unwrap();
    let ckpt = format!("--analysis.checkpoint={}", run.join("best.ckpt").display());

    let o = karat(&["analyze", "spectra", "--config", resolved, "--out", out, &ckpt, "--analysis.samples=2"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("row-sum check: max"), "{}", text(&o.stdout));
    assert!(Path::new(out).join("spectra_pre.csv").exists());
    assert!(Path::new(out).join("spectra_post.csv").exists());

    let o = karat(&["analyze", "hist", "--config", resolved, "--out", out, &ckpt]);
    assert!(o.status.success(), "{}", text(&o.stderr));

    let traj = format!("--analysis.trajectory={}", run.display());
    let o = karat(&["analyze", "landscape", "--config", resolved, "--out", out, &traj, "--analysis.resolution=3", "--analysis.eval_samples=8"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(std::fs::read_to_string(Path::new(out).join("landscape.csv")).unwrap().lines().count(), 10);

    let two = format!("--analysis.trajectory={},{}", run.join("epoch_001.ckpt").display(), run.join("epoch_002.ckpt").display());
    let o = karat(&["analyze", "landscape", "--config", resolved, "--out", out, &two]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("rank-deficient trajectory"));
}

#[test]
fn transfer_command() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_run(dir.path(), "");
    let out = dir.path().join("student");
    let o = karat(&[
        "transfer",
        "--config",
        run.join("config.resolved").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        &format!("--transfer.teacher={}", run.join("best.ckpt").display()),
        &format!("--transfer.teacher_config={}", run.join("config.resolved").display()),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn count_reports_reference_flags() {
    let o = karat(&["count", "--preset", "vit-tiny", "--attention", "g3b"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let s = text(&o.stdout);
    assert!(s.contains("595728"), "{s}");
    assert!(s.contains("FLAG"), "{s}");
    assert!(s.contains("0.168"), "{s}");

    let o = karat(&["analyze", "count", "--preset", "vit-base", "--attention", "softmax"]);
    assert!(o.status.success());
    assert!(text(&o.stdout).contains("85806346"));

    let o = karat(&["count", "--preset", "vit-huge"]);
    assert_eq!(o.status.code(), Some(1));
    let o = karat(&["count", "--preset", "vit-tiny", "--attention", "g3x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn project_fixed_cases() {
    let o = karat_stdin(&["project"], "0.2 0.3 0.5\n5 0 0\n1 1\n");
    assert!(o.status.success());
    assert_eq!(text(&o.stdout), "0.2 0.3 0.5\n1 0 0\n0.5 0.5\n");

    let o = karat_stdin(&["project"], "1 x\n");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn project_matches_library() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..rng.gen_range(2..40)).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
    let input: String = rows.iter().map(|r| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ") + "\n").collect();
    let o = karat_stdin(&["project"], &input);
    assert!(o.status.success());
    for (line, row) in text(&o.stdout).lines().zip(&rows) {
        let got: Vec<f64> = line.split(' ').map(|t| t.parse().unwrap()).collect();
        let want = project_simplex(row).unwrap().x_star;
        assert_eq!(got, want);
    }
}
