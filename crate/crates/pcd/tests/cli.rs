use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "defaults": "desk",
  "data": {"num_images": 16, "image_size": 16, "input_size": 16},
  "pretrain": {"optim": {"batch_size": 8, "max_steps": 4}},
  "optim": {"batch_size": 8, "max_steps": 4},
  "queue": {"capacity": 32},
  "erf": {"input_size": 32, "samples": 4}
}"#;

fn pcd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcd"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("small.json"), SMALL).unwrap();
    d
}

#[test]
fn usage_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&pcd(d.path(), &[])), 2);
    assert_eq!(code(&pcd(d.path(), &["frobnicate"])), 2);
    assert_eq!(code(&pcd(d.path(), &["distill"])), 2);
    assert_eq!(code(&pcd(d.path(), &["erf", "--format", "png"])), 2);
    assert_eq!(code(&pcd(d.path(), &["distill", "--teacher", "t", "--symmetric", "--asymmetric"])), 2);
}

#[test]
fn help_and_version_exit_zero() {
    let d = tempfile::tempdir().unwrap();
    let h = pcd(d.path(), &["--help"]);
    assert_eq!(code(&h), 0);
    for sub in ["gen-data", "pretrain-teacher", "adapt-head", "distill", "export", "erf", "verify"] {
        assert!(stdout(&h).contains(sub), "{sub} missing from help");
    }
    assert_eq!(code(&pcd(d.path(), &["--version"])), 0);
}

#[test]
fn verify_passes_on_a_fresh_build() {
    let d = tempfile::tempdir().unwrap();
    let o = pcd(d.path(), &["verify"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn runtime_errors_exit_one() {
    let d = workdir();
    let o = pcd(d.path(), &["export", "--checkpoint", "missing.pcd"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.pcd"));
    fs::write(d.path().join("bad.json"), r#"{"defaults": true, "loss": {"tau": -1}}"#).unwrap();
    let o = pcd(d.path(), &["--config", "bad.json", "config"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("loss.tau"));
}

#[test]
fn config_prints_canonical_presets() {
    let d = tempfile::tempdir().unwrap();
    let o = pcd(d.path(), &["config", "--preset", "full"]);
    assert_eq!(code(&o), 0);
    let cfg = pcd::parse_config_str(&stdout(&o)).unwrap();
    assert_eq!(cfg, pcd_core::trainer::Config::full_scale());
}

#[test]
fn pipeline_end_to_end() {
    let d = workdir();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "small.json", "--out", "o"];
        full.extend_from_slice(args);
        let o = pcd(d.path(), &full);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    let out = d.path().join("o");
    run(&["gen-data"]);
    run(&["pretrain-teacher", "--data", "o/data"]);
    let report = stdout(&run(&["adapt-head", "--teacher", "o/teacher.pcd", "--trials", "8"]));
    assert!(report.contains("result: PASS"), "{report}");
    assert!(report.contains("CW-ReLU"));

    let again = pcd(d.path(), &["--config", "small.json", "--out", "o", "adapt-head", "--teacher", "o/teacher_adapted.pcd"]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("already adapted"));

    run(&["distill", "--teacher", "o/teacher.pcd", "--data", "o/data", "--level", "image"]);
    run(&["distill", "--teacher", "o/teacher.pcd", "--data", "o/data", "--level", "pixel"]);
    for level in ["image", "pixel"] {
        let log = fs::read_to_string(out.join(format!("metrics_{level}.tsv"))).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.lines().all(|l| l.split('\t').count() == 4));
    }
    assert!(out.join("student_pixel.pcd").exists());

    // the adapted checkpoint drives distillation the same way
    let mut full = vec!["--config", "small.json", "--out", "o2"];
    full.extend_from_slice(&["distill", "--teacher", "o/teacher_adapted.pcd", "--data", "o/data"]);
    assert_eq!(code(&pcd(d.path(), &full)), 0);
    assert_eq!(
        fs::read(out.join("student_pixel.pcd")).unwrap(),
        fs::read(d.path().join("o2/student_pixel.pcd")).unwrap()
    );

    run(&["export", "--checkpoint", "o/student_pixel.raw.pcd", "--anchor", "0.25"]);
    let e = pcd::load_checkpoint(out.join("export.pcd")).unwrap();
    assert_eq!(e.meta.norm_rescale_anchor, Some(0.25));
    assert!(e.paths().all(|p| p.starts_with("backbone.")));

    let erf = stdout(&run(&["erf", "--checkpoint", "o/student_pixel.raw.pcd", "--format", "csv"]));
    assert!(erf.contains("radius@0.95"));
    assert!(pcd::heatmap::decode_csv(&fs::read_to_string(out.join("erf.csv")).unwrap()).is_ok());
    run(&["erf"]);
    assert!(fs::read(out.join("erf.pgm")).unwrap().starts_with(b"P5\n32 32\n255\n"));
}

#[test]
fn reruns_are_identical() {
    let d = workdir();
    for out in ["a", "b"] {
        let o = pcd(d.path(), &["--config", "small.json", "--out", out, "--seed", "5", "pretrain-teacher"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read(d.path().join("a/teacher.pcd")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b/teacher.pcd")).unwrap());
    assert_eq!(
        fs::read(d.path().join("a/pretrain_metrics.tsv")).unwrap(),
        fs::read(d.path().join("b/pretrain_metrics.tsv")).unwrap()
    );
}

#[test]
fn interrupted_distill_resumes_to_the_same_result() {
    let d = workdir();
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["--config", "small.json", "--out", out, "distill", "--teacher", "t/teacher.pcd"];
        args.extend_from_slice(extra);
        let o = pcd(d.path(), &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    let o = pcd(d.path(), &["--config", "small.json", "--out", "t", "pretrain-teacher", "--frozen-random"]);
    assert_eq!(code(&o), 0);
    run("full", &[]);
    run("part", &["--stop-after", "2"]);
    assert!(!d.path().join("part/student_pixel.pcd").exists());
    run("part", &["--resume", "part/student_pixel.raw.pcd"]);
    for f in ["student_pixel.pcd", "student_pixel.raw.pcd", "metrics_pixel.tsv"] {
        assert_eq!(fs::read(d.path().join("full").join(f)).unwrap(), fs::read(d.path().join("part").join(f)).unwrap(), "{f}");
    }
}
