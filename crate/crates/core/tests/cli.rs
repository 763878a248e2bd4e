use std::path::Path;
use std::process::{Command, Output};

fn smpkit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smpkit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn smpkit")
}

fn small<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--dt", "0.02", "--paths", "1000", "--seed", "3"];
    v.extend_from_slice(extra);
    v
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn check_mp_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let good = smpkit(&tmp.path().join("good"), &small("check-mp", &["--u-points", "5", "--t-points", "3"]));
    assert_eq!(good.status.code(), Some(0), "{}", String::from_utf8_lossy(&good.stderr));

    let bad_dir = tmp.path().join("bad");
    let bad = smpkit(
        &bad_dir,
        &small("check-mp", &["--control", "zero", "--u-points", "5", "--t-points", "3"]),
    );
    assert_eq!(bad.status.code(), Some(1));
    let report = std::fs::read_to_string(bad_dir.join("mp_report.csv")).unwrap();
    assert!(report.lines().skip(1).any(|l| l.ends_with(",false")));
}

#[test]
fn unknown_preset_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = smpkit(tmp.path(), &small("simulate-forward", &["--preset", "no_such_preset"]));
    assert_eq!(out.status.code(), Some(2));
    let unknown_flag = smpkit(tmp.path(), &["simulate-forward", "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(2));
}

#[test]
fn reruns_and_worker_counts_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();
    for (tag, workers) in [("a", "0"), ("b", "0"), ("w1", "1"), ("w3", "3")] {
        let dir = tmp.path().join(tag);
        let out = smpkit(&dir, &small("verify-duality", &["--tests", "4", "--second-tests", "2", "--workers", workers]));
        assert!(out.status.code().is_some());
        seen.push(files(&dir));
    }
    assert!(!seen[0].is_empty());
    for other in &seen[1..] {
        assert_eq!(&seen[0], other);
    }
}

#[test]
fn different_seed_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    smpkit(&a, &small("simulate-forward", &[]));
    let mut args = small("simulate-forward", &[]);
    args[6] = "4";
    smpkit(&b, &args);
    let fa = std::fs::read(a.join("forward.csv")).unwrap();
    let fb = std::fs::read(b.join("forward.csv")).unwrap();
    assert_ne!(fa, fb);
}

#[test]
fn preset_dir_override() {
    let tmp = tempfile::tempdir().unwrap();
    let presets = tmp.path().join("presets");
    std::fs::create_dir(&presets).unwrap();
    let base = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/presets/lq_scalar.preset")).unwrap();
    let custom = base
        .replace("name = lq_scalar", "name = noisy")
        .replace("sigma = 0.3", "sigma = 0.6");
    std::fs::write(presets.join("noisy.preset"), custom).unwrap();

    let out_dir = tmp.path().join("out");
    let out = Command::new(env!("CARGO_BIN_EXE_smpkit"))
        .env("SMPKIT_PRESET_DIR", &presets)
        .args(small("simulate-forward", &["--preset", "noisy"]))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("preset.sigma = 0.6"));
}

#[test]
fn manifest_records_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let out = smpkit(tmp.path(), &small("solve-adjoint", &["--workers", "2"]));
    assert_eq!(out.status.code(), Some(0));
    let manifest = std::fs::read_to_string(tmp.path().join("manifest.txt")).unwrap();
    for key in ["command = solve-adjoint", "preset = lq_scalar", "paths = 1000", "seed = 3", "n_steps = 50", "ensemble_fingerprint = "] {
        assert!(manifest.contains(key), "missing `{key}` in\n{manifest}");
    }
    assert!(!manifest.contains("workers"));
    for f in ["adjoint.csv", "summary.csv"] {
        assert!(tmp.path().join(f).is_file());
    }
}
