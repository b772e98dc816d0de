use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn hep(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hep"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hep(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn smoke(dir: &Path) -> Vec<String> {
    let c = configs().join("smoke.toml");
    let c = c.to_str().unwrap().to_string();
    ok(dir, &["--config", &c, "gen-demos"]);
    ok(dir, &["--config", &c, "train"]);
    ok(dir, &["--config", &c, "eval", "--checkpoint", "run/model.hepc", "--heatmap", "run/h.hepg"]);
    vec![c]
}

#[test]
fn pipeline_runs_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    smoke(a.path());
    smoke(b.path());
    for f in ["demos.hepd", "model.hepc", "eval.csv", "h.hepg"] {
        let x = fs::read(a.path().join("run").join(f)).unwrap();
        let y = fs::read(b.path().join("run").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    // Everything but the wallclock column repeats.
    let strip = |d: &Path| -> Vec<String> {
        let m = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
        m.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    assert_eq!(strip(a.path()), strip(b.path()));
    assert_eq!(strip(a.path()).len(), 11);

    for (f, needle) in [("demos.hepd", "demos"), ("model.hepc", "iteration"), ("h.hepg", "argmax")] {
        let s = ok(a.path(), &["inspect", &format!("run/{f}")]);
        assert!(s.contains(needle), "{f}: {s}");
    }
}

#[test]
fn resume_continues_from_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let c = smoke(d.path()).remove(0);
    let once = fs::read(d.path().join("run/model.hepc")).unwrap();
    ok(d.path(), &["--config", &c, "--set", "train.iterations=15", "train", "--resume"]);
    let metrics = fs::read_to_string(d.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 16);
    assert_ne!(fs::read(d.path().join("run/model.hepc")).unwrap(), once);
}

#[test]
fn expert_eval_succeeds() {
    let d = tempfile::tempdir().unwrap();
    let c = configs().join("smoke.toml");
    let s = ok(d.path(), &["--config", c.to_str().unwrap(), "eval", "--expert"]);
    assert!(s.contains("1.000"), "{s}");
}

#[test]
fn bad_inputs_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("junk.bin"), b"NOPE0000").unwrap();
    assert_eq!(hep(d.path(), &["inspect", "junk.bin"]).status.code(), Some(1));
    fs::write(d.path().join("bad.toml"), "no_such_key = 3\n").unwrap();
    assert_eq!(hep(d.path(), &["--config", "bad.toml", "gen-demos"]).status.code(), Some(1));
    assert_eq!(hep(d.path(), &["--set", "optim.lr=fast", "gen-demos"]).status.code(), Some(1));
    assert_eq!(hep(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(hep(d.path(), &["eval", "--checkpoint", "missing.hepc"]).status.code(), Some(1));
}

#[test]
fn audit_of_fresh_weights_exits_zero() {
    let d = tempfile::tempdir().unwrap();
    let s = ok(d.path(), &["audit"]);
    assert!(s.starts_with("check,max_residual,tolerance,pass"));
    assert!(s.lines().skip(1).all(|l| l.ends_with(",true")), "{s}");
    assert_eq!(fs::read_to_string(d.path().join("run/audit.csv")).unwrap(), s);
}
