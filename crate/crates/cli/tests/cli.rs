use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anchorloc"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "anchorloc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

const QUERIES: &str = "query_id,easting,northing\nq1,100,100\nq2,207,171\nq3,55.5,300\n";
const PAIRS: &str = "x,y,z,easting,northing\n0,0,0,10,20\n10,0,0,10,30\n0,10,0,0,20\n5,5,1,5,25\n";

/// Runs the full command chain into `dir`.
fn chain(dir: &Path, seed: &str) {
    fs::write(dir.join("q.csv"), QUERIES).unwrap();
    fs::write(dir.join("c.csv"), PAIRS).unwrap();
    let s = ["--seed", seed];
    run(dir, &[&s[..], &["grid", "--out", "out/manifest.csv"]].concat());
    run(dir, &[&s[..], &["build-vocab", "--n-c", "8", "--out", "out/vocab.flvb"]].concat());
    run(
        dir,
        &[&s[..], &["encode-db", "--manifest", "out/manifest.csv", "--vocab", "out/vocab.flvb", "--out", "out/db.fldb"]].concat(),
    );
    run(
        dir,
        &[&s[..], &["eval", "--db", "out/db.fldb", "--vocab", "out/vocab.flvb", "--queries", "q.csv", "--out", "out/eval"]].concat(),
    );
    for solver in ["gravity", "rigid", "soft"] {
        let out = format!("out/align_{solver}.json");
        run(dir, &[&s[..], &["align", "--input", "c.csv", "--solver", solver, "--out", &out]].concat());
    }
    run(dir, &[&s[..], &["simulate", "--ab-filtering", "--out", "out/sim"]].concat());
    run(
        dir,
        &[&s[..], &["ate", "--estimate", "out/sim/estimates.csv", "--truth", "out/sim/truth.csv", "--out", "out/ate.json"]].concat(),
    );
}

#[test]
fn every_command_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    chain(a.path(), "7");
    chain(b.path(), "7");
    let fa = files_under(&a.path().join("out"));
    let fb = files_under(&b.path().join("out"));
    assert!(fa.len() >= 20, "{fa:?}");
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a.path()).unwrap(), y.strip_prefix(b.path()).unwrap());
        assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn seed_changes_the_simulation() {
    let a = tempfile::tempdir().unwrap();
    run(a.path(), &["--seed", "1", "simulate", "--out", "s1"]);
    run(a.path(), &["--seed", "2", "simulate", "--out", "s2"]);
    let e1 = fs::read(a.path().join("s1/estimates.csv")).unwrap();
    let e2 = fs::read(a.path().join("s2/estimates.csv")).unwrap();
    assert_ne!(e1, e2);
}

#[test]
fn simulate_writes_ab_table() {
    let a = tempfile::tempdir().unwrap();
    run(a.path(), &["simulate", "--ab-filtering", "--out", "s"]);
    let table = fs::read_to_string(a.path().join("s/ab_comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "config,filtering,fp_rate,ate_mean,ate_sd,recall_at_1");
    assert!(lines[1].starts_with("filtered,true,"));
    assert!(lines[2].starts_with("unfiltered,false,"));
    let ate: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("s/ate.json")).unwrap()).unwrap();
    assert!(ate["mean"].as_f64().unwrap() < 20.0);
}

#[test]
fn malformed_config_key_is_named() {
    let a = tempfile::tempdir().unwrap();
    fs::write(a.path().join("bad.toml"), "[drift]\nscale_eror = 1.0\n").unwrap();
    let out = bin()
        .current_dir(a.path())
        .args(["--config", "bad.toml", "simulate", "--out", "s"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("scale_eror"), "{err}");
    assert!(!a.path().join("s").exists());
}

#[test]
fn config_file_is_honored() {
    let a = tempfile::tempdir().unwrap();
    fs::write(a.path().join("eight.toml"), "[trajectory]\npattern = \"eight\"\nlength = 800.0\n").unwrap();
    run(a.path(), &["--config", "eight.toml", "simulate", "--out", "s"]);
    let diag: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("s/diagnostics.json")).unwrap()).unwrap();
    // 800 m at 10 m/s with one keyframe per second
    let kf = diag["keyframes"].as_u64().unwrap();
    assert!((80..=81).contains(&kf), "{kf}");
}

#[test]
fn align_rejects_bad_header() {
    let a = tempfile::tempdir().unwrap();
    fs::write(a.path().join("c.csv"), "a,b\n1,2\n").unwrap();
    let out = bin().current_dir(a.path()).args(["align", "--input", "c.csv"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn align_recovers_planted_transform() {
    let a = tempfile::tempdir().unwrap();
    let (yaw, te, tn) = (0.7f64, 250.0, -40.0);
    let mut csv = String::from("x,y,z,easting,northing\n");
    for (x, y) in [(0.0, 0.0), (30.0, 5.0), (12.0, 44.0), (-20.0, 18.0), (7.0, -31.0)] {
        let e = yaw.cos() * x - yaw.sin() * y + te;
        let n = yaw.sin() * x + yaw.cos() * y + tn;
        csv.push_str(&format!("{x},{y},0,{e},{n}\n"));
    }
    fs::write(a.path().join("c.csv"), csv).unwrap();
    run(a.path(), &["align", "--input", "c.csv", "--out", "a.json"]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("a.json")).unwrap()).unwrap();
    assert!((v["yaw"].as_f64().unwrap() - yaw).abs() < 1e-9);
    assert!((v["translation"][0].as_f64().unwrap() - te).abs() < 1e-9);
    assert!((v["translation"][1].as_f64().unwrap() - tn).abs() < 1e-9);
}

#[test]
fn ate_of_truth_against_itself_is_zero() {
    let a = tempfile::tempdir().unwrap();
    run(a.path(), &["simulate", "--out", "s"]);
    run(a.path(), &["ate", "--estimate", "s/truth.csv", "--truth", "s/truth.csv", "--out", "z.json"]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("z.json")).unwrap()).unwrap();
    assert_eq!(v["mean"].as_f64().unwrap(), 0.0);
}
