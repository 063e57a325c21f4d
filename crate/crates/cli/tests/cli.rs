use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/synthetic5/config.toml")
}

fn ad_audit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ad-audit"))
        .arg("--config")
        .arg(fixture_config())
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let name = e.file_name().to_string_lossy().into_owned();
            let mut bytes = std::fs::read(e.path()).unwrap();
            // The manifest records where it was written; nothing else may differ.
            if name == "run_manifest.json" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v["config"]["output_dir"] = serde_json::Value::Null;
                bytes = serde_json::to_vec(&v).unwrap();
            }
            (name, bytes)
        })
        .collect()
}

fn assert_same(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) {
    let names: Vec<_> = a.keys().collect();
    assert_eq!(names, b.keys().collect::<Vec<_>>());
    for (name, bytes) in a {
        assert!(bytes == &b[name], "{name} differs");
    }
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = ad_audit(&out, &["--dry-run", "all"]);
    assert!(o.status.success());
    let plan = String::from_utf8(o.stdout).unwrap();
    for stage in ["sessionize", "features", "audit", "nbr", "reconstruct", "evaluate"] {
        assert!(plan.contains(stage), "plan lacks {stage}:\n{plan}");
    }
    assert!(!out.exists());
}

#[test]
fn nbr_before_audit_names_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ad_audit(tmp.path(), &["nbr"]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("cells.jsonl"), "{err}");
    assert!(err.contains("ad-audit audit"), "{err}");
}

#[test]
fn stages_run_one_by_one_match_all() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(ad_audit(&a, &["all"]).status.success());
    for stage in ["sessionize", "features", "audit", "nbr", "reconstruct", "evaluate"] {
        let o = ad_audit(&b, &[stage]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_same(&snapshot(&a), &snapshot(&b));
}

#[test]
fn jobs_do_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(ad_audit(&a, &["--jobs", "1", "all"]).status.success());
    assert!(ad_audit(&b, &["--jobs", "8", "all"]).status.success());
    assert!(ad_audit(&c, &["--jobs", "8", "all"]).status.success());
    let sa = snapshot(&a);
    assert!(sa.contains_key("run_manifest.json"));
    assert!(sa.contains_key("eval_report.csv"));
    assert_same(&sa, &snapshot(&b));
    assert_same(&sa, &snapshot(&c));
}

#[test]
fn seed_flag_changes_mock_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(ad_audit(&a, &["all"]).status.success());
    assert!(ad_audit(&b, &["--seed", "7", "all"]).status.success());
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa["sessions.jsonl"], sb["sessions.jsonl"]);
    assert_ne!(sa["user_predictions.jsonl"], sb["user_predictions.jsonl"]);
}

#[test]
fn missing_config_fails() {
    let o = Command::new(env!("CARGO_BIN_EXE_ad-audit"))
        .args(["--config", "/nonexistent/ad-audit.toml", "all"])
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn example_config_spells_out_the_defaults() {
    let example = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../ad-audit.example.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_ad-audit"))
        .arg("--config")
        .arg(&example)
        .arg("show-config")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let empty = tempfile::NamedTempFile::new().unwrap();
    let d = Command::new(env!("CARGO_BIN_EXE_ad-audit"))
        .arg("--config")
        .arg(empty.path())
        .arg("show-config")
        .output()
        .unwrap();
    let strip = |b: &[u8]| -> String {
        String::from_utf8_lossy(b)
            .lines()
            .filter(|l| !l.contains("impressions =") && !l.contains("profiles =") && !l.contains("output_dir ="))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&o.stdout), strip(&d.stdout));
}
