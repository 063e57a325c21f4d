use std::path::Path;

use ad_audit::config::Config;
use ad_audit::error::Error;
use ad_audit::pipeline::{Pipeline, RunManifest, Stage};

fn fixture_config(out: &Path) -> Config {
    let mut cfg = Config::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic5/config.toml")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg.evaluate.eval.sampling_runs = 20;
    cfg
}

#[test]
fn plan_names_missing_inputs_and_touches_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let p = Pipeline::new(fixture_config(&out), 1);
    let plan = p.plan(&[Stage::Nbr]);
    assert!(plan.contains("cells.jsonl"));
    assert!(plan.contains("run `ad-audit audit` first"), "{plan}");
    let plan = p.plan(&Stage::ALL);
    assert!(!plan.contains("missing"), "{plan}");
    assert!(!out.exists());
}

#[test]
fn stage_without_inputs_reports_its_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(fixture_config(tmp.path()), 1);
    match p.run(&[Stage::Evaluate]) {
        Err(Error::MissingArtifact { path, producer }) => {
            assert!(path.ends_with("session_predictions.jsonl"));
            assert_eq!(producer, "ad-audit reconstruct");
        }
        other => panic!("expected a missing artifact, got {other:?}"),
    }
}

#[test]
fn manifest_records_every_stage_and_artifact_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(fixture_config(tmp.path()), 2);
    p.run(&Stage::ALL).unwrap();
    let m: RunManifest = serde_json::from_slice(&std::fs::read(tmp.path().join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m.stages.len(), 6);
    assert_eq!(&m.config, p.config());
    for rec in m.stages.values() {
        for (name, digest) in &rec.artifacts {
            let bytes = std::fs::read(tmp.path().join(name)).unwrap();
            assert_eq!(digest.len(), 64);
            assert_eq!(*digest, ad_audit::pipeline::sha256_hex(&bytes), "{name}");
        }
    }
    let theta = m.stages[&Stage::Sessionize].counts["theta_seconds"].as_f64().unwrap();
    assert!(theta > 0.0);
}

#[test]
fn response_cache_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(&tmp.path().join("a"));
    cfg.backend.cache_dir = Some(tmp.path().join("cache"));
    Pipeline::new(cfg.clone(), 1).run(&Stage::ALL).unwrap();
    assert!(std::fs::read_dir(tmp.path().join("cache")).unwrap().next().is_some());
    let first = std::fs::read(tmp.path().join("a/user_predictions.jsonl")).unwrap();
    // A second pass reads from the cache and must produce the same bytes.
    Pipeline::new(cfg, 1).run(&[Stage::Features, Stage::Reconstruct]).unwrap();
    let second = std::fs::read(tmp.path().join("a/user_predictions.jsonl")).unwrap();
    assert_eq!(first, second);
}
