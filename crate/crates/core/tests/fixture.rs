use std::path::PathBuf;

use ad_audit::synth::{generate_cohort, write_cohort, CohortConfig};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic5")
}

pub fn fixture_config() -> CohortConfig {
    CohortConfig {
        users: 5,
        weeks: 4,
        seed: 5,
        ..CohortConfig::default()
    }
}

/// Set `REGENERATE_FIXTURE=1` to rewrite the checked-in files.
#[test]
fn synthetic5_matches_generator() {
    let cohort = generate_cohort(&fixture_config());
    if std::env::var_os("REGENERATE_FIXTURE").is_some() {
        write_cohort(&fixture_dir(), &cohort).unwrap();
    }
    let tmp = tempfile::tempdir().unwrap();
    write_cohort(tmp.path(), &cohort).unwrap();
    for name in ["impressions.jsonl", "profiles.csv"] {
        let fresh = std::fs::read(tmp.path().join(name)).unwrap();
        let stored = std::fs::read(fixture_dir().join(name)).unwrap();
        assert!(fresh == stored, "{name} differs from the generator output");
    }
}
