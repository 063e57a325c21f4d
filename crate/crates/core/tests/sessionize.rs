use std::io::Write;

use ad_audit::ingest::{self, CohortDataset, InputFormat};
use ad_audit::sessionize::{self, SessionizerConfig, ThetaSource};
use ad_audit::synth::{self, CohortConfig};
use proptest::prelude::*;

proptest! {
    #[test]
    fn sessions_partition_the_timeline(
        gaps in proptest::collection::vec(0i64..3000, 1..80),
        theta in 1.0f64..2000.0,
    ) {
        let mut ts = vec![1_600_000_000i64];
        for g in &gaps {
            ts.push(ts.last().unwrap() + g);
        }
        let ranges = sessionize::segment(&ts, theta);
        prop_assert_eq!(ranges.first().unwrap().start, 0);
        prop_assert_eq!(ranges.last().unwrap().end, ts.len());
        for w in ranges.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert!((ts[w[1].start] - ts[w[1].start - 1]) as f64 > theta);
        }
        for r in &ranges {
            for i in r.start + 1..r.end {
                prop_assert!((ts[i] - ts[i - 1]) as f64 <= theta);
            }
        }
    }
}

#[test]
fn generated_cohort_recovers_session_structure() {
    // Sessions are at least six hours apart and ads inside one are seconds
    // apart, so the threshold must fall in between and every generated
    // session must come back whole.
    let cohort = synth::generate_cohort(&CohortConfig {
        users: 20,
        weeks: 4,
        seed: 3,
        ..CohortConfig::default()
    });
    let cfg = SessionizerConfig {
        min_session_len: 1,
        max_session_len: 1000,
        min_sessions_per_user: 1,
        ..SessionizerConfig::default()
    };
    let out = sessionize::sessionize_cohort(&cohort, &cfg).unwrap();
    assert_eq!(out.theta_source, ThetaSource::Kde);
    assert!(out.theta > 10.0 && out.theta < 6.0 * 3600.0 - 3600.0, "theta {}", out.theta);
    for (_, sessions) in &out.filtered.by_user {
        for s in sessions {
            let span = s.end - s.start;
            assert!(span < 3600, "session spans {span}s");
        }
    }
    assert_eq!(out.filtered.counts.impressions_out, cohort.impressions.len());
}

#[test]
fn csv_and_jsonl_inputs_sessionize_identically() {
    let cohort = synth::generate_cohort(&CohortConfig {
        users: 6,
        weeks: 3,
        seed: 11,
        ..CohortConfig::default()
    });
    let dir = tempfile::tempdir().unwrap();
    synth::write_cohort(dir.path(), &cohort).unwrap();
    let csv_path = dir.path().join("impressions.csv");
    let mut f = std::fs::File::create(&csv_path).unwrap();
    writeln!(f, "user_id,timestamp,ad_id,source,title,body,image_refs").unwrap();
    for i in &cohort.impressions {
        writeln!(
            f,
            "{},{},{},{},\"{}\",\"{}\",{}",
            i.user_id,
            i.timestamp,
            i.ad_id,
            i.source,
            i.title,
            i.body,
            i.image_refs.join(";")
        )
        .unwrap();
    }
    drop(f);
    let profiles = ingest::load_profiles(&dir.path().join("profiles.csv")).unwrap();
    let run = |path: &std::path::Path, fmt| {
        let imps = ingest::parse_impressions(path, fmt).unwrap();
        let (c, dropped) = CohortDataset::new(imps, profiles.clone());
        assert_eq!(dropped, 0);
        let out = sessionize::sessionize_cohort(&c, &SessionizerConfig::default()).unwrap();
        (out.theta, out.filtered.by_user)
    };
    let a = run(&dir.path().join("impressions.jsonl"), InputFormat::Jsonl);
    let b = run(&csv_path, InputFormat::Csv);
    assert_eq!(a, b);
}
