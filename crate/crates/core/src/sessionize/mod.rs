//! Session segmentation from inter-impression gaps.
//!
//! Each user's log-gap distribution is smoothed with a Gaussian KDE; the
//! per-user cut is the exponentiated midpoint between the first density peak
//! and the first trough after it. The cohort-wide threshold is the mean of
//! the per-user cuts, and sessions split wherever a gap strictly exceeds it.

pub mod kde;

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AdImpression, CohortDataset};
use crate::scalar::Scalar;

pub use kde::Bandwidth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionizerConfig {
    pub kde_bandwidth_rule: Bandwidth,
    pub grid_points: usize,
    /// Seconds; used only when no user yields a KDE threshold.
    pub fallback_theta: f64,
    pub min_gaps_for_kde: usize,
    /// Overrides the KDE-derived global threshold when set.
    pub theta_override: Option<f64>,
    pub min_session_len: usize,
    pub max_session_len: usize,
    pub min_sessions_per_user: usize,
}

impl Default for SessionizerConfig {
    fn default() -> Self {
        SessionizerConfig {
            kde_bandwidth_rule: Bandwidth::Silverman,
            grid_points: 512,
            fallback_theta: 389.0,
            min_gaps_for_kde: 10,
            theta_override: None,
            min_session_len: 3,
            max_session_len: 50,
            min_sessions_per_user: 3,
        }
    }
}

impl SessionizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 64 {
            return Err(Error::Config("sessionize.grid_points must be >= 64".into()));
        }
        if !(self.fallback_theta > 0.0) {
            return Err(Error::Config("sessionize.fallback_theta must be > 0".into()));
        }
        if let Bandwidth::Fixed(h) = self.kde_bandwidth_rule {
            if !(h > 0.0) {
                return Err(Error::Config("fixed KDE bandwidth must be > 0".into()));
            }
        }
        if self.min_session_len > self.max_session_len {
            return Err(Error::Config("min_session_len exceeds max_session_len".into()));
        }
        Ok(())
    }
}

/// Log-gap distribution of one user and the extrema found in its KDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapDistribution<T> {
    pub user_id: String,
    pub deltas: Vec<T>,
    pub delta_max: Option<T>,
    pub delta_min: Option<T>,
    pub theta_user: Option<T>,
}

/// Natural-log gaps between consecutive timestamps. Zero gaps are clamped to
/// one second (log-gap 0).
pub fn compute_gaps<T: Scalar>(timestamps: &[i64]) -> Result<Vec<T>> {
    timestamps
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let gap = w[1] - w[0];
            if gap < 0 {
                return Err(Error::Unsorted { index: i + 1 });
            }
            Ok(T::from_i64(gap.max(1)).expect("gap fits in float").ln())
        })
        .collect()
}

/// Locates the first KDE peak and the first trough after it.
pub fn kde_extrema<T: Scalar>(deltas: &[T], config: &SessionizerConfig) -> (Option<T>, Option<T>) {
    if deltas.len() < config.min_gaps_for_kde.max(2) {
        return (None, None);
    }
    let mut sorted = deltas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite log-gaps"));
    let h = match config.kde_bandwidth_rule {
        Bandwidth::Silverman => match kde::silverman_bandwidth(&sorted) {
            Some(h) => h,
            None => return (None, None),
        },
        Bandwidth::Fixed(h) => T::lit(h),
    };
    let g = kde::grid_density(&sorted, h, config.grid_points);
    let (imax, imin) = kde::first_max_then_min(&g.density);
    (imax.map(|i| g.grid[i]), imin.map(|i| g.grid[i]))
}

/// Per-user threshold in seconds, or `None` for unimodal or too-short gap
/// samples.
pub fn kde_threshold<T: Scalar>(deltas: &[T], config: &SessionizerConfig) -> Option<T> {
    match kde_extrema(deltas, config) {
        (Some(dmax), Some(dmin)) => Some(((dmax + dmin) / T::lit(2.0)).exp()),
        _ => None,
    }
}

pub fn gap_distribution<T: Scalar>(
    user_id: &str,
    timestamps: &[i64],
    config: &SessionizerConfig,
) -> Result<GapDistribution<T>> {
    let deltas = compute_gaps::<T>(timestamps)?;
    let (delta_max, delta_min) = kde_extrema(&deltas, config);
    let theta_user = match (delta_max, delta_min) {
        (Some(a), Some(b)) => Some(((a + b) / T::lit(2.0)).exp()),
        _ => None,
    };
    Ok(GapDistribution {
        user_id: user_id.to_string(),
        deltas,
        delta_max,
        delta_min,
        theta_user,
    })
}

/// Arithmetic mean of the present per-user thresholds, summed in the given
/// order.
pub fn global_threshold<T: Scalar>(per_user: &[Option<T>]) -> Result<T> {
    let present: Vec<T> = per_user.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::NoThreshold);
    }
    Ok(present.iter().copied().sum::<T>() / T::from_usize_lossy(present.len()))
}

/// Splits sorted timestamps wherever the gap strictly exceeds `theta`.
pub fn segment<T: Scalar>(timestamps: &[i64], theta: T) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    if timestamps.is_empty() {
        return out;
    }
    let mut start = 0;
    for i in 1..timestamps.len() {
        let gap = T::from_i64(timestamps[i] - timestamps[i - 1]).expect("gap fits in float");
        if gap > theta {
            out.push(start..i);
            start = i;
        }
    }
    out.push(start..timestamps.len());
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub user_id: String,
    pub start: i64,
    pub end: i64,
    pub impressions: Vec<AdImpression>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }
}

/// Cuts a user's impressions into sessions at `theta`. Session ids are
/// `<user>#<index>` over the unfiltered sequence, so they stay stable when
/// filters change.
pub fn build_sessions(user_id: &str, impressions: &[AdImpression], theta: f64) -> Vec<Session> {
    let ts: Vec<i64> = impressions.iter().map(|i| i.timestamp).collect();
    segment(&ts, theta)
        .into_iter()
        .enumerate()
        .map(|(k, r)| Session {
            session_id: format!("{user_id}#{k:05}"),
            user_id: user_id.to_string(),
            start: ts[r.start],
            end: ts[r.end - 1],
            impressions: impressions[r].to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub sessions_in: usize,
    pub sessions_too_short: usize,
    pub sessions_too_long: usize,
    pub users_in: usize,
    pub users_dropped: usize,
    pub sessions_out: usize,
    pub impressions_out: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FilteredSessions {
    pub by_user: BTreeMap<String, Vec<Session>>,
    pub counts: FilterCounts,
}

impl FilteredSessions {
    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.by_user.values().flatten()
    }

    /// Impressions of the surviving sessions joined back to their profiles.
    pub fn to_cohort(&self, cohort: &CohortDataset) -> CohortDataset {
        let impressions = self
            .sessions()
            .flat_map(|s| s.impressions.iter().cloned())
            .collect();
        let profiles = cohort
            .profiles
            .iter()
            .filter(|(u, _)| self.by_user.contains_key(*u))
            .map(|(u, p)| (u.clone(), p.clone()))
            .collect();
        CohortDataset::new(impressions, profiles).0
    }
}

/// Drops sessions outside the length bounds, then users left with too few
/// sessions.
pub fn apply_filters(
    by_user: BTreeMap<String, Vec<Session>>,
    config: &SessionizerConfig,
) -> FilteredSessions {
    let mut counts = FilterCounts {
        users_in: by_user.len(),
        ..Default::default()
    };
    let mut kept = BTreeMap::new();
    for (user, sessions) in by_user {
        counts.sessions_in += sessions.len();
        let survivors: Vec<Session> = sessions
            .into_iter()
            .filter(|s| {
                if s.len() < config.min_session_len {
                    counts.sessions_too_short += 1;
                    false
                } else if s.len() > config.max_session_len {
                    counts.sessions_too_long += 1;
                    false
                } else {
                    true
                }
            })
            .collect();
        if survivors.len() < config.min_sessions_per_user {
            counts.users_dropped += 1;
            continue;
        }
        counts.sessions_out += survivors.len();
        counts.impressions_out += survivors.iter().map(Session::len).sum::<usize>();
        kept.insert(user, survivors);
    }
    FilteredSessions {
        by_user: kept,
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionizeReportRow {
    pub user_id: String,
    pub n_impressions: usize,
    pub n_gaps: usize,
    pub theta_user: Option<f64>,
    pub n_sessions_pre_filter: usize,
    pub n_sessions_post_filter: usize,
}

#[derive(Debug, Clone)]
pub struct SessionizeOutcome {
    pub theta: f64,
    pub theta_source: ThetaSource,
    pub users_with_threshold: usize,
    pub filtered: FilteredSessions,
    pub report: Vec<SessionizeReportRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaSource {
    Kde,
    Fallback,
    Override,
}

/// Runs the whole stage over a cohort. Per-user KDEs run on the current rayon
/// pool; results are reduced in user-id order so the output does not depend
/// on the degree of parallelism.
pub fn sessionize_cohort(
    cohort: &CohortDataset,
    config: &SessionizerConfig,
) -> Result<SessionizeOutcome> {
    config.validate()?;
    let users = cohort.by_user();
    let dists: Vec<GapDistribution<f64>> = users
        .par_iter()
        .map(|(user, imps)| {
            let ts: Vec<i64> = imps.iter().map(|i| i.timestamp).collect();
            gap_distribution(user, &ts, config)
        })
        .collect::<Result<_>>()?;
    let per_user: Vec<Option<f64>> = dists.iter().map(|d| d.theta_user).collect();
    let (theta, theta_source) = match config.theta_override {
        Some(t) => (t, ThetaSource::Override),
        None => match global_threshold(&per_user) {
            Ok(t) => (t, ThetaSource::Kde),
            Err(Error::NoThreshold) => {
                log::warn!(
                    "no user produced a KDE threshold; using fallback theta {}",
                    config.fallback_theta
                );
                (config.fallback_theta, ThetaSource::Fallback)
            }
            Err(e) => return Err(e),
        },
    };
    let segmented: BTreeMap<String, Vec<Session>> = users
        .par_iter()
        .map(|(user, imps)| (user.to_string(), build_sessions(user, imps, theta)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let pre: BTreeMap<String, usize> = segmented.iter().map(|(u, s)| (u.clone(), s.len())).collect();
    let filtered = apply_filters(segmented, config);
    let report = users
        .iter()
        .zip(&dists)
        .map(|((user, imps), d)| SessionizeReportRow {
            user_id: user.to_string(),
            n_impressions: imps.len(),
            n_gaps: d.deltas.len(),
            theta_user: d.theta_user,
            n_sessions_pre_filter: pre[*user],
            n_sessions_post_filter: filtered.by_user.get(*user).map_or(0, Vec::len),
        })
        .collect();
    Ok(SessionizeOutcome {
        theta,
        theta_source,
        users_with_threshold: per_user.iter().flatten().count(),
        filtered,
        report,
    })
}

pub fn write_report<W: std::io::Write>(writer: W, rows: &[SessionizeReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "user_id",
        "n_impressions",
        "n_gaps",
        "theta_user",
        "n_sessions_pre_filter",
        "n_sessions_post_filter",
    ])?;
    for r in rows {
        w.write_record([
            r.user_id.clone(),
            r.n_impressions.to_string(),
            r.n_gaps.to_string(),
            r.theta_user.map(|t| format!("{t:.6}")).unwrap_or_default(),
            r.n_sessions_pre_filter.to_string(),
            r.n_sessions_post_filter.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<sessionize report>", e))?;
    Ok(())
}
