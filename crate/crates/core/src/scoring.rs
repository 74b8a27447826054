//! Adherence tallies and scores.
//!
//! A Followed judgment counts toward `followed`; NotFollowed and
//! MissingTreatment both count toward `not_followed`. The score is
//! `followed / (followed + not_followed)`, or null when nothing was judged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::pipeline::{AdherenceStatus, Judgment, NoteReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteScore {
    pub followed: u32,
    pub not_followed: u32,
    pub score: Option<f64>,
}

impl NoteScore {
    pub fn from_judgments(judgments: &[Judgment]) -> Self {
        let (followed, not_followed) = tally(judgments);
        Self {
            followed,
            not_followed,
            score: compute_score(followed as f64, not_followed as f64),
        }
    }
}

/// `(followed, not_followed)` counts.
pub fn tally(judgments: &[Judgment]) -> (u32, u32) {
    judgments.iter().fold((0, 0), |(f, n), j| match j.status {
        AdherenceStatus::Followed => (f + 1, n),
        AdherenceStatus::NotFollowed | AdherenceStatus::MissingTreatment => (f, n + 1),
    })
}

/// `followed / (followed + not_followed)`; `None` when both are zero.
///
/// Takes reals so that averaged counts can be scored directly.
pub fn compute_score(followed: f64, not_followed: f64) -> Option<f64> {
    debug_assert!(followed >= 0.0 && not_followed >= 0.0);
    let total = followed + not_followed;
    (total > 0.0).then(|| followed / total)
}

/// One line of the per-specialty summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialtyRow {
    pub specialty: String,
    pub mean_followed: f64,
    pub mean_not_followed: f64,
    pub score: Option<f64>,
    pub note_count: usize,
}

/// Groups completed reports by specialty, sorted by specialty name.
///
/// The row score is the ratio of summed counts, which equals the ratio of
/// the mean columns. Reports without a score are skipped.
pub fn aggregate_specialty(reports: &[NoteReport]) -> Vec<SpecialtyRow> {
    aggregate_scores(
        reports
            .iter()
            .filter_map(|r| r.score.map(|s| (r.specialty.as_str(), s))),
    )
}

/// Same as [`aggregate_specialty`] over bare `(specialty, score)` pairs.
pub fn aggregate_scores<'a>(scores: impl IntoIterator<Item = (&'a str, NoteScore)>) -> Vec<SpecialtyRow> {
    let mut groups: BTreeMap<&str, (u64, u64, usize)> = BTreeMap::new();
    for (specialty, s) in scores {
        let g = groups.entry(specialty).or_default();
        g.0 += s.followed as u64;
        g.1 += s.not_followed as u64;
        g.2 += 1;
    }
    groups
        .into_iter()
        .map(|(specialty, (f, n, count))| SpecialtyRow {
            specialty: specialty.to_string(),
            mean_followed: f as f64 / count as f64,
            mean_not_followed: n as f64 / count as f64,
            score: compute_score(f as f64, n as f64),
            note_count: count,
        })
        .collect()
}
