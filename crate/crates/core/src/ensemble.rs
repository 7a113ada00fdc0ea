//! Averaging the match probabilities of several models.

use crate::error::{Error, Result};
use crate::evaluation::{ScoreOrientation, ScoreSet, ScoredPair};

/// Per-pair mean of the member scores, uniform unless `weights` is given.
///
/// Members must score the same pairs in the same order with the same labels,
/// and must be probabilities: higher-is-match scores in `[0, 1]`.
pub fn ensemble_average(members: &[ScoreSet], weights: Option<&[f64]>) -> Result<ScoreSet> {
    if members.len() < 2 {
        return Err(Error::InvalidArgument(format!("an ensemble needs at least 2 members, got {}", members.len())));
    }
    let uniform = vec![1.0 / members.len() as f64; members.len()];
    let weights = match weights {
        None => uniform,
        Some(w) => {
            if w.len() != members.len() {
                return Err(Error::InvalidArgument(format!("{} weights for {} members", w.len(), members.len())));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidArgument("weights sum to zero".into()));
            }
            w.iter().map(|x| x / total).collect()
        }
    };
    let first = &members[0];
    let first_labels = first.canonical_labels();
    for (m, s) in members.iter().enumerate() {
        if s.orientation != ScoreOrientation::HigherIsMatch {
            return Err(Error::InvalidArgument(format!(
                "member {m} holds lower-is-match scores (distances); calibrate them to match probabilities in [0, 1] first"
            )));
        }
        if let Some(e) = s.entries.iter().find(|e| !(0.0..=1.0).contains(&e.score)) {
            return Err(Error::InvalidArgument(format!(
                "member {m} scores pair {} as {}, outside [0, 1]; only probability outputs can be averaged",
                e.index, e.score
            )));
        }
        if s.len() != first.len() || s.entries.iter().zip(&first.entries).any(|(a, b)| a.index != b.index) {
            return Err(Error::InvalidArgument(format!("member {m} scores a different pair list than member 0")));
        }
        if s.canonical_labels() != first_labels {
            return Err(Error::InvalidArgument(format!("member {m} disagrees with member 0 on labels")));
        }
    }
    let entries = first
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let score = members.iter().zip(&weights).map(|(s, w)| w * s.entries[i].score).sum::<f64>();
            ScoredPair { index: e.index, score: score.clamp(0.0, 1.0), label: e.label }
        })
        .collect();
    ScoreSet::new(entries, ScoreOrientation::HigherIsMatch, first.label_orientation)
}
