//! Boundary hit-rate evaluation.
//!
//! A boundary estimate counts as a hit when it lies within a fixed tolerance
//! window of a reference boundary, under a one-to-one matching. Scores are
//! reported as precision / recall / F-measure, conventionally at 0.5 s and
//! 3 s windows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("boundary list must be sorted ascending (violated at index {0})")]
    Unsorted(usize),
    #[error("boundary list is empty")]
    Empty,
}

/// Hit-rate scores for one (estimate, reference) pair at one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRateScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// Tolerance window in seconds.
    pub window: f64,
    /// Number of one-to-one matches within the window.
    pub matched: usize,
}

fn check_sorted(list: &[f64]) -> Result<(), MetricsError> {
    for i in 1..list.len() {
        if list[i] < list[i - 1] {
            return Err(MetricsError::Unsorted(i));
        }
    }
    Ok(())
}

/// Maximum-cardinality one-to-one matching between two sorted boundary lists
/// under `|est - ref| <= window`.
///
/// Both lists sorted ascending. The greedy two-pointer scan is optimal here:
/// whenever the earliest unmatched estimate and reference are within the
/// window, matching them never excludes a larger matching (exchange
/// argument on the 1-D interval structure).
pub fn match_boundaries(est: &[f64], reference: &[f64], window: f64) -> Result<usize, MetricsError> {
    check_sorted(est)?;
    check_sorted(reference)?;
    let mut i = 0;
    let mut j = 0;
    let mut matched = 0;
    while i < est.len() && j < reference.len() {
        if (est[i] - reference[j]).abs() <= window {
            matched += 1;
            i += 1;
            j += 1;
        } else if est[i] < reference[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(matched)
}

/// Precision / recall / F-measure of `est` against `reference` at `window`.
///
/// With `trim` set, the first and last boundary of both lists (piece start
/// and end) are removed before matching; some published numbers use that
/// convention. Lists that become empty after trimming score zero.
pub fn hit_rate(
    est: &[f64],
    reference: &[f64],
    window: f64,
    trim: bool,
) -> Result<HitRateScore, MetricsError> {
    if est.is_empty() || reference.is_empty() {
        return Err(MetricsError::Empty);
    }
    let trimmed = |list: &[f64]| -> Vec<f64> {
        if trim {
            if list.len() <= 2 {
                Vec::new()
            } else {
                list[1..list.len() - 1].to_vec()
            }
        } else {
            list.to_vec()
        }
    };
    let e = trimmed(est);
    let r = trimmed(reference);
    if e.is_empty() || r.is_empty() {
        return Ok(HitRateScore {
            precision: 0.0,
            recall: 0.0,
            f_measure: 0.0,
            window,
            matched: 0,
        });
    }
    let matched = match_boundaries(&e, &r, window)?;
    let precision = matched as f64 / e.len() as f64;
    let recall = matched as f64 / r.len() as f64;
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(HitRateScore {
        precision,
        recall,
        f_measure,
        window,
        matched,
    })
}
