//! Boundary estimation by dynamic programming over the autosimilarity matrix.
//!
//! Each candidate segment `[i, j)` is scored by sliding a square kernel along
//! the diagonal of the autosimilarity: the kernel rewards blocks whose bars
//! are mutually similar (homogeneity), unlike a novelty kernel which fires on
//! change points. The kernel is zero on its diagonal (self-similarity carries
//! no information), weights the four nearest neighbours of each bar double,
//! and still credits longer-range similarity inside the block. A segment-size
//! regularity penalty steers segments toward the length that dominates pop
//! music (8 bars). Dynamic programming then finds the partition of the bar
//! axis maximizing the total of all segment scores.

use crate::audio_io::BarGrid;
use crate::similarity::Autosimilarity;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("segment [{start}, {end}) has length {len}, outside [{min}, {max}]")]
    BadSegmentLength {
        start: usize,
        end: usize,
        len: usize,
        min: usize,
        max: usize,
    },
    #[error("segment indices [{start}, {end}) invalid for {num_bars} bars")]
    BadIndices {
        start: usize,
        end: usize,
        num_bars: usize,
    },
    #[error("need at least {min} bars, got {num_bars}")]
    TooFewBars { num_bars: usize, min: usize },
    #[error("no valid segmentation under the configured segment-length bounds")]
    NoValidSegmentation,
    #[error("boundary index {index} out of range for {num_bars} bars")]
    BoundaryOutOfRange { index: usize, num_bars: usize },
}

/// Square block-similarity kernel.
///
/// `K[i][i] = 0`, `K[i][j] = 2` for `1 <= |i-j| <= 4`, `K[i][j] = 1` beyond.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    n: usize,
    values: Vec<f64>,
}

impl Kernel {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn build_kernel(n: usize) -> Kernel {
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = i.abs_diff(j);
            values[i * n + j] = match d {
                0 => 0.0,
                1..=4 => 2.0,
                _ => 1.0,
            };
        }
    }
    Kernel { n, values }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentationConfig {
    /// Longest allowed segment, in bars. Bounds the DP transition fan-in.
    pub max_segment_bars: usize,
    pub min_segment_bars: usize,
    /// Weight of the segment-size regularity penalty.
    pub lambda: f64,
    /// Segment size (bars) at which the regularity penalty vanishes.
    pub target_size: usize,
    /// The kernel sum is divided by `n^size_norm_exponent` (n = segment
    /// length) so segments of different sizes compete on comparable scores.
    pub size_norm_exponent: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            max_segment_bars: 36,
            min_segment_bars: 1,
            lambda: 0.5,
            target_size: 8,
            size_norm_exponent: 1.0,
        }
    }
}

/// Optimal segmentation: boundary bar indices (first 0, last B), the same
/// boundaries in seconds once localized against a grid, per-segment costs and
/// their total.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationResult {
    pub boundaries_bars: Vec<usize>,
    pub boundaries_seconds: Vec<f64>,
    pub segment_costs: Vec<f64>,
    pub total_score: f64,
}

impl SegmentationResult {
    /// Fill `boundaries_seconds` from a bar grid.
    pub fn localize(&mut self, grid: &BarGrid) -> Result<(), SegmentationError> {
        self.boundaries_seconds = boundaries_to_seconds(&self.boundaries_bars, grid)?;
        Ok(())
    }
}

/// Regularity penalty, zero at the target size and symmetric in log2 scale
/// (so 4 and 16 bars are penalized equally around a target of 8).
fn size_penalty(n: usize, config: &SegmentationConfig) -> f64 {
    config.lambda * (n as f64 / config.target_size as f64).log2().abs()
}

fn cost_with_kernel(
    a: &Autosimilarity,
    start: usize,
    kernel: &Kernel,
    config: &SegmentationConfig,
) -> f64 {
    let n = kernel.size();
    let m = a.matrix();
    let mut acc = 0.0;
    for u in 0..n {
        for v in 0..n {
            acc += kernel.value(u, v) * m[[start + u, start + v]];
        }
    }
    acc / (n as f64).powf(config.size_norm_exponent) - size_penalty(n, config)
}

/// Score of the segment spanning bars `[start, end)`.
pub fn segment_cost(
    a: &Autosimilarity,
    start: usize,
    end: usize,
    config: &SegmentationConfig,
) -> Result<f64, SegmentationError> {
    let num_bars = a.num_bars();
    if start >= end || end > num_bars {
        return Err(SegmentationError::BadIndices {
            start,
            end,
            num_bars,
        });
    }
    let len = end - start;
    if len < config.min_segment_bars || len > config.max_segment_bars {
        return Err(SegmentationError::BadSegmentLength {
            start,
            end,
            len,
            min: config.min_segment_bars,
            max: config.max_segment_bars,
        });
    }
    Ok(cost_with_kernel(a, start, &build_kernel(len), config))
}

/// Globally optimal segmentation of the bar axis.
///
/// `best[j] = max over i` of `best[i] + cost(i, j)` with the segment length
/// `j - i` restricted to the configured bounds. Ties prefer the smaller `i`
/// (the longer final segment), recursively toward the front, which makes the
/// output deterministic.
pub fn dp_segment(
    a: &Autosimilarity,
    config: &SegmentationConfig,
) -> Result<SegmentationResult, SegmentationError> {
    let num_bars = a.num_bars();
    if num_bars < config.min_segment_bars.max(2) {
        return Err(SegmentationError::TooFewBars {
            num_bars,
            min: config.min_segment_bars.max(2),
        });
    }
    let max_len = config.max_segment_bars.min(num_bars);
    let kernels: Vec<Kernel> = (0..=max_len).map(build_kernel).collect();

    let mut best = vec![f64::NEG_INFINITY; num_bars + 1];
    let mut choice = vec![usize::MAX; num_bars + 1];
    best[0] = 0.0;
    for j in 1..=num_bars {
        let lo = j.saturating_sub(max_len);
        let hi = match j.checked_sub(config.min_segment_bars) {
            Some(h) => h,
            None => continue,
        };
        for i in lo..=hi {
            if best[i] == f64::NEG_INFINITY {
                continue;
            }
            let cand = best[i] + cost_with_kernel(a, i, &kernels[j - i], config);
            // Strict improvement keeps the smallest i on ties.
            if cand > best[j] {
                best[j] = cand;
                choice[j] = i;
            }
        }
    }
    if best[num_bars] == f64::NEG_INFINITY {
        return Err(SegmentationError::NoValidSegmentation);
    }

    let mut boundaries_bars = vec![num_bars];
    let mut j = num_bars;
    while j > 0 {
        j = choice[j];
        boundaries_bars.push(j);
    }
    boundaries_bars.reverse();

    let mut segment_costs = Vec::with_capacity(boundaries_bars.len() - 1);
    let mut total_score = 0.0;
    for w in boundaries_bars.windows(2) {
        let c = cost_with_kernel(a, w[0], &kernels[w[1] - w[0]], config);
        segment_costs.push(c);
        total_score += c;
    }

    Ok(SegmentationResult {
        boundaries_bars,
        boundaries_seconds: Vec::new(),
        segment_costs,
        total_score,
    })
}

/// Boundary output as JSON: `{"boundaries_sec": [...], "boundaries_bars":
/// [...], "score": s}`.
pub fn boundary_json(result: &SegmentationResult) -> String {
    serde_json::json!({
        "boundaries_sec": result.boundaries_seconds,
        "boundaries_bars": result.boundaries_bars,
        "score": result.total_score,
    })
    .to_string()
}

/// Two-column TSV of adjacent segment intervals in seconds, one `start\tend`
/// line per segment.
pub fn write_intervals_tsv(
    path: &std::path::Path,
    result: &SegmentationResult,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for w in result.boundaries_seconds.windows(2) {
        writeln!(f, "{}\t{}", w[0], w[1])?;
    }
    Ok(())
}

/// Map boundary bar indices to seconds: index `b < B` is the start of bar
/// `b`, index `B` is the song end.
pub fn boundaries_to_seconds(
    boundaries_bars: &[usize],
    grid: &BarGrid,
) -> Result<Vec<f64>, SegmentationError> {
    let num_bars = grid.num_bars();
    boundaries_bars
        .iter()
        .map(|&b| {
            if b < num_bars {
                Ok(grid.bar_starts()[b])
            } else if b == num_bars {
                Ok(grid.song_end())
            } else {
                Err(SegmentationError::BoundaryOutOfRange { index: b, num_bars })
            }
        })
        .collect()
}
