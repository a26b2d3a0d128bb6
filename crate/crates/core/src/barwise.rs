//! Fixed-size barwise tensors.
//!
//! Each bar is represented by 96 equally spaced time positions; at every
//! position the spectrogram column whose frame center lies nearest is
//! selected (no interpolation). The result is a `B x 96 x F` tensor whose
//! frame axis measures *metrical* position rather than wall-clock time, so
//! bars of different tempo become directly comparable. The whole tensor is
//! min-max normalized to [0, 1] per song.

use crate::audio_io::BarGrid;
use crate::spectral::{FeatureKind, Spectrogram};
use ndarray::Array3;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Time positions sampled per bar.
pub const FRAMES_PER_BAR: usize = 96;

#[derive(Debug, Error)]
pub enum BarwiseError {
    #[error("bar {bar} lasts {duration:.5} s, shorter than one hop ({hop_duration:.5} s)")]
    BarTooShort {
        bar: usize,
        duration: f64,
        hop_duration: f64,
    },
    #[error("bar grid ends at {song_end:.3} s but the spectrogram covers only {covered:.3} s")]
    GridBeyondSpectrogram { song_end: f64, covered: f64 },
    #[error("time {time} outside the grid range [0, {song_end}]")]
    TimeOutOfRange { time: f64, song_end: f64 },
    #[error("time {time} precedes the first bar start {first}")]
    TimeBeforeFirstBar { time: f64, first: f64 },
    #[error("tensor file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor file malformed: {0}")]
    BadFile(String),
}

/// Per-song stack of `B` bar matrices, each `96 x F`, entries in [0, 1].
///
/// `F` is padded with zero columns up to a multiple of 4 (the autoencoder
/// pools twice by 2); the pre-padding width is kept in `orig_feature_dim`.
/// The min/max used for normalization are recorded so the scaling is
/// invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct BarTensor {
    bars: Array3<f64>,
    feature_kind: FeatureKind,
    norm_min: f64,
    norm_max: f64,
    orig_feature_dim: usize,
}

impl BarTensor {
    pub fn bars(&self) -> &Array3<f64> {
        &self.bars
    }

    pub fn num_bars(&self) -> usize {
        self.bars.shape()[0]
    }

    pub fn frames_per_bar(&self) -> usize {
        self.bars.shape()[1]
    }

    /// Padded feature dimension (multiple of 4).
    pub fn feature_dim(&self) -> usize {
        self.bars.shape()[2]
    }

    pub fn orig_feature_dim(&self) -> usize {
        self.orig_feature_dim
    }

    pub fn feature_kind(&self) -> FeatureKind {
        self.feature_kind
    }

    /// (min, max) of the raw values before scaling to [0, 1].
    pub fn normalization(&self) -> (f64, f64) {
        (self.norm_min, self.norm_max)
    }

    /// Bar `b` as a flat `96 * F` slice (row-major frame, bin).
    pub fn bar_flat(&self, b: usize) -> Vec<f64> {
        self.bars
            .index_axis(ndarray::Axis(0), b)
            .iter()
            .cloned()
            .collect()
    }
}

/// Frame index whose center lies nearest to `time`, ties toward the smaller
/// index, clamped to the valid range.
fn nearest_frame(spec: &Spectrogram, time: f64) -> usize {
    let sr = spec.sample_rate as f64;
    let hop = spec.hop_samples as f64;
    let half = spec.n_fft as f64 / 2.0;
    let t_float = (time * sr - half) / hop;
    let last = spec.num_frames() - 1;
    if t_float <= 0.0 {
        return 0;
    }
    let lo = (t_float.floor() as usize).min(last);
    let hi = (lo + 1).min(last);
    let center = |t: usize| (t as f64 * hop + half) / sr;
    let (dl, dh) = ((time - center(lo)).abs(), (time - center(hi)).abs());
    if dl <= dh {
        lo
    } else {
        hi
    }
}

/// Build the barwise tensor from a feature spectrogram and a bar grid.
pub fn barwise_tensor(spec: &Spectrogram, grid: &BarGrid) -> Result<BarTensor, BarwiseError> {
    let sr = spec.sample_rate as f64;
    let hop_duration = spec.hop_samples as f64 / sr;
    let covered = spec.covered_end_time();
    if grid.song_end() > covered + hop_duration {
        return Err(BarwiseError::GridBeyondSpectrogram {
            song_end: grid.song_end(),
            covered,
        });
    }
    let num_bars = grid.num_bars();
    for b in 0..num_bars {
        let (start, end) = grid.bar_span(b);
        if end - start < hop_duration {
            return Err(BarwiseError::BarTooShort {
                bar: b,
                duration: end - start,
                hop_duration,
            });
        }
    }

    let f_orig = spec.num_bins();
    let f_padded = f_orig.div_ceil(4) * 4;
    let mut bars = Array3::zeros((num_bars, FRAMES_PER_BAR, f_padded));
    for b in 0..num_bars {
        let (start, end) = grid.bar_span(b);
        let step = (end - start) / FRAMES_PER_BAR as f64;
        for k in 0..FRAMES_PER_BAR {
            let t = nearest_frame(spec, start + k as f64 * step);
            for f in 0..f_orig {
                bars[[b, k, f]] = spec.values[[f, t]];
            }
        }
    }

    // Per-song min-max normalization over the real (unpadded) columns;
    // a constant tensor maps to all zeros.
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for b in 0..num_bars {
        for k in 0..FRAMES_PER_BAR {
            for f in 0..f_orig {
                let v = bars[[b, k, f]];
                min = min.min(v);
                max = max.max(v);
            }
        }
    }
    if max > min {
        let scale = 1.0 / (max - min);
        for b in 0..num_bars {
            for k in 0..FRAMES_PER_BAR {
                for f in 0..f_orig {
                    bars[[b, k, f]] = (bars[[b, k, f]] - min) * scale;
                }
            }
        }
    } else {
        bars.fill(0.0);
    }

    Ok(BarTensor {
        bars,
        feature_kind: spec.feature_kind,
        norm_min: min,
        norm_max: max,
        orig_feature_dim: f_orig,
    })
}

/// Largest bar index `b` with `bar_starts[b] <= time`.
pub fn bar_index_of(time: f64, grid: &BarGrid) -> Result<usize, BarwiseError> {
    if time < 0.0 || time > grid.song_end() {
        return Err(BarwiseError::TimeOutOfRange {
            time,
            song_end: grid.song_end(),
        });
    }
    let starts = grid.bar_starts();
    if time < starts[0] {
        return Err(BarwiseError::TimeBeforeFirstBar {
            time,
            first: starts[0],
        });
    }
    Ok(starts.partition_point(|&s| s <= time) - 1)
}

/// Binary tensor dump, little-endian: `u32 B`, `u32 F`, `u8 feature_kind`,
/// then `B * 96 * F` float32 values in row-major (bar, frame, bin) order.
pub fn write_tensor(path: &Path, tensor: &BarTensor) -> Result<(), BarwiseError> {
    let mut out = Vec::with_capacity(9 + tensor.bars.len() * 4);
    out.extend_from_slice(&(tensor.num_bars() as u32).to_le_bytes());
    out.extend_from_slice(&(tensor.feature_dim() as u32).to_le_bytes());
    out.push(tensor.feature_kind.code());
    for &v in tensor.bars.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<BarTensor, BarwiseError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 9 {
        return Err(BarwiseError::BadFile("header truncated".into()));
    }
    let b = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let kind = FeatureKind::from_code(bytes[8])
        .ok_or_else(|| BarwiseError::BadFile(format!("unknown feature kind {}", bytes[8])))?;
    let expected = 9 + b * FRAMES_PER_BAR * f * 4;
    if bytes.len() != expected {
        return Err(BarwiseError::BadFile(format!(
            "expected {expected} bytes for {b} bars x {f} bins, found {}",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(b * FRAMES_PER_BAR * f);
    for chunk in bytes[9..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let bars = Array3::from_shape_vec((b, FRAMES_PER_BAR, f), values)
        .map_err(|e| BarwiseError::BadFile(e.to_string()))?;
    Ok(BarTensor {
        bars,
        feature_kind: kind,
        norm_min: 0.0,
        norm_max: 1.0,
        orig_feature_dim: f,
    })
}
