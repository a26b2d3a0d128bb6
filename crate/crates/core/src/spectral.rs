//! Feature spectrograms: STFT power, Mel, log Mel, MFCC and chroma.
//!
//! All features derive from a Hann-windowed power STFT with no centering
//! (frames lie fully inside the signal). The pipeline runs at a very small
//! hop (32 samples by default) so bars can later be resampled at high
//! temporal resolution; the Mel/chroma reductions are therefore computed
//! frame-by-frame without ever materializing the full STFT matrix.

use crate::audio_io::AudioBuffer;
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_MEL_FILTERS: usize = 80;
pub const MEL_F_MIN: f64 = 80.0;
pub const MEL_F_MAX: f64 = 16000.0;
pub const NUM_MFCC: usize = 32;
pub const NUM_CHROMA: usize = 12;
/// Chroma ignores content below A0.
const CHROMA_MIN_HZ: f64 = 27.5;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("audio has {samples} samples, shorter than one {n_fft}-sample frame")]
    AudioTooShort { samples: usize, n_fft: usize },
    #[error("expected a {expected:?} spectrogram, got {got:?}")]
    KindMismatch {
        expected: FeatureKind,
        got: FeatureKind,
    },
    #[error("log floor must be positive, got {0}")]
    BadFloor(f64),
    #[error("mel f_max {f_max} Hz above Nyquist {nyquist} Hz")]
    FmaxAboveNyquist { f_max: f64, nyquist: f64 },
    #[error("mel filter {index} has no nonzero weight at this resolution")]
    EmptyFilter { index: usize },
    #[error("need at least {need} bands for MFCC, got {got}")]
    TooFewBands { need: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Chroma,
    Mel,
    LogMel,
    Mfcc,
    StftPower,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Chroma => 0,
            FeatureKind::Mel => 1,
            FeatureKind::LogMel => 2,
            FeatureKind::Mfcc => 3,
            FeatureKind::StftPower => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Chroma),
            1 => Some(FeatureKind::Mel),
            2 => Some(FeatureKind::LogMel),
            3 => Some(FeatureKind::Mfcc),
            4 => Some(FeatureKind::StftPower),
            _ => None,
        }
    }
}

/// `F x T` feature matrix plus the framing parameters needed to map frame
/// indices back to time.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// Feature bins by frames, `values[[f, t]]`.
    pub values: Array2<f64>,
    pub feature_kind: FeatureKind,
    pub hop_samples: usize,
    pub sample_rate: u32,
    /// Analysis frame length of the underlying STFT.
    pub n_fft: usize,
}

impl Spectrogram {
    pub fn num_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.values.ncols()
    }

    /// Time of frame `t`'s center: the frame covers
    /// `[t*hop, t*hop + n_fft)` samples.
    pub fn frame_center_seconds(&self, t: usize) -> f64 {
        (t * self.hop_samples) as f64 + 0.5 * self.n_fft as f64
    }

    /// Same, in seconds.
    pub fn frame_center_time(&self, t: usize) -> f64 {
        self.frame_center_seconds(t) / self.sample_rate as f64
    }

    /// End of the last analysis frame, in seconds.
    pub fn covered_end_time(&self) -> f64 {
        (((self.num_frames().saturating_sub(1)) * self.hop_samples + self.n_fft) as f64)
            / self.sample_rate as f64
    }
}

fn hann_window(n: usize) -> Vec<f64> {
    // Periodic Hann, the standard analysis-window convention.
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn num_frames(samples: usize, n_fft: usize, hop: usize) -> Option<usize> {
    if samples < n_fft {
        None
    } else {
        Some(1 + (samples - n_fft) / hop)
    }
}

/// Run `transform(power_bins, out_row)` over every Hann-windowed frame and
/// collect the rows into a `T x out_dim` matrix. Frames are independent so
/// the loop parallelizes; each chunk keeps its own FFT scratch.
fn apply_framewise<F>(
    audio: &AudioBuffer,
    n_fft: usize,
    hop: usize,
    out_dim: usize,
    transform: F,
) -> Result<Array2<f64>, SpectralError>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let t_frames = num_frames(audio.samples.len(), n_fft, hop).ok_or(
        SpectralError::AudioTooShort {
            samples: audio.samples.len(),
            n_fft,
        },
    )?;
    let window = hann_window(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut rows = Array2::zeros((t_frames, out_dim));
    let chunk = 512;
    rows.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .enumerate()
        .for_each(|(chunk_idx, mut block)| {
            let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
            let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            let mut power = vec![0.0f64; n_bins];
            for (row_idx, mut row) in block.axis_iter_mut(Axis(0)).enumerate() {
                let t = chunk_idx * chunk + row_idx;
                let start = t * hop;
                for (i, c) in buf.iter_mut().enumerate() {
                    *c = Complex::new(audio.samples[start + i] * window[i], 0.0);
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                for (k, p) in power.iter_mut().enumerate() {
                    *p = buf[k].re * buf[k].re + buf[k].im * buf[k].im;
                }
                transform(&power, row.as_slice_mut().expect("row is contiguous"));
            }
        });
    Ok(rows)
}

/// Hann-windowed power STFT, `(n_fft/2 + 1) x T` with
/// `T = 1 + floor((num_samples - n_fft) / hop)`.
pub fn stft_power(
    audio: &AudioBuffer,
    n_fft: usize,
    hop: usize,
) -> Result<Spectrogram, SpectralError> {
    let n_bins = n_fft / 2 + 1;
    let rows = apply_framewise(audio, n_fft, hop, n_bins, |power, out| {
        out.copy_from_slice(power);
    })?;
    Ok(Spectrogram {
        values: rows.reversed_axes(),
        feature_kind: FeatureKind::StftPower,
        hop_samples: hop,
        sample_rate: audio.sample_rate,
        n_fft,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

/// Triangular Mel filterbank: 80 filters with unit peaks, centers equally
/// spaced on the Mel scale between 80 Hz and 16 kHz.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `80 x (n_fft/2 + 1)` non-negative weights.
    pub weights: Array2<f64>,
    pub f_min: f64,
    pub f_max: f64,
    /// Nonzero column range per filter, for sparse application.
    ranges: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn num_filters(&self) -> usize {
        self.weights.nrows()
    }

    /// Hz center of filter `m` (the peak of its triangle).
    pub fn center_frequency(&self, m: usize) -> f64 {
        let lo = hz_to_mel(self.f_min);
        let hi = hz_to_mel(self.f_max);
        let step = (hi - lo) / (self.num_filters() + 1) as f64;
        mel_to_hz(lo + (m + 1) as f64 * step)
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let (lo, hi) = self.ranges[m];
            let row = self.weights.row(m);
            let mut acc = 0.0;
            for k in lo..hi {
                acc += row[k] * power[k];
            }
            *o = acc;
        }
    }
}

pub fn build_mel_filterbank(sample_rate: u32, n_fft: usize) -> Result<MelFilterbank, SpectralError> {
    let nyquist = sample_rate as f64 / 2.0;
    if MEL_F_MAX > nyquist {
        return Err(SpectralError::FmaxAboveNyquist {
            f_max: MEL_F_MAX,
            nyquist,
        });
    }
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(MEL_F_MIN);
    let mel_hi = hz_to_mel(MEL_F_MAX);
    let step = (mel_hi - mel_lo) / (NUM_MEL_FILTERS + 1) as f64;
    let edges: Vec<f64> = (0..NUM_MEL_FILTERS + 2)
        .map(|i| mel_to_hz(mel_lo + i as f64 * step))
        .collect();

    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut weights = Array2::zeros((NUM_MEL_FILTERS, n_bins));
    let mut ranges = Vec::with_capacity(NUM_MEL_FILTERS);
    for m in 0..NUM_MEL_FILTERS {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut lo = n_bins;
        let mut hi = 0;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = ((f - left) / (center - left)).min((right - f) / (right - center));
            if w > 0.0 {
                weights[[m, k]] = w;
                lo = lo.min(k);
                hi = hi.max(k + 1);
            }
        }
        if lo >= hi {
            return Err(SpectralError::EmptyFilter { index: m });
        }
        ranges.push((lo, hi));
    }
    Ok(MelFilterbank {
        weights,
        f_min: MEL_F_MIN,
        f_max: MEL_F_MAX,
        ranges,
    })
}

/// Mel power spectrogram (`80 x T`): the filterbank applied to the power
/// STFT, computed frame by frame.
pub fn mel_spectrogram(
    audio: &AudioBuffer,
    n_fft: usize,
    hop: usize,
) -> Result<Spectrogram, SpectralError> {
    let bank = build_mel_filterbank(audio.sample_rate, n_fft)?;
    let rows = apply_framewise(audio, n_fft, hop, NUM_MEL_FILTERS, |power, out| {
        bank.apply(power, out);
    })?;
    Ok(Spectrogram {
        values: rows.reversed_axes(),
        feature_kind: FeatureKind::Mel,
        hop_samples: hop,
        sample_rate: audio.sample_rate,
        n_fft,
    })
}

/// Log Mel spectrogram: `log10(max(mel, floor)) - log10(floor)`, which is
/// non-negative by construction.
pub fn log_mel(mel: &Spectrogram, floor: f64) -> Result<Spectrogram, SpectralError> {
    if mel.feature_kind != FeatureKind::Mel {
        return Err(SpectralError::KindMismatch {
            expected: FeatureKind::Mel,
            got: mel.feature_kind,
        });
    }
    if !(floor > 0.0) {
        return Err(SpectralError::BadFloor(floor));
    }
    let offset = floor.log10();
    let values = mel.values.mapv(|v| v.max(floor).log10() - offset);
    Ok(Spectrogram {
        values,
        feature_kind: FeatureKind::LogMel,
        hop_samples: mel.hop_samples,
        sample_rate: mel.sample_rate,
        n_fft: mel.n_fft,
    })
}

/// Dynamic-range floor relative to the song's Mel peak.
pub const LOG_MEL_FLOOR_RATIO: f64 = 1e-10;

/// `log_mel` with the floor tied to the song's own peak power
/// (`1e-10 * max`). Silent input maps to all zeros.
pub fn log_mel_auto(mel: &Spectrogram) -> Result<Spectrogram, SpectralError> {
    if mel.feature_kind != FeatureKind::Mel {
        return Err(SpectralError::KindMismatch {
            expected: FeatureKind::Mel,
            got: mel.feature_kind,
        });
    }
    let max = mel.values.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Ok(Spectrogram {
            values: Array2::zeros(mel.values.raw_dim()),
            feature_kind: FeatureKind::LogMel,
            hop_samples: mel.hop_samples,
            sample_rate: mel.sample_rate,
            n_fft: mel.n_fft,
        });
    }
    log_mel(mel, LOG_MEL_FLOOR_RATIO * max)
}

/// Orthonormal DCT-II matrix, `rows x n`: `D D^T = I_rows`.
pub fn dct_ii_orthonormal(rows: usize, n: usize) -> Array2<f64> {
    let mut d = Array2::zeros((rows, n));
    for k in 0..rows {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            d[[k, i]] = scale
                * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n as f64))
                    .cos();
        }
    }
    d
}

/// MFCC (`32 x T`): first 32 rows of the orthonormal DCT-II applied to each
/// log Mel column.
pub fn mfcc(log_mel: &Spectrogram) -> Result<Spectrogram, SpectralError> {
    if log_mel.feature_kind != FeatureKind::LogMel {
        return Err(SpectralError::KindMismatch {
            expected: FeatureKind::LogMel,
            got: log_mel.feature_kind,
        });
    }
    let n = log_mel.num_bins();
    if n < NUM_MFCC {
        return Err(SpectralError::TooFewBands {
            need: NUM_MFCC,
            got: n,
        });
    }
    let d = dct_ii_orthonormal(NUM_MFCC, n);
    let values = d.dot(&log_mel.values);
    Ok(Spectrogram {
        values,
        feature_kind: FeatureKind::Mfcc,
        hop_samples: log_mel.hop_samples,
        sample_rate: log_mel.sample_rate,
        n_fft: log_mel.n_fft,
    })
}

/// Pitch class (0 = C ... 11 = B) of each STFT bin, A440 equal temperament;
/// bins below 27.5 Hz get `None`.
fn bin_pitch_classes(sample_rate: u32, n_fft: usize) -> Vec<Option<usize>> {
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_fft / 2 + 1)
        .map(|k| {
            let f = k as f64 * bin_hz;
            if f < CHROMA_MIN_HZ {
                return None;
            }
            let midi = (69.0 + 12.0 * (f / 440.0).log2()).round() as i64;
            Some(midi.rem_euclid(12) as usize)
        })
        .collect()
}

/// Chromagram (`12 x T`): STFT power summed per nearest equal-tempered
/// pitch class.
pub fn chromagram(stft: &Spectrogram) -> Result<Spectrogram, SpectralError> {
    if stft.feature_kind != FeatureKind::StftPower {
        return Err(SpectralError::KindMismatch {
            expected: FeatureKind::StftPower,
            got: stft.feature_kind,
        });
    }
    let classes = bin_pitch_classes(stft.sample_rate, stft.n_fft);
    let t_frames = stft.num_frames();
    let mut values = Array2::zeros((NUM_CHROMA, t_frames));
    for t in 0..t_frames {
        for (k, class) in classes.iter().enumerate() {
            if let Some(c) = class {
                values[[*c, t]] += stft.values[[k, t]];
            }
        }
    }
    Ok(Spectrogram {
        values,
        feature_kind: FeatureKind::Chroma,
        hop_samples: stft.hop_samples,
        sample_rate: stft.sample_rate,
        n_fft: stft.n_fft,
    })
}

/// `chromagram` composed with `stft_power`, but frame by frame, so long
/// songs at small hops never hold the full STFT in memory. Produces exactly
/// the same values as the composed form.
pub fn chromagram_from_audio(
    audio: &AudioBuffer,
    n_fft: usize,
    hop: usize,
) -> Result<Spectrogram, SpectralError> {
    let classes = bin_pitch_classes(audio.sample_rate, n_fft);
    let rows = apply_framewise(audio, n_fft, hop, NUM_CHROMA, |power, out| {
        out.fill(0.0);
        for (k, class) in classes.iter().enumerate() {
            if let Some(c) = class {
                out[*c] += power[k];
            }
        }
    })?;
    Ok(Spectrogram {
        values: rows.reversed_axes(),
        feature_kind: FeatureKind::Chroma,
        hop_samples: hop,
        sample_rate: audio.sample_rate,
        n_fft,
    })
}
