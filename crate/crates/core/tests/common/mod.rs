//! Shared helpers for the integration suites: synthesize a structured song
//! (alternating 8-bar textures of spectrally disjoint chords) plus its bar
//! grid and reference annotation, on disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const BAR_SECONDS: f64 = 2.0;
/// Chord A sits low, chord B an octave-plus away: disjoint mel bands.
pub const CHORD_A: [f64; 3] = [220.0, 277.18, 329.63];
pub const CHORD_B: [f64; 3] = [554.37, 659.25, 880.0];

pub struct SynthSong {
    pub wav: PathBuf,
    pub bars: PathBuf,
    pub reference: PathBuf,
    /// Section-change times including piece start and end.
    pub boundaries_sec: Vec<f64>,
}

/// Samples of the alternating-texture song (mono, [-1, 1]).
pub fn aabb_samples(
    num_bars: usize,
    bars_per_section: usize,
    sample_rate: u32,
    bar_seconds: f64,
) -> Vec<f32> {
    let spb = (bar_seconds * sample_rate as f64) as usize;
    let mut samples = Vec::with_capacity(num_bars * spb);
    for bar in 0..num_bars {
        let section = (bar / bars_per_section) % 2;
        let chord = if section == 0 { CHORD_A } else { CHORD_B };
        let bar_start = bar * spb;
        for i in 0..spb {
            let t = (bar_start + i) as f64 / sample_rate as f64;
            let mut v = 0.0;
            for f in chord {
                v += 0.22 * (2.0 * std::f64::consts::PI * f * t).sin();
            }
            samples.push(v as f32);
        }
    }
    samples
}

/// Write the song under `dir` as `<stem>.wav` plus matching bar-grid and
/// reference files (flat layout; see `write_corpus_song` for the corpus
/// layout).
pub fn write_aabb_song(
    dir: &Path,
    stem: &str,
    num_bars: usize,
    bars_per_section: usize,
    sample_rate: u32,
) -> SynthSong {
    let wav = dir.join(format!("{stem}.wav"));
    let bars = dir.join(format!("{stem}.txt"));
    let reference = dir.join(format!("{stem}.lab"));
    write_song_files(
        &wav,
        &bars,
        &reference,
        num_bars,
        bars_per_section,
        sample_rate,
        BAR_SECONDS,
    )
}

/// Write one corpus entry: `audio/<stem>.wav`, `bars/<stem>.txt`,
/// `refs/<stem>.lab`.
pub fn write_corpus_song(
    corpus: &Path,
    stem: &str,
    num_bars: usize,
    bars_per_section: usize,
    sample_rate: u32,
) -> SynthSong {
    for sub in ["audio", "bars", "refs"] {
        fs::create_dir_all(corpus.join(sub)).unwrap();
    }
    write_song_files(
        &corpus.join("audio").join(format!("{stem}.wav")),
        &corpus.join("bars").join(format!("{stem}.txt")),
        &corpus.join("refs").join(format!("{stem}.lab")),
        num_bars,
        bars_per_section,
        sample_rate,
        BAR_SECONDS,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn write_song_files(
    wav: &Path,
    bars: &Path,
    reference: &Path,
    num_bars: usize,
    bars_per_section: usize,
    sample_rate: u32,
    bar_seconds: f64,
) -> SynthSong {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(wav, spec).unwrap();
    for s in aabb_samples(num_bars, bars_per_section, sample_rate, bar_seconds) {
        writer.write_sample(s).unwrap();
    }
    writer.finalize().unwrap();

    let mut grid = fs::File::create(bars).unwrap();
    for b in 0..num_bars {
        writeln!(grid, "{}", b as f64 * bar_seconds).unwrap();
    }

    let section_secs = bars_per_section as f64 * bar_seconds;
    let num_sections = num_bars.div_ceil(bars_per_section);
    let end = num_bars as f64 * bar_seconds;
    let mut lab = fs::File::create(reference).unwrap();
    let mut boundaries_sec = vec![0.0];
    for s in 0..num_sections {
        let start = s as f64 * section_secs;
        let stop = (start + section_secs).min(end);
        let label = if s % 2 == 0 { "A" } else { "B" };
        writeln!(lab, "{start}\t{stop}\t{label}").unwrap();
        boundaries_sec.push(stop);
    }

    SynthSong {
        wav: wav.to_path_buf(),
        bars: bars.to_path_buf(),
        reference: reference.to_path_buf(),
        boundaries_sec,
    }
}
