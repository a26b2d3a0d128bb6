//! Audio loading and annotation-file parsing.
//!
//! Three external inputs feed the pipeline: a WAV file, a bar-grid text file
//! (one bar-start time in seconds per line, as exported by a downbeat
//! tracker) and optionally a `.lab`-style reference segmentation
//! (`start<TAB>end<TAB>label` lines). Bars are an *input* here — estimating
//! them is a separate problem handled by dedicated trackers.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a RIFF/WAVE file")]
    NotWav,
    #[error("unsupported codec (format tag {format_tag}, {bits} bit); only PCM16 and float32 are handled")]
    UnsupportedCodec { format_tag: u16, bits: u16 },
    #[error("audio stream contains zero samples")]
    EmptyAudio,
    #[error("sample {index} is not finite")]
    NonFiniteSample { index: usize },
    #[error("malformed WAV: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: cannot parse '{text}' as a number")]
    BadNumber { line: usize, text: String },
    #[error("line {line}: bar start {value} is not after the previous one")]
    NonMonotonic { line: usize, value: f64 },
    #[error("line {line}: time {value} outside [0, {duration}]")]
    OutOfRange {
        line: usize,
        value: f64,
        duration: f64,
    },
    #[error("bar grid needs at least 2 bars, found {0}")]
    TooFewBars(usize),
    #[error("last bar start {last} is not before the song end {end}")]
    BarAfterEnd { last: f64, end: f64 },
    #[error("line {line}: segment is not contiguous with the previous one (gap/overlap {gap:.4} s)")]
    NotContiguous { line: usize, gap: f64 },
    #[error("line {line}: segment end {end} is not after start {start}")]
    EmptySegment { line: usize, start: f64, end: f64 },
    #[error("annotation file contains no segments")]
    NoSegments,
}

/// Mono audio in [-1, 1] at its native sample rate.
#[derive(Debug, Clone)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Bar (downbeat) grid: strictly increasing bar-start times plus the song end.
#[derive(Debug, Clone, PartialEq)]
pub struct BarGrid {
    bar_starts: Vec<f64>,
    song_end: f64,
}

impl BarGrid {
    pub fn new(bar_starts: Vec<f64>, song_end: f64) -> Result<Self, AnnotationError> {
        if bar_starts.len() < 2 {
            return Err(AnnotationError::TooFewBars(bar_starts.len()));
        }
        if bar_starts[0] < 0.0 {
            return Err(AnnotationError::OutOfRange {
                line: 1,
                value: bar_starts[0],
                duration: song_end,
            });
        }
        for i in 1..bar_starts.len() {
            if bar_starts[i] <= bar_starts[i - 1] {
                return Err(AnnotationError::NonMonotonic {
                    line: i + 1,
                    value: bar_starts[i],
                });
            }
        }
        let last = *bar_starts.last().unwrap();
        if song_end <= last {
            return Err(AnnotationError::BarAfterEnd {
                last,
                end: song_end,
            });
        }
        Ok(Self {
            bar_starts,
            song_end,
        })
    }

    pub fn bar_starts(&self) -> &[f64] {
        &self.bar_starts
    }

    pub fn song_end(&self) -> f64 {
        self.song_end
    }

    /// Number of bars `B`.
    pub fn num_bars(&self) -> usize {
        self.bar_starts.len()
    }

    /// Half-open span `[start, end)` of bar `b`; the last bar ends at the
    /// song end.
    pub fn bar_span(&self, b: usize) -> (f64, f64) {
        let start = self.bar_starts[b];
        let end = if b + 1 < self.bar_starts.len() {
            self.bar_starts[b + 1]
        } else {
            self.song_end
        };
        (start, end)
    }
}

/// Reference segmentation: strictly increasing boundary times (piece start
/// and end included). Labels are parsed but ignored by boundary evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAnnotation {
    pub boundaries: Vec<f64>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SampleCodec {
    Pcm16,
    Float32,
}

impl fmt::Display for SampleCodec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleCodec::Pcm16 => write!(f, "pcm16"),
            SampleCodec::Float32 => write!(f, "float32"),
        }
    }
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16, AudioError> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or(AudioError::Malformed("truncated chunk"))
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, AudioError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(AudioError::Malformed("truncated chunk"))
}

const WAVE_FORMAT_PCM: u16 = 0x0001;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 0x0003;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Load a RIFF/WAVE file as mono audio.
///
/// PCM 16-bit and IEEE float32 data are accepted at any channel count and
/// sample rate. Multi-channel input is downmixed by the arithmetic mean of
/// the channels; integer samples are scaled by 1/32768. Anything compressed
/// (or at another bit depth) is an `UnsupportedCodec` error.
pub fn load_wav(path: &Path) -> Result<AudioBuffer, AudioError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| AudioError::Io {
            path: path.display().to_string(),
            source,
        })?;

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWav);
    }

    // Walk the chunk list for "fmt " and "data".
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<(usize, usize)> = None; // (offset, len)
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(AudioError::Malformed("chunk extends past end of file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Malformed("fmt chunk too short"));
                }
                let mut tag = read_u16(&bytes, body)?;
                let channels = read_u16(&bytes, body + 2)?;
                let rate = read_u32(&bytes, body + 4)?;
                let bits = read_u16(&bytes, body + 14)?;
                if tag == WAVE_FORMAT_EXTENSIBLE {
                    // SubFormat GUID starts with the effective format tag.
                    if size < 40 {
                        return Err(AudioError::Malformed("extensible fmt chunk too short"));
                    }
                    tag = read_u16(&bytes, body + 24)?;
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                data = Some((body, size));
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body + size + (size & 1);
    }

    let (tag, channels, rate, bits) = fmt.ok_or(AudioError::Malformed("no fmt chunk"))?;
    let (data_off, data_len) = data.ok_or(AudioError::Malformed("no data chunk"))?;
    if channels == 0 || rate == 0 {
        return Err(AudioError::Malformed("zero channels or sample rate"));
    }
    let codec = match (tag, bits) {
        (WAVE_FORMAT_PCM, 16) => SampleCodec::Pcm16,
        (WAVE_FORMAT_IEEE_FLOAT, 32) => SampleCodec::Float32,
        _ => return Err(AudioError::UnsupportedCodec {
            format_tag: tag,
            bits,
        }),
    };

    let bytes_per_sample = match codec {
        SampleCodec::Pcm16 => 2,
        SampleCodec::Float32 => 4,
    };
    let frame_bytes = bytes_per_sample * channels as usize;
    let num_frames = data_len / frame_bytes;
    if num_frames == 0 {
        return Err(AudioError::EmptyAudio);
    }

    let payload = &bytes[data_off..data_off + num_frames * frame_bytes];
    let mut samples = Vec::with_capacity(num_frames);
    let inv_channels = 1.0 / channels as f64;
    for frame in payload.chunks_exact(frame_bytes) {
        let mut acc = 0.0f64;
        match codec {
            SampleCodec::Pcm16 => {
                for ch in frame.chunks_exact(2) {
                    acc += i16::from_le_bytes([ch[0], ch[1]]) as f64 / 32768.0;
                }
            }
            SampleCodec::Float32 => {
                for ch in frame.chunks_exact(4) {
                    acc += f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as f64;
                }
            }
        }
        samples.push(acc * inv_channels);
    }

    for (index, s) in samples.iter_mut().enumerate() {
        if !s.is_finite() {
            return Err(AudioError::NonFiniteSample { index });
        }
        // Float files may carry inter-sample overs; clamp to the nominal range.
        *s = s.clamp(-1.0, 1.0);
    }

    Ok(AudioBuffer {
        samples,
        sample_rate: rate,
    })
}

/// Parse a bar-grid file: one bar-start time (seconds) per line, blank lines
/// and `#` comment lines allowed. Times must be strictly increasing and lie
/// inside `[0, song_duration]`.
pub fn parse_bar_grid(path: &Path, song_duration: f64) -> Result<BarGrid, AnnotationError> {
    let text = fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut starts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let value: f64 = trimmed.parse().map_err(|_| AnnotationError::BadNumber {
            line,
            text: trimmed.to_string(),
        })?;
        if !(0.0..=song_duration).contains(&value) {
            return Err(AnnotationError::OutOfRange {
                line,
                value,
                duration: song_duration,
            });
        }
        if let Some(&prev) = starts.last() {
            if value <= prev {
                return Err(AnnotationError::NonMonotonic { line, value });
            }
        }
        starts.push(value);
    }
    BarGrid::new(starts, song_duration)
}

/// Write a grid in the format `parse_bar_grid` reads.
pub fn write_bar_grid(path: &Path, grid: &BarGrid) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = fs::File::create(path)?;
    for t in grid.bar_starts() {
        writeln!(f, "{}", t)?;
    }
    Ok(())
}

/// Contiguity tolerance between consecutive segments, in seconds.
const SEGMENT_GAP_TOLERANCE: f64 = 1e-3;

/// Parse a `.lab`-style segment file: `start<TAB>end<TAB>label` per line,
/// segments contiguous within 1 ms. Boundaries are all starts plus the final
/// end.
pub fn parse_segments(path: &Path) -> Result<SegmentAnnotation, AnnotationError> {
    let text = fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut boundaries: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut prev_end: Option<f64> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_end();
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = trimmed.splitn(3, '\t');
        let start_text = fields.next().unwrap_or("");
        let end_text = fields.next().unwrap_or("");
        let label = fields.next().unwrap_or("").to_string();
        let start: f64 = start_text
            .trim()
            .parse()
            .map_err(|_| AnnotationError::BadNumber {
                line,
                text: start_text.to_string(),
            })?;
        let end: f64 = end_text
            .trim()
            .parse()
            .map_err(|_| AnnotationError::BadNumber {
                line,
                text: end_text.to_string(),
            })?;
        if end <= start {
            return Err(AnnotationError::EmptySegment { line, start, end });
        }
        if let Some(prev) = prev_end {
            let gap = start - prev;
            if gap.abs() > SEGMENT_GAP_TOLERANCE {
                return Err(AnnotationError::NotContiguous { line, gap });
            }
        }
        boundaries.push(start);
        labels.push(label);
        prev_end = Some(end);
    }
    match prev_end {
        Some(end) => boundaries.push(end),
        None => return Err(AnnotationError::NoSegments),
    }
    boundaries.dedup();
    Ok(SegmentAnnotation { boundaries, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::tempdir;

    fn write_file(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn silence_stereo_pcm16() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..44100 {
            w.write_sample(0i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();

        let buf = load_wav(&path).unwrap();
        assert_eq!(buf.samples.len(), 44100);
        assert_eq!(buf.sample_rate, 44100);
        assert!(buf.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_scaling_identity() {
        // 16384 on both channels -> mono 16384/32768 = 0.5.
        let dir = tempdir().unwrap();
        let path = dir.path().join("half.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        w.write_sample(16384i16).unwrap();
        w.finalize().unwrap();
        let buf = load_wav(&path).unwrap();
        assert_eq!(buf.samples, vec![0.5]);
    }

    #[test]
    fn float32_round_trip_bit_for_bit() {
        // Written by an independent WAV library, read back by our parser.
        let dir = tempdir().unwrap();
        let path = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let input = [0.1f32, -0.2, 0.3];
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for &s in &input {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let buf = load_wav(&path).unwrap();
        let expected: Vec<f64> = input.iter().map(|&s| s as f64).collect();
        assert_eq!(buf.samples, expected);
    }

    #[test]
    fn downmix_is_mean_of_channels() {
        let dir = tempdir().unwrap();
        let spec_n = |channels| hound::WavSpec {
            channels,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mono = dir.path().join("mono.wav");
        let four = dir.path().join("four.wav");
        let data = [0.25f32, -0.5, 0.125, 0.0, 0.75];
        let mut w = hound::WavWriter::create(&mono, spec_n(1)).unwrap();
        for &s in &data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let mut w = hound::WavWriter::create(&four, spec_n(4)).unwrap();
        for &s in &data {
            for _ in 0..4 {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
        assert_eq!(load_wav(&mono).unwrap().samples, load_wav(&four).unwrap().samples);
    }

    #[test]
    fn distinct_error_values() {
        let dir = tempdir().unwrap();
        assert!(matches!(
            load_wav(&dir.path().join("missing.wav")),
            Err(AudioError::Io { .. })
        ));

        // 8-bit PCM is an unsupported codec.
        let path = dir.path().join("pcm8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            load_wav(&path),
            Err(AudioError::UnsupportedCodec { bits: 8, .. })
        ));

        // Valid header, zero-length data chunk.
        let path = dir.path().join("empty.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let w = hound::WavWriter::create(&path, spec).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&path), Err(AudioError::EmptyAudio)));

        let not_wav = write_file(&dir, "nope.wav", "this is not audio at all......");
        assert!(matches!(load_wav(&not_wav), Err(AudioError::NotWav)));
    }

    #[test]
    fn bar_grid_uniform() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "bars.txt", "0.0\n2.0\n4.0\n");
        let grid = parse_bar_grid(&path, 6.0).unwrap();
        assert_eq!(grid.num_bars(), 3);
        assert_eq!(grid.bar_span(0), (0.0, 2.0));
        assert_eq!(grid.bar_span(2), (4.0, 6.0));
    }

    #[test]
    fn bar_grid_rejects_non_monotonic() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "bars.txt", "0.0\n2.0\n1.5\n");
        assert!(matches!(
            parse_bar_grid(&path, 6.0),
            Err(AnnotationError::NonMonotonic { line: 3, .. })
        ));
    }

    #[test]
    fn bar_grid_comments_blanks_and_errors() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "bars.txt", "# downbeats\n\n0.5\n2.5\n\n# end\n");
        let grid = parse_bar_grid(&path, 5.0).unwrap();
        assert_eq!(grid.bar_starts(), &[0.5, 2.5]);

        let bad = write_file(&dir, "bad.txt", "0.0\ntwo\n4.0\n");
        assert!(matches!(
            parse_bar_grid(&bad, 6.0),
            Err(AnnotationError::BadNumber { line: 2, .. })
        ));

        let out = write_file(&dir, "out.txt", "0.0\n7.5\n");
        assert!(matches!(
            parse_bar_grid(&out, 6.0),
            Err(AnnotationError::OutOfRange { line: 2, .. })
        ));

        let single = write_file(&dir, "one.txt", "0.0\n");
        assert!(matches!(
            parse_bar_grid(&single, 6.0),
            Err(AnnotationError::TooFewBars(1))
        ));
    }

    #[test]
    fn madmom_style_click_track_fixture() {
        // Downbeat-tracker output for a 120 BPM 4/4 click track: one bar every
        // 2.0 s, times quantized to the tracker's ~10 ms analysis grid.
        let dir = tempdir().unwrap();
        let path = write_file(
            &dir,
            "clicks.txt",
            "0.01\n2.01\n4.02\n6.01\n8.02\n10.02\n12.03\n14.02\n16.03\n18.03\n",
        );
        let grid = parse_bar_grid(&path, 20.0).unwrap();
        assert_eq!(grid.num_bars(), 10);
        for w in grid.bar_starts().windows(2) {
            assert!(
                (w[1] - w[0] - 2.0).abs() <= 0.011,
                "bar length {} off the 2.0 s grid",
                w[1] - w[0]
            );
        }
    }

    #[test]
    fn bar_grid_round_trip() {
        let dir = tempdir().unwrap();
        let grid = BarGrid::new(vec![0.25, 1.75, 3.5, 5.125], 7.0).unwrap();
        let path = dir.path().join("grid.txt");
        write_bar_grid(&path, &grid).unwrap();
        let back = parse_bar_grid(&path, 7.0).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn segments_two_blocks() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "ref.lab", "0.0\t10.0\tA\n10.0\t20.0\tB\n");
        let ann = parse_segments(&path).unwrap();
        assert_eq!(ann.boundaries, vec![0.0, 10.0, 20.0]);
        assert_eq!(ann.labels, vec!["A", "B"]);
    }

    #[test]
    fn segments_single() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "ref.lab", "0.0\t5.0\tX\n");
        let ann = parse_segments(&path).unwrap();
        assert_eq!(ann.boundaries, vec![0.0, 5.0]);
    }

    #[test]
    fn segments_gap_and_bad_number() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "gap.lab", "0.0\t10.0\tA\n10.5\t20.0\tB\n");
        assert!(matches!(
            parse_segments(&path),
            Err(AnnotationError::NotContiguous { line: 2, .. })
        ));
        let path = write_file(&dir, "bad.lab", "0.0\tten\tA\n");
        assert!(matches!(
            parse_segments(&path),
            Err(AnnotationError::BadNumber { line: 1, .. })
        ));
        // 1 ms jitter is within tolerance.
        let path = write_file(&dir, "jitter.lab", "0.0\t10.0\tA\n10.001\t20.0\tB\n");
        assert!(parse_segments(&path).is_ok());
    }

    #[test]
    fn segments_boundaries_are_sorted_unique_endpoints() {
        // Property: for any contiguous segment list, boundaries equal the
        // sorted unique set of all segment endpoints, parsed independently.
        let dir = tempdir().unwrap();
        let mut text = String::new();
        let mut t = 0.0;
        let lengths = [1.5, 2.0, 0.75, 3.25, 1.0, 2.5, 0.5, 4.0, 1.25, 2.75];
        for (i, len) in lengths.iter().enumerate() {
            text.push_str(&format!("{}\t{}\tseg{}\n", t, t + len, i));
            t += len;
        }
        let path = write_file(&dir, "many.lab", &text);
        let ann = parse_segments(&path).unwrap();

        // Independent parse: split every line on tabs, collect endpoints.
        let mut endpoints: Vec<f64> = text
            .lines()
            .flat_map(|l| l.split('\t').take(2).map(|v| v.parse::<f64>().unwrap()))
            .collect();
        endpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
        endpoints.dedup();
        assert_eq!(ann.boundaries, endpoints);
        assert_eq!(ann.boundaries.first(), Some(&0.0));
        assert_eq!(ann.boundaries.last(), Some(&t));
    }
}
