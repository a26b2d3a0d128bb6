//! End-to-end pipeline and batch corpus harness.
//!
//! `analyze_song` runs one song through feature extraction, barwise
//! resampling, (optionally) per-song autoencoder training, autosimilarity
//! and dynamic-programming segmentation, scoring against a reference
//! annotation when one is supplied. `run_corpus` applies it to a directory
//! of songs with per-song fault isolation, and `sweep_latent` repeats a
//! corpus run across latent dimensions.
//!
//! Corpus layout, matched by file stem:
//!
//! ```text
//! corpus/
//!   audio/<stem>.wav
//!   bars/<stem>.txt      one bar-start time (seconds) per line
//!   refs/<stem>.lab      reference segments, start<TAB>end<TAB>label
//!   refs/<stem>.2.lab    optional alternate annotations (--best-of-refs)
//! ```
//!
//! Every song derives its RNG seed as `master seed + hash(stem)`, so adding
//! or removing songs never changes other songs' results, and report rows are
//! keyed and sorted by stem, so a report is byte-identical across runs and
//! worker counts.

use crate::audio_io::{self, SegmentAnnotation};
use crate::barwise::{self, BarTensor};
use crate::export;
use crate::metrics::{self, HitRateScore};
use crate::segmentation::{self, SegmentationConfig, SegmentationResult};
use crate::similarity::{self, Autosimilarity};
use crate::spectral::{self, FeatureKind, Spectrogram};
use crate::trainer::{self, TrainConfig, TrainReport};
use rayon::prelude::*;
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    LoadAudio,
    ParseBars,
    ParseRefs,
    Feature,
    Barwise,
    Train,
    Encode,
    Similarity,
    Segmentation,
    Evaluation,
    Export,
    Corpus,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::LoadAudio => "load-audio",
            Stage::ParseBars => "parse-bars",
            Stage::ParseRefs => "parse-refs",
            Stage::Feature => "feature",
            Stage::Barwise => "barwise",
            Stage::Train => "train",
            Stage::Encode => "encode",
            Stage::Similarity => "similarity",
            Stage::Segmentation => "segmentation",
            Stage::Evaluation => "evaluation",
            Stage::Export => "export",
            Stage::Corpus => "corpus",
        };
        write!(f, "{name}")
    }
}

/// A pipeline failure, tagged with the stage it happened in.
#[derive(Debug, Error)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    fn new(stage: Stage, err: impl fmt::Display) -> Self {
        Self {
            stage,
            message: err.to_string(),
        }
    }
}

/// Which representation feeds the autosimilarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train the per-song autoencoder and use its latent vectors.
    Latent,
    /// Use the flattened barwise features directly (no training).
    RawFeature,
}

/// Everything one run needs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub feature: FeatureKind,
    pub latent_dim: usize,
    pub mode: Mode,
    pub n_fft: usize,
    /// STFT hop in samples; the barwise stage needs it small.
    pub hop: usize,
    pub segmentation: SegmentationConfig,
    pub train: TrainConfig,
    /// Hit-rate tolerance windows in seconds.
    pub windows: Vec<f64>,
    /// Drop piece start/end boundaries before scoring.
    pub trim: bool,
    /// Worker threads for corpus runs; 0 = one per core.
    pub jobs: usize,
    /// With several reference annotations per song, keep the one with the
    /// best F-measure at the largest window.
    pub best_of_refs: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            feature: FeatureKind::LogMel,
            latent_dim: 32,
            mode: Mode::Latent,
            n_fft: 2048,
            hop: 32,
            segmentation: SegmentationConfig::default(),
            train: TrainConfig::default(),
            windows: vec![0.5, 3.0],
            trim: false,
            jobs: 0,
            best_of_refs: false,
        }
    }
}

/// Full per-song result: the segmentation plus every inspectable artifact
/// (autosimilarities, training trajectory, scores).
#[derive(Debug)]
pub struct SongAnalysis {
    pub feature: FeatureKind,
    pub latent_dim: usize,
    pub mode: Mode,
    pub num_bars: usize,
    pub segmentation: SegmentationResult,
    /// One score per configured window; empty without a reference.
    pub scores: Vec<HitRateScore>,
    pub raw_autosimilarity: Autosimilarity,
    /// Present in latent mode only.
    pub latent_autosimilarity: Option<Autosimilarity>,
    /// Present in latent mode only.
    pub train_report: Option<TrainReport>,
}

/// FNV-1a, the stable per-song hash mixed into the master seed.
fn stem_hash(stem: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in stem.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Compute the configured feature spectrogram. Mel-family features stream
/// frame-by-frame, so the full-resolution STFT never materializes.
pub fn feature_spectrogram(
    audio: &audio_io::AudioBuffer,
    config: &PipelineConfig,
) -> Result<Spectrogram, spectral::SpectralError> {
    match config.feature {
        FeatureKind::Chroma => spectral::chromagram_from_audio(audio, config.n_fft, config.hop),
        FeatureKind::Mel => spectral::mel_spectrogram(audio, config.n_fft, config.hop),
        FeatureKind::LogMel => {
            let mel = spectral::mel_spectrogram(audio, config.n_fft, config.hop)?;
            spectral::log_mel_auto(&mel)
        }
        FeatureKind::Mfcc => {
            let mel = spectral::mel_spectrogram(audio, config.n_fft, config.hop)?;
            let lm = spectral::log_mel_auto(&mel)?;
            spectral::mfcc(&lm)
        }
        FeatureKind::StftPower => unreachable!("rejected by validate"),
    }
}

fn validate(config: &PipelineConfig) -> Result<(), PipelineError> {
    if config.feature == FeatureKind::StftPower {
        return Err(PipelineError::new(
            Stage::Config,
            "raw stft power is not a pipeline feature; pick chroma, mel, log_mel or mfcc",
        ));
    }
    if config.windows.is_empty() {
        return Err(PipelineError::new(Stage::Config, "no tolerance windows"));
    }
    Ok(())
}

/// Run the whole pipeline on one song. `reference` enables scoring.
pub fn analyze_song(
    audio_path: &Path,
    bars_path: &Path,
    reference: Option<&Path>,
    config: &PipelineConfig,
) -> Result<SongAnalysis, PipelineError> {
    validate(config)?;
    let audio =
        audio_io::load_wav(audio_path).map_err(|e| PipelineError::new(Stage::LoadAudio, e))?;
    let grid = audio_io::parse_bar_grid(bars_path, audio.duration_seconds())
        .map_err(|e| PipelineError::new(Stage::ParseBars, e))?;
    let annotation = reference
        .map(|p| audio_io::parse_segments(p).map_err(|e| PipelineError::new(Stage::ParseRefs, e)))
        .transpose()?;
    analyze_loaded(&audio, &grid, annotation.as_ref(), config)
}

/// Pipeline body from already-loaded inputs (also used by the sweep to avoid
/// re-reading files).
pub fn analyze_loaded(
    audio: &audio_io::AudioBuffer,
    grid: &audio_io::BarGrid,
    annotation: Option<&SegmentAnnotation>,
    config: &PipelineConfig,
) -> Result<SongAnalysis, PipelineError> {
    validate(config)?;
    let feature =
        feature_spectrogram(audio, config).map_err(|e| PipelineError::new(Stage::Feature, e))?;
    let tensor =
        barwise::barwise_tensor(&feature, grid).map_err(|e| PipelineError::new(Stage::Barwise, e))?;
    analyze_tensor(&tensor, grid, annotation, config)
}

/// Pipeline tail from a prebuilt barwise tensor.
pub fn analyze_tensor(
    tensor: &BarTensor,
    grid: &audio_io::BarGrid,
    annotation: Option<&SegmentAnnotation>,
    config: &PipelineConfig,
) -> Result<SongAnalysis, PipelineError> {
    let raw_autosimilarity = similarity::raw_feature_autosimilarity(tensor)
        .map_err(|e| PipelineError::new(Stage::Similarity, e))?;

    let (autosim, latent_autosimilarity, train_report) = match config.mode {
        Mode::RawFeature => (raw_autosimilarity.clone(), None, None),
        Mode::Latent => {
            let ae_config =
                crate::ae::AEConfig::new(config.latent_dim, tensor.feature_dim(), config.train.seed)
                    .map_err(|e| PipelineError::new(Stage::Train, e))?;
            let (params, report) = trainer::train::<f32>(tensor, &ae_config, &config.train)
                .map_err(|e| PipelineError::new(Stage::Train, e))?;
            let z = trainer::encode_song(&params, tensor)
                .map_err(|e| PipelineError::new(Stage::Encode, e))?;
            let a = similarity::autosimilarity(z.matrix().view(), true)
                .map_err(|e| PipelineError::new(Stage::Similarity, e))?;
            (a.clone(), Some(a), Some(report))
        }
    };

    let mut result = segmentation::dp_segment(&autosim, &config.segmentation)
        .map_err(|e| PipelineError::new(Stage::Segmentation, e))?;
    result
        .localize(grid)
        .map_err(|e| PipelineError::new(Stage::Segmentation, e))?;

    let mut scores = Vec::new();
    if let Some(annotation) = annotation {
        for &window in &config.windows {
            let score = metrics::hit_rate(
                &result.boundaries_seconds,
                &annotation.boundaries,
                window,
                config.trim,
            )
            .map_err(|e| PipelineError::new(Stage::Evaluation, e))?;
            scores.push(score);
        }
    }

    Ok(SongAnalysis {
        feature: config.feature,
        latent_dim: config.latent_dim,
        mode: config.mode,
        num_bars: tensor.num_bars(),
        segmentation: result,
        scores,
        raw_autosimilarity,
        latent_autosimilarity,
        train_report,
    })
}

/// Hit-rate rows of one corpus song.
#[derive(Debug, Clone, Serialize)]
pub struct SongReport {
    pub song: String,
    pub scores: Vec<HitRateScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SongFailure {
    pub song: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowMean {
    pub window: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Corpus-level report: per-song rows (sorted by stem), isolated failures,
/// and unweighted per-window means. Wall-clock runtimes are kept for
/// display but excluded from the serialized report so reports with equal
/// seeds are byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct CorpusReport {
    pub songs: Vec<SongReport>,
    pub failures: Vec<SongFailure>,
    pub means: Vec<WindowMean>,
    #[serde(skip)]
    pub runtimes: Vec<(String, f64)>,
}

impl CorpusReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// A corpus song's input files.
#[derive(Debug, Clone)]
struct SongFiles {
    stem: String,
    audio: PathBuf,
    bars: PathBuf,
    refs: Vec<PathBuf>,
}

fn scan_corpus(dir: &Path, best_of_refs: bool) -> Result<Vec<SongFiles>, PipelineError> {
    let audio_dir = dir.join("audio");
    let mut stems = Vec::new();
    let entries = std::fs::read_dir(&audio_dir)
        .map_err(|e| PipelineError::new(Stage::Corpus, format!("{}: {e}", audio_dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| PipelineError::new(Stage::Corpus, e))?
            .path();
        if path.extension().and_then(|e| e.to_str()) == Some("wav") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push((stem.to_string(), path.clone()));
            }
        }
    }
    if stems.is_empty() {
        return Err(PipelineError::new(
            Stage::Corpus,
            format!("no .wav files under {}", audio_dir.display()),
        ));
    }
    stems.sort_by(|a, b| a.0.cmp(&b.0));

    let refs_dir = dir.join("refs");
    Ok(stems
        .into_iter()
        .map(|(stem, audio)| {
            let mut refs = vec![refs_dir.join(format!("{stem}.lab"))];
            if best_of_refs {
                // Alternate annotations: <stem>.<anything>.lab, sorted.
                let mut alts: Vec<PathBuf> = std::fs::read_dir(&refs_dir)
                    .map(|rd| {
                        rd.filter_map(|e| e.ok().map(|e| e.path()))
                            .filter(|p| {
                                p.file_name()
                                    .and_then(|n| n.to_str())
                                    .map(|n| {
                                        n.starts_with(&format!("{stem}."))
                                            && n.ends_with(".lab")
                                            && n != &format!("{stem}.lab")
                                    })
                                    .unwrap_or(false)
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                alts.sort();
                refs.extend(alts);
            }
            SongFiles {
                bars: dir.join("bars").join(format!("{stem}.txt")),
                audio,
                stem,
                refs,
            }
        })
        .collect())
}

/// Index of the window used to select among alternate references (the
/// largest, i.e. the most permissive).
fn selection_window(windows: &[f64]) -> usize {
    windows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn analyze_corpus_song(files: &SongFiles, config: &PipelineConfig) -> Result<Vec<HitRateScore>, PipelineError> {
    let mut song_config = config.clone();
    song_config.train.seed = config.train.seed.wrapping_add(stem_hash(&files.stem));

    let audio =
        audio_io::load_wav(&files.audio).map_err(|e| PipelineError::new(Stage::LoadAudio, e))?;
    let grid = audio_io::parse_bar_grid(&files.bars, audio.duration_seconds())
        .map_err(|e| PipelineError::new(Stage::ParseBars, e))?;
    let annotations: Vec<SegmentAnnotation> = files
        .refs
        .iter()
        .map(|p| audio_io::parse_segments(p).map_err(|e| PipelineError::new(Stage::ParseRefs, e)))
        .collect::<Result<_, _>>()?;

    // The segmentation does not depend on the reference; analyze once and
    // score against each annotation.
    let analysis = analyze_loaded(&audio, &grid, None, &song_config)?;
    let mut best: Option<Vec<HitRateScore>> = None;
    let sel = selection_window(&config.windows);
    for annotation in &annotations {
        let mut scores = Vec::new();
        for &window in &config.windows {
            let score = metrics::hit_rate(
                &analysis.segmentation.boundaries_seconds,
                &annotation.boundaries,
                window,
                config.trim,
            )
            .map_err(|e| PipelineError::new(Stage::Evaluation, e))?;
            scores.push(score);
        }
        let better = match &best {
            None => true,
            Some(prev) => scores[sel].f_measure > prev[sel].f_measure,
        };
        if better {
            best = Some(scores);
        }
    }
    Ok(best.expect("at least one reference"))
}

/// Batch-evaluate a corpus directory. One song's failure is recorded in the
/// report, not fatal. Deterministic for a fixed master seed regardless of
/// the worker count.
pub fn run_corpus(dir: &Path, config: &PipelineConfig) -> Result<CorpusReport, PipelineError> {
    validate(config)?;
    let songs = scan_corpus(dir, config.best_of_refs)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| PipelineError::new(Stage::Corpus, e))?;

    let outcomes: Vec<(String, f64, Result<Vec<HitRateScore>, PipelineError>)> = pool.install(|| {
        songs
            .par_iter()
            .map(|files| {
                let t0 = std::time::Instant::now();
                let result = analyze_corpus_song(files, config);
                (files.stem.clone(), t0.elapsed().as_secs_f64(), result)
            })
            .collect()
    });

    let mut report = CorpusReport {
        songs: Vec::new(),
        failures: Vec::new(),
        means: Vec::new(),
        runtimes: Vec::new(),
    };
    for (stem, seconds, outcome) in outcomes {
        report.runtimes.push((stem.clone(), seconds));
        match outcome {
            Ok(scores) => report.songs.push(SongReport { song: stem, scores }),
            Err(e) => report.failures.push(SongFailure {
                song: stem,
                error: e.to_string(),
            }),
        }
    }
    for (w, &window) in config.windows.iter().enumerate() {
        if report.songs.is_empty() {
            break;
        }
        let n = report.songs.len() as f64;
        let mut mean = WindowMean {
            window,
            precision: 0.0,
            recall: 0.0,
            f_measure: 0.0,
        };
        for song in &report.songs {
            mean.precision += song.scores[w].precision;
            mean.recall += song.scores[w].recall;
            mean.f_measure += song.scores[w].f_measure;
        }
        mean.precision /= n;
        mean.recall /= n;
        mean.f_measure /= n;
        report.means.push(mean);
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub feature: FeatureKind,
    pub latent_dim: usize,
    /// Mean F-measure per window, in window order.
    pub mean_f: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub windows: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// CSV with one row per (feature, d_ls): `feature,d_ls,f_<w1>,f_<w2>,...`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,d_ls");
        for w in &self.windows {
            out.push_str(&format!(",f_{w}"));
        }
        out.push('\n');
        for row in &self.rows {
            let kind = match row.feature {
                FeatureKind::Chroma => "chroma",
                FeatureKind::Mel => "mel",
                FeatureKind::LogMel => "log_mel",
                FeatureKind::Mfcc => "mfcc",
                FeatureKind::StftPower => "stft_power",
            };
            out.push_str(&format!("{kind},{}", row.latent_dim));
            for f in &row.mean_f {
                out.push_str(&format!(",{f}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Corpus runs across a list of latent dimensions (the configured feature).
pub fn sweep_latent(
    dir: &Path,
    config: &PipelineConfig,
    latent_dims: &[usize],
) -> Result<SweepTable, PipelineError> {
    let mut rows = Vec::new();
    for &d_ls in latent_dims {
        let mut cfg = config.clone();
        cfg.latent_dim = d_ls;
        let report = run_corpus(dir, &cfg)?;
        rows.push(SweepRow {
            feature: config.feature,
            latent_dim: d_ls,
            mean_f: report.means.iter().map(|m| m.f_measure).collect(),
        });
    }
    Ok(SweepTable {
        windows: config.windows.clone(),
        rows,
    })
}

/// Export inspection figures for one analysis: PGM + SVG heat maps of the
/// raw (and, in latent mode, latent) autosimilarity, plus the training loss
/// curve as CSV. Returns the files written.
pub fn export_figures(analysis: &SongAnalysis, out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::new(Stage::Export, e))?;
    let mut written = Vec::new();
    let mut dump = |name: &str, matrix: &Autosimilarity| -> Result<(), PipelineError> {
        for ext in ["pgm", "svg", "csv"] {
            let path = out_dir.join(format!("{name}.{ext}"));
            let res = match ext {
                "pgm" => export::write_pgm(&path, matrix.matrix().view()),
                "svg" => export::write_svg_heatmap(&path, matrix.matrix().view(), 4),
                _ => export::write_matrix_csv(&path, matrix.matrix().view()),
            };
            res.map_err(|e| PipelineError::new(Stage::Export, e))?;
            written.push(path);
        }
        Ok(())
    };
    dump("raw_autosimilarity", &analysis.raw_autosimilarity)?;
    if let Some(latent) = &analysis.latent_autosimilarity {
        dump("latent_autosimilarity", latent)?;
    }
    if let Some(report) = &analysis.train_report {
        let path = out_dir.join("loss_curve.csv");
        export::write_loss_csv(&path, &report.loss_history, &report.lr_history)
            .map_err(|e| PipelineError::new(Stage::Export, e))?;
        written.push(path);
    }
    Ok(written)
}
