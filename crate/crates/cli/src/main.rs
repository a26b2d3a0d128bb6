//! `barseg` — barwise music structure analysis from the command line.
//!
//! Subcommands: `analyze` one song, `corpus` for batch evaluation against
//! references, `sweep` to scan latent dimensions, `figures` to export
//! autosimilarity heat maps and the training loss curve.

use anyhow::{Context, Result};
use barseg::harness::{self, Mode, PipelineConfig};
use barseg::segmentation::{boundary_json, write_intervals_tsv};
use barseg::spectral::FeatureKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "barseg", version, about = "Unsupervised music structure analysis with per-song autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    Chroma,
    Mel,
    LogMel,
    Mfcc,
}

impl From<FeatureArg> for FeatureKind {
    fn from(f: FeatureArg) -> Self {
        match f {
            FeatureArg::Chroma => FeatureKind::Chroma,
            FeatureArg::Mel => FeatureKind::Mel,
            FeatureArg::LogMel => FeatureKind::LogMel,
            FeatureArg::Mfcc => FeatureKind::Mfcc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Latent,
    Raw,
}

#[derive(Args)]
struct CommonOpts {
    /// Feature representation.
    #[arg(long, value_enum, default_value = "log-mel")]
    feature: FeatureArg,

    /// Latent space dimension.
    #[arg(long = "dls", default_value_t = 32)]
    dls: usize,

    /// Autosimilarity source: trained latent vectors or raw barwise features.
    #[arg(long, value_enum, default_value = "latent")]
    mode: ModeArg,

    /// Segment-size regularity weight.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,

    /// Longest allowed segment, in bars.
    #[arg(long = "max-seg", default_value_t = 36)]
    max_seg: usize,

    /// Master RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Worker threads for corpus runs (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,

    /// Hit-rate tolerance windows in seconds, comma separated.
    #[arg(long, default_value = "0.5,3", value_parser = validate_windows)]
    window: String,

    /// Trim piece start/end boundaries before scoring.
    #[arg(long)]
    trim: bool,

    /// Training epoch cap.
    #[arg(long, default_value_t = 1000)]
    epochs: usize,

    /// STFT frame length.
    #[arg(long = "n-fft", default_value_t = 2048)]
    n_fft: usize,

    /// STFT hop in samples.
    #[arg(long, default_value_t = 32)]
    hop: usize,
}

fn parse_windows(s: &str) -> Result<Vec<f64>, String> {
    let windows: Result<Vec<f64>, _> = s.split(',').map(|w| w.trim().parse::<f64>()).collect();
    match windows {
        Ok(w) if !w.is_empty() && w.iter().all(|v| *v > 0.0) => Ok(w),
        _ => Err(format!("bad window list '{s}' (expected e.g. '0.5,3')")),
    }
}

fn validate_windows(s: &str) -> Result<String, String> {
    parse_windows(s).map(|_| s.to_string())
}

impl CommonOpts {
    fn to_config(&self) -> PipelineConfig {
        let mut config = PipelineConfig::default();
        config.feature = self.feature.into();
        config.latent_dim = self.dls;
        config.mode = match self.mode {
            ModeArg::Latent => Mode::Latent,
            ModeArg::Raw => Mode::RawFeature,
        };
        config.segmentation.lambda = self.lambda;
        config.segmentation.max_segment_bars = self.max_seg;
        config.train.seed = self.seed;
        config.train.max_epochs = self.epochs;
        config.windows = parse_windows(&self.window).expect("validated by clap");
        config.trim = self.trim;
        config.jobs = self.jobs;
        config.n_fft = self.n_fft;
        config.hop = self.hop;
        config
    }
}

#[derive(Subcommand)]
enum Command {
    /// Segment one song; prints boundary JSON.
    Analyze {
        /// WAV file.
        audio: PathBuf,
        /// Bar-grid text file (one bar start per line, seconds).
        bars: PathBuf,
        /// Reference segments (.lab) to score against.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Write the boundary JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write segment intervals as two-column TSV.
        #[arg(long)]
        intervals_out: Option<PathBuf>,
        /// Dump the feature spectrogram (CSV + PGM) into this directory.
        #[arg(long)]
        dump_features: Option<PathBuf>,
        /// Dump the barwise tensor (binary) to this path.
        #[arg(long)]
        dump_tensor: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Batch-evaluate a corpus directory (audio/, bars/, refs/).
    Corpus {
        dir: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// With multiple annotations per song, keep the best-scoring one.
        #[arg(long)]
        best_of_refs: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Corpus runs across latent dimensions; prints CSV.
    Sweep {
        dir: PathBuf,
        /// Latent dimensions, comma separated.
        #[arg(long, value_parser = parse_dls, default_value = "4,8,16,32,64,128")]
        dls_list: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Export autosimilarity heat maps (PGM/SVG/CSV) and the loss curve.
    Figures {
        audio: PathBuf,
        bars: PathBuf,
        /// Output directory.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn parse_dls(s: &str) -> Result<String, String> {
    for part in s.split(',') {
        part.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad latent dimension '{part}'"))?;
    }
    Ok(s.to_string())
}

fn write_or_print(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, content)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{content}"),
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Analyze {
            audio,
            bars,
            reference,
            out,
            intervals_out,
            dump_features,
            dump_tensor,
            common,
        } => {
            let config = common.to_config();
            // Load once; reuse the feature spectrogram for optional dumps.
            let buffer = barseg::audio_io::load_wav(&audio)?;
            let grid = barseg::audio_io::parse_bar_grid(&bars, buffer.duration_seconds())?;
            let annotation = reference
                .as_deref()
                .map(barseg::audio_io::parse_segments)
                .transpose()?;
            let feature = harness::feature_spectrogram(&buffer, &config)?;
            if let Some(dir) = dump_features {
                std::fs::create_dir_all(&dir)?;
                barseg::export::write_matrix_csv(&dir.join("feature.csv"), feature.values.view())?;
                barseg::export::write_pgm(&dir.join("feature.pgm"), feature.values.view())?;
            }
            let tensor = barseg::barwise::barwise_tensor(&feature, &grid)?;
            if let Some(path) = dump_tensor {
                barseg::barwise::write_tensor(&path, &tensor)?;
            }
            let analysis =
                harness::analyze_tensor(&tensor, &grid, annotation.as_ref(), &config)?;

            let mut output = boundary_json(&analysis.segmentation);
            output.push('\n');
            write_or_print(&out, &output)?;
            if let Some(path) = intervals_out {
                write_intervals_tsv(&path, &analysis.segmentation)?;
            }
            for score in &analysis.scores {
                eprintln!(
                    "window {:>4}s  P {:.4}  R {:.4}  F {:.4}",
                    score.window, score.precision, score.recall, score.f_measure
                );
            }
        }
        Command::Corpus {
            dir,
            out,
            best_of_refs,
            common,
        } => {
            let mut config = common.to_config();
            config.best_of_refs = best_of_refs;
            let report = harness::run_corpus(&dir, &config)?;
            for failure in &report.failures {
                eprintln!("failed: {}: {}", failure.song, failure.error);
            }
            for mean in &report.means {
                eprintln!(
                    "mean @ {:>4}s over {} songs: P {:.4} R {:.4} F {:.4}",
                    mean.window,
                    report.songs.len(),
                    mean.precision,
                    mean.recall,
                    mean.f_measure
                );
            }
            write_or_print(&out, &report.to_json())?;
        }
        Command::Sweep {
            dir,
            dls_list,
            out,
            common,
        } => {
            let config = common.to_config();
            let dims: Vec<usize> = dls_list
                .split(',')
                .map(|s| s.trim().parse().expect("validated"))
                .collect();
            let table = harness::sweep_latent(&dir, &config, &dims)?;
            write_or_print(&out, &table.to_csv())?;
        }
        Command::Figures {
            audio,
            bars,
            out_dir,
            common,
        } => {
            let config = common.to_config();
            let analysis = harness::analyze_song(&audio, &bars, None, &config)?;
            let written = harness::export_figures(&analysis, &out_dir)?;
            for path in written {
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
