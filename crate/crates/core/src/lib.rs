//! Barwise music structure analysis with per-song convolutional autoencoders.
//!
//! The pipeline segments a song into structural sections (verse, chorus, ...)
//! without any training data beyond the song itself:
//!
//! 1. [`audio_io`] loads a WAV file plus an externally estimated bar grid.
//! 2. [`spectral`] computes a feature spectrogram (chroma, Mel, log Mel or
//!    MFCC) at a 32-sample hop.
//! 3. [`barwise`] resamples the spectrogram into a fixed 96-frames-per-bar
//!    tensor, so later stages are tempo independent.
//! 4. [`ae`] / [`trainer`] fit a small convolutional autoencoder to the bars
//!    of this one song and encode every bar into a low-dimensional latent
//!    vector.
//! 5. [`similarity`] builds the bar-by-bar cosine autosimilarity matrix from
//!    the latent vectors (or from the raw barwise features for comparison).
//! 6. [`segmentation`] finds the optimal partition of the bar axis by dynamic
//!    programming over a block-similarity kernel with a segment-size
//!    regularity penalty.
//! 7. [`metrics`] scores estimated boundaries against reference annotations
//!    with the tolerance-window hit-rate (precision / recall / F-measure).
//!
//! [`harness`] wires the stages into a per-song pipeline and a batch corpus
//! evaluator; the `barseg` CLI in the companion crate exposes them as
//! subcommands.

pub mod ae;
pub mod audio_io;
pub mod barwise;
pub mod export;
pub mod harness;
pub mod metrics;
pub mod segmentation;
pub mod similarity;
pub mod spectral;
pub mod trainer;

pub use ae::{AEConfig, AEParams, Gradients};
pub use audio_io::{AudioBuffer, BarGrid, SegmentAnnotation};
pub use barwise::BarTensor;
pub use harness::{CorpusReport, Mode, PipelineConfig, SongAnalysis};
pub use metrics::HitRateScore;
pub use segmentation::{Kernel, SegmentationConfig, SegmentationResult};
pub use similarity::{Autosimilarity, LatentMatrix};
pub use spectral::{FeatureKind, MelFilterbank, Spectrogram};
pub use trainer::{StopReason, TrainConfig, TrainReport};
