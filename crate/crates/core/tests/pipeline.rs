//! File-based end-to-end tests of the analysis pipeline and corpus harness
//! on synthesized songs (raw-feature mode where possible: no training, so
//! they stay quick).

mod common;

use barseg::harness::{self, Mode, PipelineConfig};
use barseg::spectral::FeatureKind;
use common::{write_aabb_song, write_corpus_song};
use std::fs;
use tempfile::tempdir;

fn quick_config(mode: Mode) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.mode = mode;
    config.feature = FeatureKind::LogMel;
    // A coarser hop keeps the integration tests fast; resolution is still
    // ~500 frames per 2 s bar.
    config.hop = 128;
    config
}

#[test]
fn raw_mode_recovers_constructed_boundaries() {
    let dir = tempdir().unwrap();
    let song = write_aabb_song(dir.path(), "aabb", 32, 8, 32000);
    let config = quick_config(Mode::RawFeature);
    let analysis =
        harness::analyze_song(&song.wav, &song.bars, Some(&song.reference), &config).unwrap();

    assert_eq!(analysis.num_bars, 32);
    assert_eq!(analysis.segmentation.boundaries_bars, vec![0, 8, 16, 24, 32]);
    assert_eq!(analysis.segmentation.boundaries_seconds, song.boundaries_sec);
    assert!(analysis.latent_autosimilarity.is_none());
    assert!(analysis.train_report.is_none());

    // Perfect hit rate at both windows.
    for score in &analysis.scores {
        assert_eq!(score.f_measure, 1.0, "window {}", score.window);
    }

    // The raw autosimilarity is near block structure: within-section cosine
    // close to 1, across sections close to 0.
    let a = analysis.raw_autosimilarity.matrix();
    assert!(a[[1, 2]] > 0.9, "within-section similarity {}", a[[1, 2]]);
    assert!(a[[1, 9]] < 0.4, "across-section similarity {}", a[[1, 9]]);
}

#[test]
fn latent_mode_end_to_end_smoke() {
    let dir = tempdir().unwrap();
    let song = write_aabb_song(dir.path(), "aabb", 16, 8, 32000);
    let mut config = quick_config(Mode::Latent);
    config.latent_dim = 8;
    config.train.max_epochs = 60;
    let analysis =
        harness::analyze_song(&song.wav, &song.bars, Some(&song.reference), &config).unwrap();
    assert!(analysis.latent_autosimilarity.is_some());
    let report = analysis.train_report.as_ref().unwrap();
    assert!(report.best_loss < report.loss_history[0]);
    assert_eq!(analysis.scores.len(), 2);
    // Settings echoed in the result.
    assert_eq!(analysis.latent_dim, 8);
    assert_eq!(analysis.feature, FeatureKind::LogMel);
    assert_eq!(analysis.mode, Mode::Latent);
}

#[test]
fn corpus_means_and_determinism() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    for stem in ["s1", "s2", "s3"] {
        write_corpus_song(&corpus, stem, 16, 8, 32000);
    }
    let mut config = quick_config(Mode::RawFeature);
    config.jobs = 2;

    let report = harness::run_corpus(&corpus, &config).unwrap();
    assert_eq!(report.songs.len(), 3);
    assert!(report.failures.is_empty());
    assert_eq!(report.songs[0].song, "s1"); // sorted by stem
    assert_eq!(report.runtimes.len(), 3);

    // Means recompute from the rows exactly.
    for (w, mean) in report.means.iter().enumerate() {
        let f: f64 = report.songs.iter().map(|s| s.scores[w].f_measure).sum::<f64>() / 3.0;
        assert!((mean.f_measure - f).abs() < 1e-12);
    }

    // Byte-identical reports across runs and worker counts.
    let again = harness::run_corpus(&corpus, &config).unwrap();
    assert_eq!(report.to_json(), again.to_json());
    let mut serial = config.clone();
    serial.jobs = 1;
    let serial_report = harness::run_corpus(&corpus, &serial).unwrap();
    assert_eq!(report.to_json(), serial_report.to_json());
}

#[test]
fn corpus_isolates_corrupt_songs() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    for stem in ["good1", "good2"] {
        write_corpus_song(&corpus, stem, 16, 8, 32000);
    }
    // A corrupt WAV plus its (valid) side files.
    fs::write(corpus.join("audio").join("bad.wav"), b"not a wav at all").unwrap();
    fs::write(corpus.join("bars").join("bad.txt"), "0.0\n2.0\n").unwrap();
    fs::write(corpus.join("refs").join("bad.lab"), "0.0\t4.0\tA\n").unwrap();

    let config = quick_config(Mode::RawFeature);
    let report = harness::run_corpus(&corpus, &config).unwrap();
    assert_eq!(report.songs.len(), 2);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].song, "bad");
    assert!(report.failures[0].error.contains("[load-audio]"));

    // Empty corpus is an error.
    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("audio")).unwrap();
    assert!(harness::run_corpus(&empty, &config).is_err());
}

#[test]
fn best_of_refs_takes_better_annotation() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let song = write_corpus_song(&corpus, "s1", 16, 8, 32000);

    // An alternate, clearly wrong annotation.
    fs::write(
        corpus.join("refs").join("s1.2.lab"),
        "0.0\t5.5\tX\n5.5\t13.0\tY\n13.0\t32.0\tZ\n",
    )
    .unwrap();

    let mut config = quick_config(Mode::RawFeature);
    config.best_of_refs = true;
    let report = harness::run_corpus(&corpus, &config).unwrap();
    // The correct annotation wins: F at the large window is 1.
    assert_eq!(report.songs[0].scores[1].f_measure, 1.0);

    // Sanity: the wrong annotation alone scores worse.
    fs::copy(
        corpus.join("refs").join("s1.2.lab"),
        corpus.join("refs").join("s1.lab"),
    )
    .unwrap();
    fs::remove_file(corpus.join("refs").join("s1.2.lab")).unwrap();
    config.best_of_refs = false;
    let worse = harness::run_corpus(&corpus, &config).unwrap();
    assert!(worse.songs[0].scores[1].f_measure < 1.0);
    let _ = song;
}

#[test]
fn sweep_rows_match_independent_corpus_runs() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    for stem in ["s1", "s2"] {
        write_corpus_song(&corpus, stem, 16, 8, 32000);
    }
    let mut config = quick_config(Mode::Latent);
    config.train.max_epochs = 25;

    let table = harness::sweep_latent(&corpus, &config, &[4, 8]).unwrap();
    assert_eq!(table.rows.len(), 2);
    for row in &table.rows {
        assert!(row.mean_f.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    // Compositional check: each row equals a corpus run at those settings.
    let mut at8 = config.clone();
    at8.latent_dim = 8;
    let direct = harness::run_corpus(&corpus, &at8).unwrap();
    let expected: Vec<f64> = direct.means.iter().map(|m| m.f_measure).collect();
    assert_eq!(table.rows[1].mean_f, expected);
}

#[test]
fn figures_export_writes_expected_files() {
    let dir = tempdir().unwrap();
    let song = write_aabb_song(dir.path(), "aabb", 16, 8, 32000);
    let mut config = quick_config(Mode::Latent);
    config.latent_dim = 4;
    config.train.max_epochs = 15;
    let analysis = harness::analyze_song(&song.wav, &song.bars, None, &config).unwrap();

    let out = dir.path().join("figs");
    let written = harness::export_figures(&analysis, &out).unwrap();
    let names: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for expected in [
        "raw_autosimilarity.pgm",
        "raw_autosimilarity.svg",
        "raw_autosimilarity.csv",
        "latent_autosimilarity.pgm",
        "latent_autosimilarity.svg",
        "latent_autosimilarity.csv",
        "loss_curve.csv",
    ] {
        assert!(names.contains(&expected.to_string()), "{expected} missing");
        assert!(out.join(expected).exists());
    }

    // The loss curve has one row per trained epoch plus the header.
    let curve = fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    let epochs = analysis.train_report.as_ref().unwrap().loss_history.len();
    assert_eq!(curve.lines().count(), epochs + 1);
}
