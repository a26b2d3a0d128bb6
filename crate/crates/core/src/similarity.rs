//! Barwise autosimilarity matrices.
//!
//! Columns (one per bar) are scaled to unit norm and the Gram matrix of dot
//! products is formed, so every entry is the cosine similarity between two
//! bars and the diagonal is 1. Works on latent vectors from the autoencoder
//! or on flattened raw barwise features.

use crate::barwise::BarTensor;
use ndarray::{Array2, ArrayView2};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("matrix contains a non-finite value")]
    NonFinite,
    #[error("need at least 2 bars, got {0}")]
    TooFewBars(usize),
    #[error("autosimilarity must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    Latent,
    RawFeature,
}

/// Latent vectors of a whole song: `d_ls x B`, one column per bar.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    z: Array2<f64>,
}

impl LatentMatrix {
    pub fn new(z: Array2<f64>) -> Result<Self, SimilarityError> {
        if z.ncols() < 2 {
            return Err(SimilarityError::TooFewBars(z.ncols()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite);
        }
        Ok(Self { z })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn latent_dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn num_bars(&self) -> usize {
        self.z.ncols()
    }
}

/// `B x B` matrix of pairwise bar similarities. Symmetric by construction;
/// in normalized form entries lie in [-1, 1] and the diagonal is exactly 1
/// for non-zero bars (0 for all-zero bars).
#[derive(Debug, Clone, PartialEq)]
pub struct Autosimilarity {
    matrix: Array2<f64>,
    source: SimilaritySource,
}

impl Autosimilarity {
    /// Wrap an existing square matrix (tests, file import).
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self, SimilarityError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(SimilarityError::NotSquare {
                rows: matrix.nrows(),
                cols: matrix.ncols(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite);
        }
        Ok(Self {
            matrix,
            source: SimilaritySource::RawFeature,
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn num_bars(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn source(&self) -> SimilaritySource {
        self.source
    }
}

fn gram(z: ArrayView2<'_, f64>, normalize: bool, source: SimilaritySource) -> Autosimilarity {
    let b = z.ncols();
    let cols: Vec<Vec<f64>> = (0..b)
        .map(|j| {
            let col: Vec<f64> = z.column(j).iter().cloned().collect();
            if normalize {
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    return col.iter().map(|v| v / norm).collect();
                }
            }
            col
        })
        .collect();

    let mut m = Array2::zeros((b, b));
    for i in 0..b {
        for j in i..b {
            let mut dot = 0.0;
            for (x, y) in cols[i].iter().zip(&cols[j]) {
                dot += x * y;
            }
            if normalize {
                dot = dot.clamp(-1.0, 1.0);
            }
            m[[i, j]] = dot;
            m[[j, i]] = dot;
        }
        if normalize {
            // Exact self-similarity: 1 for non-zero bars, 0 for zero bars.
            let nonzero = cols[i].iter().any(|&v| v != 0.0);
            m[[i, i]] = if nonzero { 1.0 } else { 0.0 };
        }
    }
    Autosimilarity { matrix: m, source }
}

/// Autosimilarity of a latent (or any `d x B`) matrix. With `normalize` set
/// (the default pipeline mode) columns are scaled to unit norm first, so the
/// result is the cosine Gram matrix; zero columns are left zero.
pub fn autosimilarity(z: ArrayView2<'_, f64>, normalize: bool) -> Result<Autosimilarity, SimilarityError> {
    if z.ncols() < 2 {
        return Err(SimilarityError::TooFewBars(z.ncols()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(SimilarityError::NonFinite);
    }
    Ok(gram(z, normalize, SimilaritySource::Latent))
}

/// Cosine autosimilarity of raw barwise features: each bar flattens to a
/// `96 * F` vector.
pub fn raw_feature_autosimilarity(tensor: &BarTensor) -> Result<Autosimilarity, SimilarityError> {
    let b = tensor.num_bars();
    if b < 2 {
        return Err(SimilarityError::TooFewBars(b));
    }
    let flat_len = tensor.frames_per_bar() * tensor.feature_dim();
    let mut z = Array2::zeros((flat_len, b));
    for bar in 0..b {
        for (i, v) in tensor.bars().index_axis(ndarray::Axis(0), bar).iter().enumerate() {
            z[[i, bar]] = *v;
        }
    }
    let mut a = gram(z.view(), true, SimilaritySource::RawFeature);
    a.source = SimilaritySource::RawFeature;
    Ok(a)
}
