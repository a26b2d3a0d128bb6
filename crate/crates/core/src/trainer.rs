//! Per-song optimization loop: Adam with bias correction, a
//! reduce-on-plateau learning-rate schedule, early stopping and shuffled
//! mini-batches.
//!
//! Training is deterministic: the shuffle order is reseeded every epoch from
//! a master stream, batches reduce per-bar gradients in a fixed order, and
//! the same seed and tensor reproduce bit-identical parameters and report.

use crate::ae::{
    self, AEConfig, AEParams, Gradients, Real,
};
use crate::barwise::BarTensor;
use crate::similarity::LatentMatrix;
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 2 bars to train, got {0}")]
    TooFewBars(usize),
    #[error("tensor feature dim {tensor} does not match network feature dim {network}")]
    FeatureDimMismatch { tensor: usize, network: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("parameter/gradient shape mismatch in {0}")]
    GradientShape(&'static str),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        partial_report: TrainReport,
    },
    #[error(transparent)]
    Network(#[from] ae::AEError),
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    /// Epochs without best-loss improvement before the LR drops.
    pub plateau_patience: usize,
    pub lr_divisor: f64,
    /// Epochs without best-loss improvement before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_min: 1e-5,
            plateau_patience: 20,
            lr_divisor: 10.0,
            early_stop_patience: 100,
            max_epochs: 1000,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

/// Adam moment estimates, one tensor pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub first_moment: Gradients<T>,
    pub second_moment: Gradients<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: &AEConfig) -> Self {
        Self {
            first_moment: Gradients::zeros(config),
            second_moment: Gradients::zeros(config),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, applied elementwise in place.
pub fn adam_step<T: Real>(
    params: &mut AEParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    for ((name, g), (_, p)) in grads.tensors().iter().zip(params.tensors()) {
        if g.len() != p.len() {
            return Err(TrainError::GradientShape(name));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(config.beta1).unwrap();
    let b2 = T::from_f64(config.beta2).unwrap();
    let one = T::one();
    let eps = T::from_f64(config.epsilon).unwrap();
    let lr_t = T::from_f64(lr).unwrap();
    // Bias corrections m_hat = m / (1 - b1^t), v_hat = v / (1 - b2^t).
    let c1 = T::from_f64(1.0 / (1.0 - config.beta1.powi(t))).unwrap();
    let c2 = T::from_f64(1.0 / (1.0 - config.beta2.powi(t))).unwrap();

    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(
            state
                .first_moment
                .tensors_mut()
                .into_iter()
                .zip(state.second_moment.tensors_mut()),
        )
    {
        for i in 0..p.len() {
            let grad = g[i];
            m[i] = b1 * m[i] + (one - b1) * grad;
            v[i] = b2 * v[i] + (one - b2) * grad * grad;
            p[i] = p[i] - lr_t * (m[i] * c1) / ((v[i] * c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Reduce-on-plateau schedule: when the running best loss has not strictly
/// improved for `patience` consecutive observations, divide the LR (down to
/// `lr_min`) and start counting afresh.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    lr_min: f64,
    divisor: f64,
    patience: usize,
    best: Option<f64>,
    stall: usize,
}

impl PlateauScheduler {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.lr0,
            lr_min: config.lr_min,
            divisor: config.lr_divisor,
            patience: config.plateau_patience,
            best: None,
            stall: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch loss; returns the LR to use from the next epoch on.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(best) if loss >= best => {
                self.stall += 1;
                if self.stall >= self.patience {
                    self.lr = (self.lr / self.divisor).max(self.lr_min);
                    self.stall = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.stall = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

/// Loss/LR trajectory of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch, in epoch order.
    pub loss_history: Vec<f64>,
    /// LR in effect during each epoch.
    pub lr_history: Vec<f64>,
    pub stop_reason: StopReason,
    /// 1-based epoch whose parameters are returned.
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Train a fresh network on the bars of one song; returns the parameters of
/// the best epoch and the loss trajectory.
pub fn train<T: Real>(
    tensor: &BarTensor,
    ae_config: &AEConfig,
    train_config: &TrainConfig,
) -> Result<(AEParams<T>, TrainReport), TrainError> {
    let num_bars = tensor.num_bars();
    if num_bars < 2 {
        return Err(TrainError::TooFewBars(num_bars));
    }
    if tensor.feature_dim() != ae_config.feature_dim {
        return Err(TrainError::FeatureDimMismatch {
            tensor: tensor.feature_dim(),
            network: ae_config.feature_dim,
        });
    }

    let f = ae_config.feature_dim;
    let frames = tensor.frames_per_bar();
    let bars: Array3<T> = tensor.bars().mapv(|v| T::from_f64(v).unwrap());

    let mut params: AEParams<T> = ae::init_kaiming(ae_config);
    let mut adam = AdamState::new(ae_config);
    let mut scheduler = PlateauScheduler::new(train_config);
    let mut master = ChaCha8Rng::seed_from_u64(train_config.seed);

    let mut loss_history = Vec::new();
    let mut lr_history = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();
    let mut stall = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;

    let mut indices: Vec<usize> = (0..num_bars).collect();
    let mut batch = Array3::<T>::zeros((train_config.batch_size.min(num_bars), frames, f));

    for epoch in 1..=train_config.max_epochs {
        // Fresh shuffle seed per epoch from the master stream.
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        indices.shuffle(&mut epoch_rng);

        let lr = scheduler.lr();
        let mut batch_losses = Vec::new();
        for chunk in indices.chunks(train_config.batch_size) {
            let n = chunk.len();
            for (row, &bar) in chunk.iter().enumerate() {
                batch
                    .index_axis_mut(Axis(0), row)
                    .assign(&bars.index_axis(Axis(0), bar));
            }
            let view = batch.slice(ndarray::s![..n, .., ..]);
            let pass = ae::forward(&params, view)?;
            let batch_loss = ae::loss(view, pass.reconstructions.view())?;
            batch_losses.push(batch_loss.to_f64().unwrap());
            let grads = ae::backward(&params, &pass.tapes, view)?;
            adam_step(&mut params, &grads, &mut adam, lr, train_config)?;
        }
        let epoch_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        loss_history.push(epoch_loss);
        lr_history.push(lr);

        if !epoch_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                partial_report: TrainReport {
                    loss_history,
                    lr_history,
                    stop_reason: StopReason::MaxEpochs,
                    best_epoch,
                    best_loss,
                },
            });
        }

        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best_epoch = epoch;
            best_params = params.clone();
            stall = 0;
        } else {
            stall += 1;
        }
        scheduler.observe(epoch_loss);
        if stall >= train_config.early_stop_patience {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    Ok((
        best_params,
        TrainReport {
            loss_history,
            lr_history,
            stop_reason,
            best_epoch,
            best_loss,
        },
    ))
}

/// Encode every bar of a song: `Z` is `d_ls x B`, column `b` the latent
/// vector of bar `b`.
pub fn encode_song<T: Real>(
    params: &AEParams<T>,
    tensor: &BarTensor,
) -> Result<LatentMatrix, TrainError> {
    if tensor.feature_dim() != params.feature_dim {
        return Err(TrainError::FeatureDimMismatch {
            tensor: tensor.feature_dim(),
            network: params.feature_dim,
        });
    }
    let bars: Array3<T> = tensor.bars().mapv(|v| T::from_f64(v).unwrap());
    let latents = ae::encode_bars(params, bars.view())?;
    let mut z = Array2::zeros((params.latent_dim, tensor.num_bars()));
    for b in 0..tensor.num_bars() {
        for k in 0..params.latent_dim {
            z[[k, b]] = latents[[b, k]].to_f64().unwrap();
        }
    }
    LatentMatrix::new(z).map_err(|_| TrainError::NonFiniteGradient("latents"))
}
