//! Noise corruption, patch sampling, MSE loss, Adam, the training loop and a
//! finite-difference gradient check.

mod adam;
mod gradcheck;
mod loss;
mod noise;
mod patches;

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::{evaluate_image, noise_seed, EvalError};
use crate::imageio::GrayImage;
use crate::model::{
    build_flashlight, initialize, ArchConfig, CheckpointError, Mode, ModelError, ModelGraph,
};
use crate::tensor::{Scalar, TensorError};

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use gradcheck::{
    check_graph_gradients, shift_invariant_params, gradient_check, GradCheckReport, GRADCHECK_SAMPLES,
};
pub use loss::mse_loss;
pub use noise::add_awgn;
pub use patches::sample_patches;

/// Smallest accepted training patch side.
pub const MIN_PATCH: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("noise level must be a non-negative number, got {0}")]
    NegativeSigma(f64),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("image {index} is {width}x{height}, smaller than the {patch}x{patch} patch")]
    ImageTooSmall {
        index: usize,
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("misaligned gradients: {0}")]
    MisalignedGradients(String),
    #[error("epoch {epoch} outside 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    /// Noise standard deviation on the 0-255 scale.
    pub sigma: f64,
    pub epochs: usize,
    /// Batches per epoch.
    pub epoch_length: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr_initial: f64,
    pub lr_drop_epoch: usize,
    pub lr_after: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchConfig::default(),
            sigma: 25.0,
            epochs: 55,
            epoch_length: 4096,
            batch_size: 64,
            patch_size: 64,
            lr_initial: 1e-3,
            lr_drop_epoch: 30,
            lr_after: 1e-4,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(TrainError::NegativeSigma(self.sigma));
        }
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epoch_length == 0 || self.batch_size == 0 {
            return bad("epoch length and batch size must be at least 1".into());
        }
        if self.patch_size < MIN_PATCH {
            return bad(format!("patch size {} is below {MIN_PATCH}", self.patch_size));
        }
        for (name, lr) in [("initial", self.lr_initial), ("after-drop", self.lr_after)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} learning rate {lr} is not a finite non-negative number"));
            }
        }
        Ok(())
    }

    /// Total optimizer steps.
    pub fn total_steps(&self) -> usize {
        self.epochs * self.epoch_length
    }
}

/// Two-level step schedule: `lr_initial` before `lr_drop_epoch`, `lr_after`
/// from it on.
pub fn lr_for_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    Ok(if epoch < cfg.lr_drop_epoch {
        cfg.lr_initial
    } else {
        cfg.lr_after
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub val_psnr: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,mean_loss,lr,val_psnr,wall_seconds";

impl TrainLog {
    /// CSV rendering. Losses and learning rates use the shortest exact
    /// decimal form. With `wall_clock` off the timing column is left empty so
    /// that seeded runs produce identical files.
    pub fn to_csv(&self, wall_clock: bool) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let val = r.val_psnr.map(|p| format!("{p:.4}")).unwrap_or_default();
            let wall = if wall_clock {
                format!("{:.3}", r.wall_seconds)
            } else {
                String::new()
            };
            let _ = writeln!(out, "{},{:?},{:?},{val},{wall}", r.epoch, r.mean_loss, r.lr);
        }
        out
    }
}

/// Mean PSNR of the network on `val` images corrupted with noise seeded per
/// image index.
pub fn validation_psnr<T: Scalar>(
    model: &ModelGraph<T>,
    val: &[GrayImage],
    sigma: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (i, img) in val.iter().enumerate() {
        let r = evaluate_image(model, img, sigma, noise_seed(seed, &format!("val-{i}")))?;
        total += r.psnr;
    }
    Ok(total / val.len() as f64)
}

pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_corpus: &[GrayImage],
    val_corpus: &[GrayImage],
) -> Result<(ModelGraph<T>, TrainLog), TrainError> {
    train_with_observer(cfg, train_corpus, val_corpus, |_, _| Ok(()))
}

/// Training loop. Weights are initialized from `seed`; patches and noise
/// come from an independent stream of the same seed. `on_epoch` runs after
/// every epoch (e.g. to write a checkpoint). An empty `val_corpus`
/// disables validation.
pub fn train_with_observer<T, F>(
    cfg: &TrainConfig,
    train_corpus: &[GrayImage],
    val_corpus: &[GrayImage],
    mut on_epoch: F,
) -> Result<(ModelGraph<T>, TrainLog), TrainError>
where
    T: Scalar,
    F: FnMut(&EpochRow, &ModelGraph<T>) -> Result<(), TrainError>,
{
    cfg.validate()?;
    if train_corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut model = build_flashlight::<T>(cfg.arch);
    initialize(&mut model, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    model.sigma = Some(cfg.sigma);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);

    let mut state = AdamState::for_params(model.params());
    let mut log = TrainLog::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let lr = lr_for_epoch(epoch, cfg)?;
        let mut epoch_loss = 0.0;
        for step in 0..cfg.epoch_length {
            let clean = sample_patches::<T, _>(
                train_corpus,
                cfg.patch_size,
                cfg.batch_size,
                &mut data_rng,
                cfg.augment,
            )?;
            let noisy = add_awgn(&clean, cfg.sigma, &mut data_rng)?;
            let (y_hat, cache) = model.forward(&noisy, Mode::Train)?;
            let (loss, grad) = mse_loss(&y_hat, &clean)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step, loss });
            }
            let grads = model.backward(&cache, &grad)?;
            drop(cache);
            adam_step(model.params_mut(), &grads, &mut state, lr)?;
            log.step_losses.push(loss);
            epoch_loss += loss;
        }
        let val_psnr = if val_corpus.is_empty() {
            None
        } else {
            Some(validation_psnr(&model, val_corpus, cfg.sigma, cfg.seed)?)
        };
        let row = EpochRow {
            epoch,
            mean_loss: epoch_loss / cfg.epoch_length as f64,
            lr,
            val_psnr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row, &model)?;
        log.rows.push(row);
    }
    Ok((model, log))
}
