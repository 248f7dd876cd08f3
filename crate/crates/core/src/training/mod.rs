//! Losses, the two-stage schedule, the pseudo-label update and augmentation.

mod augment;
mod loss;

pub use augment::{augment_frame, homography_from_corners, random_warp, AugmentConfig};
pub use loss::{
    batch_terms, loss_m, loss_r, loss_u, total_loss, total_loss_on_tape, LossTerms, LossWeights, Normalization,
};

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{Adam, AdamConfig, DiffError, Tape};
use crate::frame::Frame;
use crate::net::{ModelParams, NetError};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("frame {0} has no labels")]
    MissingLabels(usize),
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("loss became non-finite at {stage} iteration {iteration}")]
    NonFinite { stage: Stage, iteration: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Update,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
            Stage::Update => "update",
        })
    }
}

/// Number of equal parts of stage 1 after each of which the learning rate decays.
pub const DECAY_INTERVALS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub update_iters: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_update: f64,
    /// Factor applied to the stage-1 rate after every quarter of stage 1.
    pub lr_decay: f64,
    pub beta: f64,
    pub normalization: Normalization,
    pub augment: bool,
    pub augment_config: AugmentConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            stage1_iters: 300_000,
            stage2_iters: 100_000,
            update_iters: 50_000,
            lr_stage1: 1e-4,
            lr_stage2: 1e-5,
            lr_update: 1e-5,
            lr_decay: 0.5,
            beta: 100.0,
            normalization: Normalization::Frames,
            augment: true,
            augment_config: AugmentConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Shortened schedule for the synthetic desk-scale scene. The small
    /// network needs ten times the default training rates to converge in 20K
    /// steps; the update keeps the default rate.
    pub fn desk() -> Self {
        Self {
            stage1_iters: 20_000,
            stage2_iters: 5_000,
            update_iters: 2_500,
            lr_stage1: 1e-3,
            lr_stage2: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("lr_update", self.lr_update),
            ("lr_decay", self.lr_decay),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(TrainError::BadConfig(format!("{name} must be finite and nonnegative, got {lr}")));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(TrainError::BadConfig(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Learning rate of stage-1 iteration `it`.
    pub fn stage1_lr(&self, it: usize) -> f64 {
        let interval = (it * DECAY_INTERVALS / self.stage1_iters.max(1)).min(DECAY_INTERVALS - 1);
        self.lr_stage1 * self.lr_decay.powi(interval as i32)
    }
}

/// Reported after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub stage: Stage,
    pub iteration: usize,
    pub total_iterations: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Parameters, optimizer state and the batch sampler of one training run.
pub struct Trainer<T: Scalar> {
    params: ModelParams<T>,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    config: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(params: ModelParams<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if params.config().beta != config.beta {
            return Err(TrainError::BadConfig(format!(
                "training beta {} differs from the model's {}",
                config.beta,
                params.config().beta
            )));
        }
        let adam = Adam::new(config.adam, params.tensors());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            params,
            adam,
            rng,
            config,
        })
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.adam
    }

    /// Discards the optimizer moments.
    pub fn reset_optimizer(&mut self) {
        self.adam = Adam::new(self.config.adam, self.params.tensors());
    }

    /// One Adam step on `batch`. Returns the batch loss before the update.
    pub fn step(&mut self, batch: &[&Frame], weights: &LossWeights, lr: f64) -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, true);
        let loss = total_loss_on_tape(&mut tape, &self.params, &vars, batch, weights, self.config.normalization)?;
        let value = tape.scalar(loss).as_f64();
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss)?;
        self.params.accumulate_grads(&tape, &vars)?;
        self.adam.step(self.params.tensors_mut(), lr);
        Ok(value)
    }

    fn sample<'a>(&mut self, pool: &'a [Frame], count: usize, out: &mut Vec<Cow<'a, Frame>>) {
        for _ in 0..count {
            let frame = &pool[self.rng.random_range(0..pool.len())];
            let augmented = if self.config.augment {
                augment_frame(frame, &self.config.augment_config, &mut self.rng)
            } else {
                None
            };
            out.push(augmented.map_or(Cow::Borrowed(frame), Cow::Owned));
        }
    }

    fn run(
        &mut self,
        stage: Stage,
        iters: usize,
        weights: LossWeights,
        sources: &[(&[Frame], usize)],
        observer: &mut dyn FnMut(&Progress),
    ) -> Result<(), TrainError> {
        for it in 0..iters {
            let lr = match stage {
                Stage::One => self.config.stage1_lr(it),
                Stage::Two => self.config.lr_stage2,
                Stage::Update => self.config.lr_update,
            };
            let mut owned = Vec::with_capacity(self.config.batch_size);
            for &(pool, count) in sources {
                self.sample(pool, count, &mut owned);
            }
            let batch: Vec<&Frame> = owned.iter().map(|c| c.as_ref()).collect();
            let loss = self.step(&batch, &weights, lr)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { stage, iteration: it });
            }
            observer(&Progress {
                stage,
                iteration: it,
                total_iterations: iters,
                loss,
                lr,
            });
        }
        Ok(())
    }
}

fn check_labeled(frames: &[Frame]) -> Result<(), TrainError> {
    if frames.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    match frames.iter().position(|f| f.labels.is_none()) {
        Some(i) => Err(TrainError::MissingLabels(i)),
        None => Ok(()),
    }
}

/// Two-stage training from `init`: weights (1, 1, 0) with a decaying rate,
/// then (1, 1, 10) at a fixed rate. Batches are drawn uniformly with
/// replacement.
pub fn train<T: Scalar>(init: ModelParams<T>, dataset: &[Frame], config: &TrainConfig) -> Result<ModelParams<T>, TrainError> {
    train_with(init, dataset, config, &mut |_| {})
}

pub fn train_with<T: Scalar>(
    init: ModelParams<T>,
    dataset: &[Frame],
    config: &TrainConfig,
    observer: &mut dyn FnMut(&Progress),
) -> Result<ModelParams<T>, TrainError> {
    check_labeled(dataset)?;
    let mut trainer = Trainer::new(init, config.clone())?;
    let sources = [(dataset, config.batch_size)];
    trainer.run(Stage::One, config.stage1_iters, LossWeights::STAGE1, &sources, observer)?;
    trainer.run(Stage::Two, config.stage2_iters, LossWeights::STAGE2, &sources, observer)?;
    Ok(trainer.into_params())
}

/// Frames per batch drawn from the labeled and pseudo-labeled sets.
pub fn update_split(batch_size: usize) -> (usize, usize) {
    (batch_size.div_ceil(2), batch_size / 2)
}

/// Continues training with weights (1, 1, 1) on batches that are half labeled
/// and half pseudo-labeled frames, starting from fresh optimizer moments.
pub fn update_with_pseudo<T: Scalar>(
    params: ModelParams<T>,
    labeled: &[Frame],
    pseudo: &[Frame],
    config: &TrainConfig,
) -> Result<ModelParams<T>, TrainError> {
    update_with_pseudo_with(params, labeled, pseudo, config, &mut |_| {})
}

pub fn update_with_pseudo_with<T: Scalar>(
    params: ModelParams<T>,
    labeled: &[Frame],
    pseudo: &[Frame],
    config: &TrainConfig,
    observer: &mut dyn FnMut(&Progress),
) -> Result<ModelParams<T>, TrainError> {
    check_labeled(labeled)?;
    check_labeled(pseudo)?;
    let mut trainer = Trainer::new(params, config.clone())?;
    let (n_labeled, n_pseudo) = update_split(config.batch_size);
    let sources = [(labeled, n_labeled), (pseudo, n_pseudo)];
    trainer.run(Stage::Update, config.update_iters, LossWeights::UPDATE, &sources, observer)?;
    Ok(trainer.into_params())
}
