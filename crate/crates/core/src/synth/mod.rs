//! Synthetic scenes with exact ground truth, and the evaluation harness.
//!
//! Descriptors are latent codes rather than image patches: each static point
//! owns a code, every observation adds Gaussian noise to it, and unreliable
//! points draw a fresh random code for every frame.

mod eval;
mod scene;

pub use eval::{evaluate, evaluate_predictions, EvalConfig, EvalReport, FrameRecord, CURVE_SAMPLES};
pub use scene::{
    generate_scene, generate_scene_with, make_dataset, render_frame, Dataset, Layout, RenderConfig, RenderedFrame,
    SceneConfig, SyntheticScene, Trajectory, TrajectorySpec,
};

use thiserror::Error;

use crate::net::{NetConfig, NetError};
use crate::training::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    BadConfig(String),
    #[error("only {visible} reliable points visible, need at least {required}")]
    InsufficientVisibility { visible: usize, required: usize },
    #[error("frame {0} has no camera")]
    MissingCamera(usize),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Everything needed to regenerate one synthetic experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub scene: SceneConfig,
    pub render: RenderConfig,
    pub trajectory: TrajectorySpec,
    /// Norm of the descriptor offset added to test and unlabeled frames.
    pub shift: f64,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Preset {
    /// 200 points in a box, 64-d codes, 30% unreliable, 100/50/50 frames.
    pub fn desk() -> Self {
        Self {
            scene: SceneConfig::desk(),
            render: RenderConfig::default(),
            trajectory: TrajectorySpec::orbit(100, 50, 50),
            shift: 0.0,
            net: NetConfig::desk(64),
            train: TrainConfig::desk(),
        }
    }

    /// Corridor scene with repeated codes, 60% unreliable points and doubled
    /// descriptor noise. A single descriptor cannot tell which part of the
    /// corridor it came from; the other descriptors of the frame can.
    pub fn hard() -> Self {
        Self {
            scene: SceneConfig::corridor(),
            render: RenderConfig {
                descriptor_noise_sigma: 0.1,
                ..RenderConfig::default()
            },
            trajectory: TrajectorySpec::corridor(100, 50, 50),
            shift: 0.0,
            net: NetConfig::desk(64),
            train: TrainConfig::desk(),
        }
    }

    /// The desk preset with a descriptor offset on test and unlabeled frames.
    pub fn shifted(shift: f64) -> Self {
        Self {
            shift,
            ..Self::desk()
        }
    }

    pub fn build(&self) -> Result<(SyntheticScene, Dataset), SynthError> {
        let scene = generate_scene_with(&self.scene)?;
        let data = make_dataset(&scene, &self.trajectory, &self.render, self.shift)?;
        Ok((scene, data))
    }
}
