use crate::geometry::{CameraPose, Intrinsics};
use crate::net::DescriptorSet;

/// Per-descriptor supervision: world coordinate and 0/1 reliability flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabels {
    pub coords: Vec<[f32; 3]>,
    /// `z_i`; coordinates of rows with `false` are ignored by every loss.
    pub reliable: Vec<bool>,
}

impl FrameLabels {
    pub fn reliable_count(&self) -> usize {
        self.reliable.iter().filter(|&&z| z).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub pose: CameraPose<f64>,
    pub intrinsics: Intrinsics<f64>,
}

/// One image: descriptors and keypoints, optional labels and camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub descriptors: DescriptorSet,
    pub labels: Option<FrameLabels>,
    pub camera: Option<Camera>,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Copy without labels or camera, as an unlabeled observation is stored.
    pub fn stripped(&self) -> Frame {
        Frame {
            descriptors: self.descriptors.clone(),
            labels: None,
            camera: None,
        }
    }
}
