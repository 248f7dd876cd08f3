use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::frame::{Frame, FrameLabels};
use crate::pseudo_label::{transfer_labels, MIN_VALID};

/// Perturbations applied to a labeled frame before its labels are re-derived
/// by matching against the original.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise per descriptor component.
    pub descriptor_sigma: f64,
    pub warp_probability: f64,
    /// Largest inward corner displacement as a fraction of the half image size.
    pub warp_scale: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            descriptor_sigma: 0.05,
            warp_probability: 0.3,
            warp_scale: 0.4,
            image_width: 640.0,
            image_height: 480.0,
        }
    }
}

/// Homography taking `src[i]` to `dst[i]` for four point pairs.
pub fn homography_from_corners(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        let r = 2 * i;
        a.set_row(r, &SMatrix::<f64, 1, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(r + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

fn apply_homography(h: &Matrix3<f64>, p: [f32; 2]) -> [f32; 2] {
    let q = h * Vector3::new(p[0] as f64, p[1] as f64, 1.0);
    [(q.x / q.z) as f32, (q.y / q.z) as f32]
}

/// A random perspective warp: each image corner moves inward by up to
/// `scale` of the half width and half height.
pub fn random_warp<R: Rng + ?Sized>(config: &AugmentConfig, rng: &mut R) -> Option<Matrix3<f64>> {
    let (w, h) = (config.image_width, config.image_height);
    let (dx, dy) = (config.warp_scale * w / 2.0, config.warp_scale * h / 2.0);
    let mut jitter = |limit: f64| if limit > 0.0 { rng.random_range(0.0..=limit) } else { 0.0 };
    let src = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    let dst = [
        [jitter(dx), jitter(dy)],
        [w - jitter(dx), jitter(dy)],
        [w - jitter(dx), h - jitter(dy)],
        [jitter(dx), h - jitter(dy)],
    ];
    homography_from_corners(&src, &dst)
}

/// Perturbs a labeled frame and transfers its labels to the perturbed copy by
/// descriptor matching. Warped frames lose their camera since their keypoints
/// no longer follow the pose. Returns `None` when fewer than the admission
/// threshold of descriptors receive a label.
pub fn augment_frame<R: Rng + ?Sized>(frame: &Frame, config: &AugmentConfig, rng: &mut R) -> Option<Frame> {
    frame.labels.as_ref()?;
    let mut descriptors = frame.descriptors.clone();
    if config.descriptor_sigma > 0.0 {
        let noise = Normal::new(0.0, config.descriptor_sigma).ok()?;
        for x in descriptors.descriptors_mut() {
            *x += noise.sample(rng) as f32;
        }
    }
    let mut camera = frame.camera;
    if config.warp_probability > 0.0 && rng.random_bool(config.warp_probability.min(1.0)) {
        if let Some(h) = random_warp(config, rng) {
            for kp in descriptors.keypoints_mut() {
                *kp = apply_homography(&h, *kp);
            }
            camera = None;
        }
    }
    let transferred = transfer_labels(&descriptors, &[frame]);
    if transferred.s < MIN_VALID {
        return None;
    }
    Some(Frame {
        descriptors,
        labels: Some(FrameLabels {
            coords: transferred.coords,
            reliable: transferred.valid,
        }),
        camera,
    })
}
