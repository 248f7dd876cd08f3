//! Camera pose from 2D-3D correspondences: reliability filtering, P3P inside
//! RANSAC, Levenberg-Marquardt refinement.

mod p3p;
mod ransac;
mod refine;

pub use p3p::{p3p, solve_quartic};
pub use ransac::{ransac_pnp, reprojection_errors, PoseEstimate, RansacConfig};
pub use refine::{refine_lm, reprojection_cost, LmConfig};

use nalgebra::{RealField, Vector2, Vector3};
use thiserror::Error;

use crate::net::SceneCoordinateSet;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseSolverError {
    #[error("minimal sample is degenerate (collinear or repeated points)")]
    DegenerateSample,
    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("no hypothesis reached 4 inliers (best {0})")]
    NoConsensus(usize),
}

/// A pixel observation paired with a predicted world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence<T: RealField + Copy> {
    pub pixel: Vector2<T>,
    pub world: Vector3<T>,
    pub reliability: T,
}

impl<T: RealField + Copy> Correspondence<T> {
    pub fn new(pixel: Vector2<T>, world: Vector3<T>) -> Self {
        Self {
            pixel,
            world,
            reliability: T::one(),
        }
    }
}

/// Correspondences whose reliability is at least `threshold`, in input order.
pub fn filter_reliable<S: Scalar>(
    coords: &SceneCoordinateSet<S>,
    keypoints: &[[f32; 2]],
    threshold: f64,
) -> Vec<Correspondence<f64>> {
    coords
        .coords
        .iter()
        .zip(&coords.reliability)
        .zip(keypoints)
        .filter(|((_, z), _)| z.as_f64() >= threshold)
        .map(|((c, z), kp)| Correspondence {
            pixel: Vector2::new(kp[0] as f64, kp[1] as f64),
            world: Vector3::new(c[0].as_f64(), c[1].as_f64(), c[2].as_f64()),
            reliability: z.as_f64(),
        })
        .collect()
}

/// Every prediction as a correspondence, ignoring reliability.
pub fn all_correspondences<S: Scalar>(coords: &SceneCoordinateSet<S>, keypoints: &[[f32; 2]]) -> Vec<Correspondence<f64>> {
    filter_reliable(coords, keypoints, f64::NEG_INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(z: &[f32]) -> SceneCoordinateSet<f32> {
        SceneCoordinateSet {
            coords: z.iter().enumerate().map(|(i, _)| [i as f32, 0.0, 1.0]).collect(),
            raw_p: vec![0.0; z.len()],
            reliability: z.to_vec(),
        }
    }

    #[test]
    fn all_kept_at_full_reliability() {
        let kp = vec![[1.0, 2.0]; 4];
        assert_eq!(filter_reliable(&set(&[1.0; 4]), &kp, 0.5).len(), 4);
        assert_eq!(filter_reliable(&set(&[1.0; 4]), &kp, 1.0).len(), 4);
    }

    #[test]
    fn boundary_is_inclusive_and_order_preserved() {
        let kp = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let kept = filter_reliable(&set(&[0.9, 0.5, 0.49]), &kp, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].world.x, 0.0);
        assert_eq!(kept[1].world.x, 1.0);
        assert_eq!(kept[1].pixel, Vector2::new(1.0, 0.0));
    }
}
