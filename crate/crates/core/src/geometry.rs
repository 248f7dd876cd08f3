//! Rigid poses, pinhole projection and pose-error metrics.
//!
//! Poses map world to camera: `y_cam = R * y_world + t`. The camera centre is
//! always derived as `-R^T t`, never stored.

use nalgebra::{convert, Matrix3, Matrix4, RealField, Rotation3, Vector2, Vector3, Vector4};
use thiserror::Error;

/// Minimum camera-frame depth for a valid projection.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point at camera depth {0} is behind or on the image plane")]
    NonPositiveDepth(f64),
    #[error("rotation is not orthonormal with determinant +1 (deviation {0:e})")]
    NotARotation(f64),
    #[error("focal lengths must be positive, got fx={fx} fy={fy}")]
    BadIntrinsics { fx: f64, fy: f64 },
}

fn tolerance<T: RealField + Copy>() -> T {
    let floor: T = convert(1e-9);
    let scaled = T::default_epsilon() * convert(1e3);
    if scaled > floor {
        scaled
    } else {
        floor
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose<T: RealField + Copy> {
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

impl<T: RealField + Copy> CameraPose<T> {
    /// Validates `R^T R = I` and `det R = +1` within tolerance.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = (rotation.determinant() - T::one()).abs();
        let dev = if ortho > det { ortho } else { det };
        if !(dev <= tolerance::<T>()) {
            return Err(GeometryError::NotARotation(nalgebra::try_convert(dev).unwrap_or(f64::NAN)));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rotation(rotation: Rotation3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    /// Rotation from an axis-angle vector (radians), followed by `t`.
    pub fn from_axis_angle(axis_angle: Vector3<T>, translation: Vector3<T>) -> Self {
        Self::from_rotation(Rotation3::new(axis_angle), translation)
    }

    /// Camera at `center` with its optical axis towards `target`; image y points
    /// roughly along `-up`.
    pub fn look_at(center: Vector3<T>, target: Vector3<T>, up: Vector3<T>) -> Self {
        let z = (target - center).normalize();
        let mut x = z.cross(&up);
        if x.norm() < convert(1e-9) {
            x = z.cross(&Vector3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    /// Camera centre in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    /// 4x4 homogeneous world-to-camera matrix.
    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Applies a left-multiplied perturbation `exp(w) * R`, `t + dt`.
    pub fn perturbed(&self, w: &Vector3<T>, dt: &Vector3<T>) -> Self {
        Self {
            rotation: Rotation3::new(*w).into_inner() * self.rotation,
            translation: self.translation + dt,
        }
    }

    /// Row-major `R` followed by `t`.
    pub fn to_array(&self) -> [T; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t[0], t[1], t[2],
        ]
    }

    pub fn from_array(v: &[T; 12]) -> Result<Self, GeometryError> {
        let r = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(r, Vector3::new(v[9], v[10], v[11]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: RealField + Copy> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Result<Self, GeometryError> {
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(GeometryError::BadIntrinsics {
                fx: nalgebra::try_convert(fx).unwrap_or(f64::NAN),
                fy: nalgebra::try_convert(fy).unwrap_or(f64::NAN),
            });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Pixel of a camera-frame point.
    pub fn project_camera(&self, p: &Vector3<T>) -> Result<Vector2<T>, GeometryError> {
        if !(p.z > convert(DEPTH_EPSILON)) {
            return Err(GeometryError::NonPositiveDepth(nalgebra::try_convert(p.z).unwrap_or(f64::NAN)));
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Camera-frame point seen at `pixel` with depth `depth`.
    pub fn unproject(&self, pixel: &Vector2<T>, depth: T) -> Vector3<T> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Unit-depth bearing `((u - cx) / fx, (v - cy) / fy, 1)`.
    pub fn normalized(&self, pixel: &Vector2<T>) -> Vector3<T> {
        self.unproject(pixel, T::one())
    }
}

/// `R * y + t`.
pub fn transform_to_camera<T: RealField + Copy>(pose: &CameraPose<T>, world_point: &Vector3<T>) -> Vector3<T> {
    pose.rotation * world_point + pose.translation
}

/// Inverse of [`transform_to_camera`].
pub fn transform_to_world<T: RealField + Copy>(pose: &CameraPose<T>, camera_point: &Vector3<T>) -> Vector3<T> {
    pose.rotation.transpose() * (camera_point - pose.translation)
}

pub fn project<T: RealField + Copy>(
    pose: &CameraPose<T>,
    k: &Intrinsics<T>,
    world_point: &Vector3<T>,
) -> Result<Vector2<T>, GeometryError> {
    k.project_camera(&transform_to_camera(pose, world_point))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError<T> {
    /// distance between camera centres (scene units)
    pub translation_error: T,
    /// geodesic rotation distance (degrees)
    pub rotation_error: T,
}

/// Geodesic angle between two rotations in degrees. Uses `atan2` of the
/// skew and trace parts so tiny angles keep full precision.
pub fn rotation_angle_deg<T: RealField + Copy>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    let rel = a * b.transpose();
    let half: T = convert(0.5);
    let cos = (rel.trace() - T::one()) * half;
    let sin = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    )
    .norm()
        * half;
    sin.atan2(cos) * convert::<f64, T>(180.0 / std::f64::consts::PI)
}

pub fn pose_error<T: RealField + Copy>(estimate: &CameraPose<T>, truth: &CameraPose<T>) -> PoseError<T> {
    PoseError {
        translation_error: (estimate.center() - truth.center()).norm(),
        rotation_error: rotation_angle_deg(estimate.rotation(), truth.rotation()),
    }
}

/// Homogeneous-coordinate route for [`transform_to_camera`].
pub fn transform_homogeneous<T: RealField + Copy>(pose: &CameraPose<T>, p: &Vector3<T>) -> Vector3<T> {
    let h = pose.to_homogeneous() * Vector4::new(p.x, p.y, p.z, T::one());
    Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn k100() -> Intrinsics<f64> {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()
    }

    #[test]
    fn project_examples() {
        let id = CameraPose::<f64>::identity();
        assert_eq!(project(&id, &k100(), &Vector3::new(0.0, 0.0, 2.0)).unwrap(), Vector2::new(50.0, 50.0));
        assert_eq!(project(&id, &k100(), &Vector3::new(1.0, 0.0, 2.0)).unwrap(), Vector2::new(100.0, 50.0));
        assert!(matches!(
            project(&id, &k100(), &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(project(&id, &k100(), &Vector3::new(0.0, 0.0, 1e-7)).is_err());
    }

    #[test]
    fn transform_examples() {
        let id = CameraPose::<f64>::identity();
        assert_eq!(transform_to_camera(&id, &Vector3::new(1.0, 2.0, 3.0)), Vector3::new(1.0, 2.0, 3.0));
        let rz = CameraPose::from_axis_angle(Vector3::new(0.0, 0.0, PI / 2.0), Vector3::zeros());
        let p = transform_to_camera(&rz, &Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn pose_error_examples() {
        let a = CameraPose::<f64>::from_axis_angle(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let e = pose_error(&a, &a);
        assert_eq!(e.translation_error, 0.0);
        assert!(e.rotation_error < 1e-5);

        let shifted = CameraPose::<f64>::new(*a.rotation(), a.translation() - a.rotation() * Vector3::new(0.05, 0.0, 0.0)).unwrap();
        let e = pose_error(&shifted, &a);
        assert!((e.translation_error - 0.05).abs() < 1e-12);

        for axis in [Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, -1.0).normalize()] {
            let b = CameraPose::from_axis_angle(axis * PI, Vector3::zeros());
            let e = pose_error(&b, &CameraPose::identity());
            assert!((e.rotation_error - 180.0).abs() < 1e-6, "{}", e.rotation_error);
            assert!(e.rotation_error <= 180.0);
        }
    }

    #[test]
    fn rejects_non_rotations() {
        let mut r = Matrix3::<f64>::identity();
        r[(0, 0)] = -1.0;
        assert!(CameraPose::new(r, Vector3::zeros()).is_err());
        assert!(CameraPose::new(Matrix3::identity() * 1.001, Vector3::zeros()).is_err());
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn look_at_points_axis_at_target() {
        let c = Vector3::<f64>::new(3.0, 1.0, -2.0);
        let pose = CameraPose::<f64>::look_at(c, Vector3::zeros(), Vector3::z());
        assert!((pose.center() - c).norm() < 1e-12);
        let target_cam = transform_to_camera(&pose, &Vector3::zeros());
        assert!(target_cam.x.abs() < 1e-12 && target_cam.y.abs() < 1e-12 && target_cam.z > 0.0);
        assert!(CameraPose::new(*pose.rotation(), *pose.translation()).is_ok());
    }

    fn arb_pose() -> impl Strategy<Value = CameraPose<f64>> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-5.0..5.0f64))
            .prop_map(|(w, t)| CameraPose::from_axis_angle(Vector3::from(w), Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn unproject_reproject_round_trip(pose in arb_pose(), u in 0.0..640.0f64, v in 0.0..480.0f64, depth in 0.1..50.0f64) {
            let k = Intrinsics::new(500.0, 480.0, 320.0, 240.0).unwrap();
            let cam = k.unproject(&Vector2::new(u, v), depth);
            let world = transform_to_world(&pose, &cam);
            let px = project(&pose, &k, &world).unwrap();
            prop_assert!((px - Vector2::new(u, v)).norm() < 1e-9);
        }

        #[test]
        fn homogeneous_oracle_agrees(pose in arb_pose(), p in prop::array::uniform3(-10.0..10.0f64)) {
            let p = Vector3::from(p);
            let a = transform_to_camera(&pose, &p);
            let b = transform_homogeneous(&pose, &p);
            prop_assert!((a - b).norm() < 1e-12);
        }

        #[test]
        fn rotation_error_symmetric(a in arb_pose(), b in arb_pose()) {
            let ab = pose_error(&a, &b).rotation_error;
            let ba = pose_error(&b, &a).rotation_error;
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
        }

        #[test]
        fn small_perturbations_scale_linearly(pose in arb_pose(), dir in prop::array::uniform3(-1.0..1.0f64)) {
            let dir = Vector3::from(dir);
            prop_assume!(dir.norm() > 0.1);
            let dir = dir.normalize();
            let e1 = pose_error(&pose.perturbed(&(dir * 1e-4), &(dir * 1e-4)), &pose);
            let e2 = pose_error(&pose.perturbed(&(dir * 2e-4), &(dir * 2e-4)), &pose);
            prop_assert!((e2.rotation_error / e1.rotation_error - 2.0).abs() < 1e-3);
            prop_assert!((e2.translation_error / e1.translation_error - 2.0).abs() < 1e-3);
        }
    }
}
