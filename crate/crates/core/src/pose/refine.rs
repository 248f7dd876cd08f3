use nalgebra::{convert, Matrix2x3, Matrix3, Matrix6, RealField, Vector3, Vector6};

use super::Correspondence;
use crate::geometry::{transform_to_camera, CameraPose, Intrinsics, DEPTH_EPSILON};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmConfig {
    pub max_iters: usize,
    pub step_tolerance: f64,
    pub cost_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            step_tolerance: 1e-10,
            cost_tolerance: 1e-12,
            initial_lambda: 1e-3,
        }
    }
}

/// Sum of squared pixel residuals; infinite if any point is not in front of
/// the camera.
pub fn reprojection_cost<T: RealField + Copy>(pose: &CameraPose<T>, corr: &[Correspondence<T>], k: &Intrinsics<T>) -> T {
    let mut cost = T::zero();
    for c in corr {
        match k.project_camera(&transform_to_camera(pose, &c.world)) {
            Ok(px) => cost += (px - c.pixel).norm_squared(),
            Err(_) => return T::max_value().unwrap_or_else(T::one),
        }
    }
    cost
}

fn skew<T: RealField + Copy>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(T::zero(), -v.z, v.y, v.z, T::zero(), -v.x, -v.y, v.x, T::zero())
}

/// Damped Gauss-Newton on `(w, dt)` with the update `R <- exp(w) R, t <- t + dt`.
/// Steps that raise the cost or push a point behind the camera are rejected,
/// so the returned pose never costs more than the input.
pub fn refine_lm<T: RealField + Copy>(
    pose: &CameraPose<T>,
    inliers: &[Correspondence<T>],
    k: &Intrinsics<T>,
    config: &LmConfig,
) -> CameraPose<T> {
    let mut current = *pose;
    let mut cost = reprojection_cost(&current, inliers, k);
    if inliers.len() < 3 || !cost.is_finite() {
        return current;
    }
    let depth_eps: T = convert(DEPTH_EPSILON);
    let step_tol: T = convert(config.step_tolerance);
    let cost_tol: T = convert(config.cost_tolerance);
    let mut lambda: T = convert(config.initial_lambda);
    let ten: T = convert(10.0);

    for _ in 0..config.max_iters {
        let mut jtj = Matrix6::<T>::zeros();
        let mut jtr = Vector6::<T>::zeros();
        for c in inliers {
            let ry = current.rotation() * c.world;
            let p = ry + current.translation();
            if p.z <= depth_eps {
                return current;
            }
            let iz = T::one() / p.z;
            let r = nalgebra::Vector2::new(k.fx * p.x * iz + k.cx - c.pixel.x, k.fy * p.y * iz + k.cy - c.pixel.y);
            let dproj = Matrix2x3::new(
                k.fx * iz,
                T::zero(),
                -k.fx * p.x * iz * iz,
                T::zero(),
                k.fy * iz,
                -k.fy * p.y * iz * iz,
            );
            let jw = dproj * -skew(&ry);
            let mut j = nalgebra::Matrix2x6::<T>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jw);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }

        let mut accepted = false;
        while lambda < convert(1e12) {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += lambda * (jtj[(d, d)] + convert(1e-12));
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&-jtr)) else {
                lambda *= ten;
                continue;
            };
            let w = Vector3::new(delta[0], delta[1], delta[2]);
            let dt = Vector3::new(delta[3], delta[4], delta[5]);
            let candidate = current.perturbed(&w, &dt);
            let new_cost = reprojection_cost(&candidate, inliers, k);
            if new_cost.is_finite() && new_cost <= cost {
                let decrease = cost - new_cost;
                current = candidate;
                cost = new_cost;
                lambda = if lambda / ten > convert(1e-12) { lambda / ten } else { convert(1e-12) };
                accepted = true;
                if delta.norm() < step_tol || decrease < cost_tol {
                    return current;
                }
                break;
            }
            if delta.norm() < step_tol {
                return current;
            }
            lambda *= ten;
        }
        if !accepted {
            break;
        }
    }
    current
}
