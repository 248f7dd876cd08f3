use nalgebra::{convert, DMatrix, Matrix3, RealField, Schur, Vector3};

use super::{Correspondence, PoseSolverError};
use crate::geometry::{CameraPose, Intrinsics};

const IMAG_TOLERANCE: f64 = 1e-9;
const COLLINEAR_AREA: f64 = 1e-9;
const POLISH_STEPS: usize = 8;
const SCHUR_MAX_ITERS: usize = 500;
const SHIFTS: [f64; 4] = [0.0, 0.618, -1.324, 2.75];

/// Real roots of `c[0] x^n + c[1] x^(n-1) + ... + c[n]` from the eigenvalues of
/// the companion matrix, each polished with a few Newton steps. Leading
/// coefficients that vanish relative to the largest one are dropped.
pub fn solve_quartic<T: RealField + Copy>(coeffs: &[T]) -> Vec<T> {
    let scale = coeffs.iter().fold(T::zero(), |m, c| if c.abs() > m { c.abs() } else { m });
    if scale == T::zero() {
        return Vec::new();
    }
    let tiny: T = convert(1e-13);
    let lead = coeffs.iter().position(|c| c.abs() > tiny * scale).unwrap_or(coeffs.len());
    let poly = &coeffs[lead..];
    let n = poly.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let mut companion = DMatrix::<T>::zeros(n, n);
    for j in 0..n {
        companion[(0, j)] = -poly[j + 1] / poly[0];
    }
    for i in 1..n {
        companion[(i, i - 1)] = T::one();
    }
    let eval = |x: T| -> (T, T) {
        let mut p = T::zero();
        let mut dp = T::zero();
        for &c in poly {
            dp = dp * x + p;
            p = p * x + c;
        }
        (p, dp)
    };
    let imag_tol: T = convert(IMAG_TOLERANCE);
    let mut roots = Vec::new();
    // The unshifted Schur iteration can stall when all eigenvalues share a
    // modulus (x^4 + 1); a real diagonal shift breaks that symmetry.
    let eigenvalues = SHIFTS.iter().find_map(|&s| {
        let shift: T = convert(s);
        let shifted = &companion + DMatrix::<T>::identity(n, n) * shift;
        Schur::try_new(shifted, T::default_epsilon(), SCHUR_MAX_ITERS).map(|schur| {
            schur
                .complex_eigenvalues()
                .iter()
                .map(|z| (z.re - shift, z.im))
                .collect::<Vec<_>>()
        })
    });
    for (re, im) in eigenvalues.unwrap_or_default() {
        if im.abs() >= imag_tol * (T::one() + re.abs()) {
            continue;
        }
        let mut x = re;
        for _ in 0..4 {
            let (p, dp) = eval(x);
            if dp == T::zero() {
                break;
            }
            let next = x - p / dp;
            if eval(next).0.abs() > p.abs() {
                break;
            }
            x = next;
        }
        roots.push(x);
    }
    roots
}

fn triangle_frame<T: RealField + Copy>(a: &Vector3<T>, b: &Vector3<T>, c: &Vector3<T>) -> Option<Matrix3<T>> {
    let e1 = (b - a).try_normalize(T::default_epsilon())?;
    let e3 = e1.cross(&(c - a)).try_normalize(T::default_epsilon())?;
    let e2 = e3.cross(&e1);
    Some(Matrix3::from_columns(&[e1, e2, e3]))
}

/// Newton steps on the three law-of-cosines equations in the depths. Removes
/// the error the quartic root carries near repeated roots.
fn polish_depths<T: RealField + Copy>(s: Vector3<T>, cos: [T; 3], d2: [T; 3]) -> Vector3<T> {
    let two: T = convert(2.0);
    // pairs (2,3), (1,3), (1,2) opposite the sides a, b, c
    let pairs = [(1, 2), (0, 2), (0, 1)];
    let residual = |s: &Vector3<T>| {
        Vector3::from_fn(|e, _| {
            let (i, j) = pairs[e];
            s[i] * s[i] + s[j] * s[j] - two * s[i] * s[j] * cos[e] - d2[e]
        })
    };
    let mut s = s;
    let mut r = residual(&s);
    for _ in 0..POLISH_STEPS {
        let mut jac = Matrix3::<T>::zeros();
        for (e, &(i, j)) in pairs.iter().enumerate() {
            jac[(e, i)] = two * (s[i] - s[j] * cos[e]);
            jac[(e, j)] = two * (s[j] - s[i] * cos[e]);
        }
        let Some(step) = jac.lu().solve(&r) else { break };
        let next = s - step;
        let next_r = residual(&next);
        if !(next_r.norm() < r.norm()) {
            break;
        }
        s = next;
        r = next_r;
    }
    s
}

/// Every real pose consistent with three correspondences (at most four).
///
/// Follows Grunert's formulation: with `s2 = u s1` and `s3 = v s1` the law of
/// cosines on the three point pairs reduces to a quartic in `v`.
pub fn p3p<T: RealField + Copy>(
    corr: &[Correspondence<T>; 3],
    k: &Intrinsics<T>,
) -> Result<Vec<CameraPose<T>>, PoseSolverError> {
    let [p1, p2, p3] = [corr[0].world, corr[1].world, corr[2].world];
    let area = (p2 - p1).cross(&(p3 - p1)).norm() * convert::<f64, T>(0.5);
    if area < convert::<f64, T>(COLLINEAR_AREA) {
        return Err(PoseSolverError::DegenerateSample);
    }
    let min_sep: T = convert(1e-9);
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if (corr[i].pixel - corr[j].pixel).norm() < min_sep {
            return Err(PoseSolverError::DegenerateSample);
        }
    }
    let bearings: Vec<Vector3<T>> = corr.iter().map(|c| k.normalized(&c.pixel).normalize()).collect();
    let (b1, b2, b3) = (bearings[0], bearings[1], bearings[2]);

    let a2 = (p2 - p3).norm_squared();
    let b2s = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    let cos_a = b2.dot(&b3);
    let cos_b = b1.dot(&b3);
    let cos_g = b1.dot(&b2);

    let one = T::one();
    let two: T = convert(2.0);
    let four: T = convert(4.0);
    let amc = (a2 - c2) / b2s;
    let apc = (a2 + c2) / b2s;
    let bmc = (b2s - c2) / b2s;
    let bma = (b2s - a2) / b2s;
    let (ca2, cb2, cg2) = (cos_a * cos_a, cos_b * cos_b, cos_g * cos_g);

    let a4 = (amc - one) * (amc - one) - four * c2 / b2s * ca2;
    let a3 = four
        * (amc * (one - amc) * cos_b - (one - apc) * cos_a * cos_g + two * c2 / b2s * ca2 * cos_b);
    let a2c = two
        * (amc * amc - one + two * amc * amc * cb2 + two * bmc * ca2 - four * apc * cos_a * cos_b * cos_g
            + two * bma * cg2);
    let a1 = four * (-amc * (one + amc) * cos_b + two * a2 / b2s * cg2 * cos_b - (one - apc) * cos_a * cos_g);
    let a0 = (one + amc) * (one + amc) - four * a2 / b2s * cg2;

    let world_frame = triangle_frame(&p1, &p2, &p3).ok_or(PoseSolverError::DegenerateSample)?;
    let world_centroid = (p1 + p2 + p3) / convert::<f64, T>(3.0);

    let mut poses = Vec::new();
    for v in solve_quartic(&[a4, a3, a2c, a1, a0]) {
        if v <= T::zero() {
            continue;
        }
        let den = two * (cos_g - v * cos_a);
        if den.abs() < convert::<f64, T>(1e-14) {
            continue;
        }
        let u = ((-one + amc) * v * v - two * amc * cos_b * v + one + amc) / den;
        let q = one + v * v - two * v * cos_b;
        if u <= T::zero() || q <= T::zero() {
            continue;
        }
        let s1 = (b2s / q).sqrt();
        let depths = polish_depths(Vector3::new(s1, u * s1, v * s1), [cos_a, cos_b, cos_g], [a2, b2s, c2]);
        let (q1, q2, q3) = (b1 * depths.x, b2 * depths.y, b3 * depths.z);
        let Some(cam_frame) = triangle_frame(&q1, &q2, &q3) else { continue };
        let rotation = cam_frame * world_frame.transpose();
        let translation = (q1 + q2 + q3) / convert::<f64, T>(3.0) - rotation * world_centroid;
        poses.push(CameraPose::from_rotation(
            nalgebra::Rotation3::from_matrix_unchecked(rotation),
            translation,
        ));
    }
    Ok(poses)
}
