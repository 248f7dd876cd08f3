use crate::diffcore::{Tape, Var};
use crate::frame::{Frame, FrameLabels};
use crate::geometry::{transform_to_camera, DEPTH_EPSILON};
use crate::net::{reliability, ModelParams, SceneCoordinateSet};
use crate::scalar::Scalar;
use nalgebra::Vector3;

use super::TrainError;

/// Scale factors of the coordinate, reliability and reprojection terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_m: f64,
    pub alpha_u: f64,
    pub alpha_r: f64,
}

impl LossWeights {
    pub const STAGE1: LossWeights = LossWeights::new(1.0, 1.0, 0.0);
    pub const STAGE2: LossWeights = LossWeights::new(1.0, 1.0, 10.0);
    pub const UPDATE: LossWeights = LossWeights::new(1.0, 1.0, 1.0);

    pub const fn new(alpha_m: f64, alpha_u: f64, alpha_r: f64) -> Self {
        Self {
            alpha_m,
            alpha_u,
            alpha_r,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.alpha_m, self.alpha_u, self.alpha_r].iter().all(|a| a.is_finite() && *a >= 0.0)
    }
}

/// How per-frame sums are scaled before averaging over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    /// Sums are averaged over the batch frames only.
    #[default]
    Frames,
    /// Each frame's sums are also divided by its count of `z = 1` rows.
    ReliableCount,
}

impl Normalization {
    fn frame_factor(self, labels: &FrameLabels, batch: usize) -> f64 {
        let base = 1.0 / batch as f64;
        match self {
            Normalization::Frames => base,
            Normalization::ReliableCount => base / labels.reliable_count().max(1) as f64,
        }
    }
}

/// Per-frame sum of `z_i |y_i - y^_i|^2`.
pub fn loss_m<T: Scalar>(pred: &SceneCoordinateSet<T>, labels: &FrameLabels) -> f64 {
    pred.coords
        .iter()
        .zip(&labels.coords)
        .zip(&labels.reliable)
        .filter(|(_, &z)| z)
        .map(|((p, y), _)| (0..3).map(|c| (y[c] as f64 - p[c].as_f64()).powi(2)).sum::<f64>())
        .sum()
}

/// Per-frame sum of `(z_i - 1 / (1 + |beta p_i|))^2`.
pub fn loss_u<T: Scalar>(pred: &SceneCoordinateSet<T>, labels: &FrameLabels, beta: f64) -> f64 {
    pred.raw_p
        .iter()
        .zip(&labels.reliable)
        .map(|(&p, &z)| {
            let zh = reliability(p.as_f64(), beta);
            (if z { 1.0 } else { 0.0 } - zh).powi(2)
        })
        .sum()
}

/// Per-frame sum of squared pixel reprojection errors over `z = 1` rows whose
/// predicted depth is positive. Frames without a camera contribute zero.
pub fn loss_r<T: Scalar>(pred: &SceneCoordinateSet<T>, frame: &Frame) -> f64 {
    let (Some(labels), Some(cam)) = (&frame.labels, &frame.camera) else {
        return 0.0;
    };
    let k = &cam.intrinsics;
    let mut total = 0.0;
    for ((p, kp), &z) in pred.coords.iter().zip(frame.descriptors.keypoints()).zip(&labels.reliable) {
        if !z {
            continue;
        }
        let world = Vector3::new(p[0].as_f64(), p[1].as_f64(), p[2].as_f64());
        let c = transform_to_camera(&cam.pose, &world);
        if c.z <= DEPTH_EPSILON {
            continue;
        }
        let u = k.fx * c.x / c.z + k.cx - kp[0] as f64;
        let v = k.fy * c.y / c.z + k.cy - kp[1] as f64;
        total += u * u + v * v;
    }
    total
}

/// The three per-frame sums.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub m: f64,
    pub u: f64,
    pub r: f64,
}

impl LossTerms {
    /// Weighted combination; zero-weighted terms are skipped entirely.
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        let mut total = 0.0;
        for (a, x) in [(w.alpha_m, self.m), (w.alpha_u, self.u), (w.alpha_r, self.r)] {
            if a != 0.0 {
                total += a * x;
            }
        }
        total
    }
}

fn labels_of(frame: &Frame, index: usize) -> Result<&FrameLabels, TrainError> {
    frame.labels.as_ref().ok_or(TrainError::MissingLabels(index))
}

/// Batch-averaged loss terms, computed without a tape.
pub fn batch_terms<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[&Frame],
    norm: Normalization,
) -> Result<LossTerms, TrainError> {
    let beta = params.config().beta;
    let mut terms = LossTerms::default();
    for (i, frame) in batch.iter().enumerate() {
        let labels = labels_of(frame, i)?;
        let pred = params.forward(&frame.descriptors)?;
        let f = norm.frame_factor(labels, batch.len());
        terms.m += f * loss_m(&pred, labels);
        terms.u += f * loss_u(&pred, labels, beta);
        terms.r += f * loss_r(&pred, frame);
    }
    Ok(terms)
}

/// `alpha_m L_m + alpha_u L_u + alpha_r L_r`, each term averaged over the batch.
pub fn total_loss<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[&Frame],
    weights: &LossWeights,
    norm: Normalization,
) -> Result<f64, TrainError> {
    if !weights.is_valid() {
        return Err(TrainError::BadConfig(format!("invalid loss weights {weights:?}")));
    }
    Ok(batch_terms(params, batch, norm)?.weighted(weights))
}

/// Records the batch loss on `tape`. All frames run through the network as
/// one stacked forward pass.
pub fn total_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    vars: &[Var],
    batch: &[&Frame],
    weights: &LossWeights,
    norm: Normalization,
) -> Result<Var, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !weights.is_valid() {
        return Err(TrainError::BadConfig(format!("invalid loss weights {weights:?}")));
    }
    let dim = params.config().descriptor_dim;
    let rows: usize = batch.iter().map(|f| f.len()).sum();
    let segments: Vec<usize> = batch.iter().map(|f| f.len()).collect();
    let mut input = Vec::with_capacity(rows * dim);
    let mut targets = Vec::with_capacity(rows * 3);
    let mut m_weight = Vec::with_capacity(rows * 3);
    let mut z_target = Vec::with_capacity(rows);
    let mut u_weight = Vec::with_capacity(rows);
    for (i, frame) in batch.iter().enumerate() {
        let labels = labels_of(frame, i)?;
        if frame.descriptors.dim() != dim {
            return Err(crate::net::NetError::DimensionMismatch {
                expected: dim,
                got: frame.descriptors.dim(),
            }
            .into());
        }
        let f = norm.frame_factor(labels, batch.len());
        input.extend(frame.descriptors.descriptors().iter().map(|&x| T::of(x as f64)));
        for (y, &z) in labels.coords.iter().zip(&labels.reliable) {
            let zf = if z { 1.0 } else { 0.0 };
            targets.extend(y.iter().map(|&c| T::of(c as f64)));
            m_weight.extend([T::of(zf * f); 3]);
            z_target.push(T::of(zf));
            u_weight.push(T::of(f));
        }
    }
    let x = tape.constant(rows, dim, input)?;
    let out = params.forward_on_tape(tape, vars, x, &segments)?;

    let mut parts: Vec<(f64, Var)> = Vec::new();
    if weights.alpha_m != 0.0 {
        let y = tape.constant(rows, 3, targets)?;
        let w = tape.constant(rows, 3, m_weight)?;
        let d = tape.sub(out.coords, y)?;
        let sq = tape.square(d);
        let weighted = tape.mul(sq, w)?;
        parts.push((weights.alpha_m, tape.sum(weighted)));
    }
    if weights.alpha_u != 0.0 {
        let beta = T::of(params.config().beta);
        let scaled = tape.scale(out.raw_p, beta);
        let abs = tape.abs_smooth(scaled);
        let den = tape.add_scalar(abs, T::one());
        let zh = tape.recip(den);
        let z = tape.constant(rows, 1, z_target)?;
        let w = tape.constant(rows, 1, u_weight)?;
        let d = tape.sub(z, zh)?;
        let sq = tape.square(d);
        let weighted = tape.mul(sq, w)?;
        parts.push((weights.alpha_u, tape.sum(weighted)));
    }
    if weights.alpha_r != 0.0 {
        let mut start = 0;
        let mut frame_sums = Vec::new();
        for (i, frame) in batch.iter().enumerate() {
            let len = frame.len();
            if let Some(cam) = &frame.camera {
                let labels = labels_of(frame, i)?;
                let f = norm.frame_factor(labels, batch.len());
                frame_sums.push(reprojection_on_tape(tape, out.coords, start, frame, labels, cam, f)?);
            }
            start += len;
        }
        if let Some((&first, rest)) = frame_sums.split_first() {
            let mut acc = first;
            for &s in rest {
                acc = tape.add(acc, s)?;
            }
            parts.push((weights.alpha_r, acc));
        }
    }

    let mut total: Option<Var> = None;
    for (a, v) in parts {
        let term = tape.scale(v, T::of(a));
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(1, 1, vec![T::zero()])?),
    }
}

fn reprojection_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    coords: Var,
    start: usize,
    frame: &Frame,
    labels: &FrameLabels,
    cam: &crate::frame::Camera,
    factor: f64,
) -> Result<Var, TrainError> {
    let len = frame.len();
    let r = cam.pose.rotation();
    let t = cam.pose.translation();
    let k = &cam.intrinsics;
    // rows are points, so multiply by R^T
    let rt = tape.constant(3, 3, (0..9).map(|i| T::of(r[(i % 3, i / 3)])).collect())?;
    let tr = tape.constant(1, 3, (0..3).map(|i| T::of(t[i])).collect())?;
    let pts = tape.slice_rows(coords, start, len)?;
    let cam_pts = tape.matmul(pts, rt)?;
    let cam_pts = tape.add(cam_pts, tr)?;

    let depth_values: Vec<f64> = tape.value(cam_pts).chunks(3).map(|p| p[2].as_f64()).collect();
    let visible: Vec<bool> = depth_values.iter().map(|&z| z > DEPTH_EPSILON).collect();
    let mask = tape.constant(len, 1, visible.iter().map(|&m| T::of(if m { 1.0 } else { 0.0 })).collect())?;
    let fill = tape.constant(len, 1, visible.iter().map(|&m| T::of(if m { 0.0 } else { 1.0 })).collect())?;
    let weight = tape.constant(
        len,
        1,
        visible
            .iter()
            .zip(&labels.reliable)
            .map(|(&m, &z)| T::of(if m && z { factor } else { 0.0 }))
            .collect(),
    )?;
    let kps = frame.descriptors.keypoints();
    let obs_u = tape.constant(len, 1, kps.iter().map(|p| T::of(p[0] as f64 - k.cx)).collect())?;
    let obs_v = tape.constant(len, 1, kps.iter().map(|p| T::of(p[1] as f64 - k.cy)).collect())?;

    let x = tape.slice_cols(cam_pts, 0, 1)?;
    let y = tape.slice_cols(cam_pts, 1, 1)?;
    let z = tape.slice_cols(cam_pts, 2, 1)?;
    // masked rows get depth 1 so the division stays finite
    let z = tape.mul(z, mask)?;
    let z = tape.add(z, fill)?;
    let inv = tape.recip(z);
    let u = tape.mul(x, inv)?;
    let u = tape.scale(u, T::of(k.fx));
    let v = tape.mul(y, inv)?;
    let v = tape.scale(v, T::of(k.fy));
    let du = tape.sub(u, obs_u)?;
    let dv = tape.sub(v, obs_v)?;
    let su = tape.square(du);
    let sv = tape.square(dv);
    let s = tape.add(su, sv)?;
    let s = tape.mul(s, weight)?;
    Ok(tape.sum(s))
}
