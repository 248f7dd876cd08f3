use std::fmt;
use std::time::Instant;

use super::SynthError;
use crate::frame::Frame;
use crate::geometry::pose_error;
use crate::net::{ModelParams, SceneCoordinateSet};
use crate::pose::{all_correspondences, filter_reliable, ransac_pnp, RansacConfig};
use crate::scalar::Scalar;

/// Points of the cumulative error curve, evenly spaced over `[0, CURVE_MAX]`.
pub const CURVE_SAMPLES: usize = 101;
const CURVE_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub ransac: RansacConfig,
    /// Keep only predictions with reliability at least `ransac.reliability_threshold`.
    pub filter: bool,
    pub t_thresh: f64,
    /// Degrees.
    pub r_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            filter: true,
            t_thresh: 0.05,
            r_thresh: 5.0,
        }
    }
}

impl EvalConfig {
    /// Thresholds of 5% of the scene diameter and 5 degrees.
    pub fn for_diameter(diameter: f64) -> Self {
        Self {
            t_thresh: 0.05 * diameter,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_id: usize,
    /// Infinite when the solver failed.
    pub translation_error: f64,
    pub rotation_error: f64,
    pub inliers: usize,
    /// Correspondences handed to the solver.
    pub correspondences: usize,
    pub solver_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<FrameRecord>,
    pub median_translation: f64,
    pub median_rotation: f64,
    /// Percentage of frames within both thresholds.
    pub recall: f64,
    pub t_thresh: f64,
    pub r_thresh: f64,
    /// `(x, percentage of frames with max(t / t_thresh, r / r_thresh) <= x)`.
    pub curve: Vec<(f64, f64)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a.is_infinite() || b.is_infinite() {
            b
        } else {
            0.5 * (a + b)
        }
    }
}

impl EvalReport {
    fn from_records(records: Vec<FrameRecord>, t_thresh: f64, r_thresh: f64) -> Self {
        let n = records.len().max(1) as f64;
        let normalized: Vec<f64> = records
            .iter()
            .map(|r| (r.translation_error / t_thresh).max(r.rotation_error / r_thresh))
            .collect();
        let hits = records
            .iter()
            .filter(|r| r.translation_error <= t_thresh && r.rotation_error <= r_thresh)
            .count();
        let curve = (0..CURVE_SAMPLES)
            .map(|i| {
                let x = CURVE_MAX * i as f64 / (CURVE_SAMPLES - 1) as f64;
                (x, 100.0 * normalized.iter().filter(|&&e| e <= x).count() as f64 / n)
            })
            .collect();
        Self {
            median_translation: median(records.iter().map(|r| r.translation_error).collect()),
            median_rotation: median(records.iter().map(|r| r.rotation_error).collect()),
            recall: 100.0 * hits as f64 / n,
            t_thresh,
            r_thresh,
            curve,
            records,
        }
    }

    pub fn mean_solver_ms(&self) -> f64 {
        self.records.iter().map(|r| r.solver_ms).sum::<f64>() / self.records.len().max(1) as f64
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.translation_error.is_finite()).count()
    }

    /// One whitespace-separated line per frame.
    pub fn records_text(&self) -> String {
        let mut s = String::from("# frame_id t_err r_err inliers solver_ms\n");
        for r in &self.records {
            s += &format!(
                "{} {:.6e} {:.6e} {} {:.3}\n",
                r.frame_id, r.translation_error, r.rotation_error, r.inliers, r.solver_ms
            );
        }
        s
    }

    /// Two columns: normalized error and cumulative percentage.
    pub fn curve_text(&self) -> String {
        let mut s = String::from("# max_normalized_error percent_frames\n");
        for (x, y) in &self.curve {
            s += &format!("{x:.3} {y:.2}\n");
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames: {}", self.records.len())?;
        writeln!(f, "failures: {}", self.failures())?;
        writeln!(f, "median_translation: {:.6}", self.median_translation)?;
        writeln!(f, "median_rotation_deg: {:.6}", self.median_rotation)?;
        writeln!(
            f,
            "recall: {:.2}% (t <= {:.4}, r <= {:.2} deg)",
            self.recall, self.t_thresh, self.r_thresh
        )?;
        write!(f, "mean_solver_ms: {:.3}", self.mean_solver_ms())
    }
}

/// Pose accuracy of precomputed predictions, one per frame. Every frame needs
/// a camera.
pub fn evaluate_predictions<S: Scalar>(
    predictions: &[SceneCoordinateSet<S>],
    frames: &[Frame],
    config: &EvalConfig,
) -> Result<EvalReport, SynthError> {
    if predictions.len() != frames.len() {
        return Err(SynthError::BadConfig(format!(
            "{} predictions for {} frames",
            predictions.len(),
            frames.len()
        )));
    }
    let mut records = Vec::with_capacity(frames.len());
    for (i, (pred, frame)) in predictions.iter().zip(frames).enumerate() {
        let camera = frame.camera.ok_or(SynthError::MissingCamera(i))?;
        let keypoints = frame.descriptors.keypoints();
        let start = Instant::now();
        let corr = if config.filter {
            filter_reliable(pred, keypoints, config.ransac.reliability_threshold)
        } else {
            all_correspondences(pred, keypoints)
        };
        let estimate = ransac_pnp(&corr, &camera.intrinsics, &config.ransac);
        let solver_ms = start.elapsed().as_secs_f64() * 1e3;
        let (translation_error, rotation_error, inliers) = match estimate {
            Ok(est) => {
                let e = pose_error(&est.pose, &camera.pose);
                (e.translation_error, e.rotation_error, est.inlier_count)
            }
            Err(_) => (f64::INFINITY, f64::INFINITY, 0),
        };
        records.push(FrameRecord {
            frame_id: i,
            translation_error,
            rotation_error,
            inliers,
            correspondences: corr.len(),
            solver_ms,
        });
    }
    Ok(EvalReport::from_records(records, config.t_thresh, config.r_thresh))
}

/// Runs the network on every frame, then solves and scores each pose.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, frames: &[Frame], config: &EvalConfig) -> Result<EvalReport, SynthError> {
    let predictions = frames
        .iter()
        .map(|f| params.forward(&f.descriptors))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_predictions(&predictions, frames, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, make_dataset, RenderConfig, TrajectorySpec};

    fn truth(frame: &Frame) -> SceneCoordinateSet<f64> {
        let labels = frame.labels.as_ref().unwrap();
        SceneCoordinateSet {
            coords: labels.coords.iter().map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect(),
            raw_p: vec![0.0; frame.len()],
            reliability: labels.reliable.iter().map(|&z| if z { 1.0 } else { 0.0 }).collect(),
        }
    }

    fn data(pixel_noise: f64) -> (f64, Vec<Frame>) {
        let scene = generate_scene(200, 16, 0.3, 9).unwrap();
        let render = RenderConfig {
            descriptor_noise_sigma: 0.0,
            pixel_noise_sigma: pixel_noise,
            ..RenderConfig::default()
        };
        let d = make_dataset(&scene, &TrajectorySpec::orbit(2, 12, 1), &render, 0.0).unwrap();
        (scene.diameter, d.test)
    }

    #[test]
    fn ground_truth_predictions_are_perfect() {
        let (diameter, frames) = data(0.0);
        let preds: Vec<_> = frames.iter().map(truth).collect();
        let report = evaluate_predictions(&preds, &frames, &EvalConfig::for_diameter(diameter)).unwrap();
        assert_eq!(report.recall, 100.0);
        assert!(report.median_translation < 1e-6 && report.median_rotation < 1e-6, "{report}");
        assert!(report.records.iter().all(|r| r.correspondences == r.inliers));
    }

    #[test]
    fn centroid_predictions_never_localize() {
        let (diameter, frames) = data(0.5);
        let preds: Vec<_> = frames
            .iter()
            .map(|f| SceneCoordinateSet {
                coords: vec![[0.0f64; 3]; f.len()],
                raw_p: vec![0.0; f.len()],
                reliability: vec![1.0; f.len()],
            })
            .collect();
        for t in [0.01, 0.05, 0.2, 0.49] {
            let cfg = EvalConfig {
                t_thresh: t * diameter,
                ..EvalConfig::default()
            };
            assert_eq!(evaluate_predictions(&preds, &frames, &cfg).unwrap().recall, 0.0);
        }
    }

    #[test]
    fn report_statistics() {
        let rec = |i, t, r| FrameRecord {
            frame_id: i,
            translation_error: t,
            rotation_error: r,
            inliers: 0,
            correspondences: 0,
            solver_ms: 2.0,
        };
        let report = EvalReport::from_records(
            vec![rec(0, 0.01, 1.0), rec(1, 0.2, 1.0), rec(2, 0.04, 6.0), rec(3, f64::INFINITY, f64::INFINITY)],
            0.05,
            5.0,
        );
        assert_eq!(report.recall, 25.0);
        assert!((report.median_translation - 0.12).abs() < 1e-12);
        assert!((report.median_rotation - 3.5).abs() < 1e-12);
        assert_eq!(report.failures(), 1);
        assert_eq!(report.mean_solver_ms(), 2.0);
        assert_eq!(report.curve.len(), CURVE_SAMPLES);
        assert!(report.curve.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(report.curve[50], (1.0, 25.0));
        assert_eq!(report.curve[100].1, 25.0 * 2.0);
        assert_eq!(report.records_text().lines().count(), 5);
    }

    #[test]
    fn frames_without_camera_are_rejected() {
        let (_, frames) = data(0.0);
        let stripped: Vec<Frame> = frames.iter().map(Frame::stripped).collect();
        let preds: Vec<_> = frames.iter().map(truth).collect();
        assert_eq!(
            evaluate_predictions(&preds, &stripped, &EvalConfig::default()),
            Err(SynthError::MissingCamera(0))
        );
    }
}
