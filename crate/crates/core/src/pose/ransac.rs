use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::refine::{refine_lm, LmConfig};
use super::{p3p, Correspondence, PoseSolverError};
use crate::geometry::{project, CameraPose, Intrinsics};

const MIN_INLIERS: usize = 4;
const REFIT_ROUNDS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub inlier_threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    /// Applied by callers through `filter_reliable` before sampling.
    pub reliability_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold_px: 12.0,
            max_iterations: 10_000,
            confidence: 0.9999,
            reliability_threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub pose: CameraPose<f64>,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    pub iterations_used: usize,
}

/// Pixel error of every correspondence under `pose`; infinite behind the camera.
pub fn reprojection_errors(pose: &CameraPose<f64>, corr: &[Correspondence<f64>], k: &Intrinsics<f64>) -> Vec<f64> {
    corr.iter()
        .map(|c| project(pose, k, &c.world).map_or(f64::INFINITY, |px| (px - c.pixel).norm()))
        .collect()
}

struct Score {
    count: usize,
    cost: f64,
}

impl Score {
    fn beats(&self, other: &Score) -> bool {
        self.count > other.count || (self.count == other.count && self.cost < other.cost)
    }
}

fn score(pose: &CameraPose<f64>, corr: &[Correspondence<f64>], k: &Intrinsics<f64>, threshold: f64) -> Score {
    let t2 = threshold * threshold;
    let mut count = 0;
    let mut cost = 0.0;
    for c in corr {
        let e2 = project(pose, k, &c.world).map_or(f64::INFINITY, |px| (px - c.pixel).norm_squared());
        if e2 < t2 {
            count += 1;
            cost += e2;
        } else {
            cost += t2;
        }
    }
    Score { count, cost }
}

fn mask(pose: &CameraPose<f64>, corr: &[Correspondence<f64>], k: &Intrinsics<f64>, threshold: f64) -> Vec<bool> {
    reprojection_errors(pose, corr, k).into_iter().map(|e| e < threshold).collect()
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w3 = inlier_ratio.powi(3);
    if w3 >= 1.0 {
        return 1;
    }
    if w3 <= 0.0 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - w3).ln()).ceil();
    if n.is_finite() && n < cap as f64 {
        n.max(1.0) as usize
    } else {
        cap
    }
}

/// Hypothesize-and-verify over uniform 3-point samples, followed by an LM
/// refit on the winning hypothesis' inliers.
pub fn ransac_pnp(
    corr: &[Correspondence<f64>],
    k: &Intrinsics<f64>,
    config: &RansacConfig,
) -> Result<PoseEstimate, PoseSolverError> {
    let n = corr.len();
    if n < MIN_INLIERS {
        return Err(PoseSolverError::TooFewCorrespondences(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let thr = config.inlier_threshold_px;
    let mut best: Option<(Score, CameraPose<f64>)> = None;
    let mut bound = config.max_iterations;
    let mut iterations = 0;
    while iterations < bound {
        iterations += 1;
        let idx = sample(&mut rng, n, 3);
        let triple = [corr[idx.index(0)], corr[idx.index(1)], corr[idx.index(2)]];
        let Ok(candidates) = p3p(&triple, k) else { continue };
        for cand in candidates {
            let s = score(&cand, corr, k, thr);
            if best.as_ref().is_none_or(|(b, _)| s.beats(b)) {
                bound = bound.min(required_iterations(s.count as f64 / n as f64, config.confidence, config.max_iterations));
                best = Some((s, cand));
            }
        }
    }
    let Some((best_score, mut pose)) = best else {
        return Err(PoseSolverError::NoConsensus(0));
    };
    if best_score.count < MIN_INLIERS {
        return Err(PoseSolverError::NoConsensus(best_score.count));
    }

    let mut inlier_mask = mask(&pose, corr, k, thr);
    for _ in 0..REFIT_ROUNDS {
        let inliers: Vec<_> = corr.iter().zip(&inlier_mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
        let refined = refine_lm(&pose, &inliers, k, &LmConfig::default());
        let refined_mask = mask(&refined, corr, k, thr);
        let before = inlier_mask.iter().filter(|&&m| m).count();
        let after = refined_mask.iter().filter(|&&m| m).count();
        if after < MIN_INLIERS {
            break;
        }
        let changed = refined_mask != inlier_mask;
        pose = refined;
        inlier_mask = refined_mask;
        if !changed || after < before {
            break;
        }
    }
    let inlier_count = inlier_mask.iter().filter(|&&m| m).count();
    Ok(PoseEstimate {
        pose,
        inlier_mask,
        inlier_count,
        iterations_used: iterations,
    })
}
