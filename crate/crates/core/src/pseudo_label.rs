//! Pseudo 2D-3D labels for unlabeled frames.
//!
//! For every unlabeled frame: shortlist the most similar training frames by a
//! global descriptor, match local descriptors against each of them, and copy
//! the matched training descriptors' world coordinates. A frame is kept only
//! when enough of its descriptors received a label.

use std::fmt;

use crate::frame::{Frame, FrameLabels};
use crate::net::DescriptorSet;
use crate::scalar::Scalar;

/// Shortlist length used during retrieval.
pub const TOP_K: usize = 10;
/// Nearest / second-nearest distance ratio a match must stay below.
pub const RATIO: f32 = 0.9;
/// Minimum number of labeled descriptors for a frame to be admitted.
pub const MIN_VALID: usize = 50;

/// L2-normalised mean of a frame's local descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor(Vec<f32>);

impl GlobalDescriptor {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn cosine(&self, other: &GlobalDescriptor) -> f64 {
        self.0.iter().zip(&other.0).map(|(&a, &b)| a as f64 * b as f64).sum()
    }
}

pub fn global_descriptor(frame: &DescriptorSet) -> GlobalDescriptor {
    let d = frame.dim();
    let mut mean = vec![0.0f64; d];
    for i in 0..frame.len() {
        for (m, &v) in mean.iter_mut().zip(frame.descriptor(i)) {
            *m += v as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        GlobalDescriptor(mean.iter().map(|v| (v / norm) as f32).collect())
    } else {
        // descriptors cancel out exactly; any unit vector is as good as another
        let u = (1.0 / d as f64).sqrt() as f32;
        GlobalDescriptor(vec![u; d])
    }
}

/// Indices of the `k` most cosine-similar training frames, most similar first.
/// Ties go to the lower index.
pub fn retrieve_top_k(query: &GlobalDescriptor, train: &[GlobalDescriptor], k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = train.iter().map(|g| query.cosine(g)).enumerate().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub query: usize,
    pub train: usize,
    /// Euclidean descriptor distance.
    pub distance: f32,
}

/// Matches with each query index at most once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Squared L2 distances, `query.len() x train.len()`, row-major.
fn squared_distances(query: &DescriptorSet, train: &DescriptorSet) -> Vec<f32> {
    let (m, n, d) = (query.len(), train.len(), query.dim());
    let mut dots = vec![0.0f32; m * n];
    f32::gemm(m, d, n, 1.0, query.descriptors(), d, 1, train.descriptors(), 1, d, 0.0, &mut dots, n, 1);
    let qn: Vec<f32> = (0..m).map(|i| query.descriptor(i).iter().map(|v| v * v).sum()).collect();
    let tn: Vec<f32> = (0..n).map(|j| train.descriptor(j).iter().map(|v| v * v).sum()).collect();
    for i in 0..m {
        for j in 0..n {
            let v = &mut dots[i * n + j];
            *v = (qn[i] + tn[j] - 2.0 * *v).max(0.0);
        }
    }
    dots
}

/// Mutual nearest neighbours under L2, kept when the query's nearest /
/// second-nearest distance ratio is below `ratio`.
pub fn match_descriptors_with_ratio(query: &DescriptorSet, train: &DescriptorSet, ratio: f32) -> MatchSet {
    let (m, n) = (query.len(), train.len());
    if m == 0 || n == 0 || query.dim() != train.dim() {
        return MatchSet::default();
    }
    let dist = squared_distances(query, train);
    let mut best_query_for_train = vec![(f32::INFINITY, usize::MAX); n];
    for i in 0..m {
        for j in 0..n {
            if dist[i * n + j] < best_query_for_train[j].0 {
                best_query_for_train[j] = (dist[i * n + j], i);
            }
        }
    }
    let mut pairs = Vec::new();
    for i in 0..m {
        let row = &dist[i * n..(i + 1) * n];
        let (mut best, mut second, mut arg) = (f32::INFINITY, f32::INFINITY, usize::MAX);
        for (j, &v) in row.iter().enumerate() {
            if v < best {
                second = best;
                best = v;
                arg = j;
            } else if v < second {
                second = v;
            }
        }
        if best_query_for_train[arg].1 != i {
            continue;
        }
        let (best, second) = (best.sqrt(), second.sqrt());
        if best < ratio * second {
            pairs.push(Match {
                query: i,
                train: arg,
                distance: best,
            });
        }
    }
    MatchSet { pairs }
}

pub fn match_descriptors(query: &DescriptorSet, train: &DescriptorSet) -> MatchSet {
    match_descriptors_with_ratio(query, train, RATIO)
}

/// An unlabeled frame with copied world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoFrame {
    pub descriptors: DescriptorSet,
    pub coords: Vec<[f32; 3]>,
    pub valid: Vec<bool>,
    /// Number of labeled descriptors.
    pub s: usize,
}

impl PseudoFrame {
    pub fn admitted(&self) -> bool {
        self.s >= MIN_VALID
    }

    /// Training frame with `z = 1` exactly at transferred descriptors.
    pub fn into_frame(self) -> Frame {
        Frame {
            descriptors: self.descriptors,
            labels: Some(FrameLabels {
                coords: self.coords,
                reliable: self.valid,
            }),
            camera: None,
        }
    }
}

/// Copies coordinates from labeled `candidates` onto `query` through
/// descriptor matches. Only reliable training descriptors donate labels;
/// when several candidates label one query descriptor the closest match wins.
pub fn transfer_labels(query: &DescriptorSet, candidates: &[&Frame]) -> PseudoFrame {
    let k = query.len();
    let mut best: Vec<Option<(f32, [f32; 3])>> = vec![None; k];
    for cand in candidates {
        let Some(labels) = &cand.labels else { continue };
        for m in match_descriptors(query, &cand.descriptors).pairs {
            if !labels.reliable[m.train] {
                continue;
            }
            let slot = &mut best[m.query];
            if slot.is_none_or(|(d, _)| m.distance < d) {
                *slot = Some((m.distance, labels.coords[m.train]));
            }
        }
    }
    let coords = best.iter().map(|b| b.map_or([0.0; 3], |(_, c)| c)).collect();
    let valid: Vec<bool> = best.iter().map(Option::is_some).collect();
    let s = valid.iter().filter(|&&v| v).count();
    PseudoFrame {
        descriptors: query.clone(),
        coords,
        valid,
        s,
    }
}

/// Outcome of labeling a set of unlabeled frames.
#[derive(Clone, Debug, Default)]
pub struct PseudoLabelReport {
    /// (index into the unlabeled set, labeled frame) for admitted frames.
    pub admitted: Vec<(usize, PseudoFrame)>,
    /// (index, s) of frames below the admission threshold.
    pub skipped: Vec<(usize, usize)>,
}

impl PseudoLabelReport {
    pub fn processed(&self) -> usize {
        self.admitted.len() + self.skipped.len()
    }

    pub fn mean_s(&self) -> f64 {
        let total: usize = self.admitted.iter().map(|(_, p)| p.s).sum::<usize>()
            + self.skipped.iter().map(|&(_, s)| s).sum::<usize>();
        if self.processed() == 0 {
            0.0
        } else {
            total as f64 / self.processed() as f64
        }
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.admitted.into_iter().map(|(_, p)| p.into_frame()).collect()
    }
}

impl fmt::Display for PseudoLabelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames_processed {}", self.processed())?;
        writeln!(f, "frames_admitted {}", self.admitted.len())?;
        writeln!(f, "frames_skipped {}", self.skipped.len())?;
        writeln!(f, "mean_s {:.2}", self.mean_s())?;
        for (i, s) in &self.skipped {
            writeln!(f, "skip {i} s={s}")?;
        }
        Ok(())
    }
}

/// Labels every unlabeled frame against the labeled training frames.
/// The training set is only read.
pub fn pseudo_label(train: &[Frame], unlabeled: &[Frame]) -> PseudoLabelReport {
    let labeled: Vec<&Frame> = train.iter().filter(|f| f.labels.is_some()).collect();
    let globals: Vec<GlobalDescriptor> = labeled.iter().map(|f| global_descriptor(&f.descriptors)).collect();
    let mut report = PseudoLabelReport::default();
    for (i, frame) in unlabeled.iter().enumerate() {
        let g = global_descriptor(&frame.descriptors);
        let shortlist: Vec<&Frame> = retrieve_top_k(&g, &globals, TOP_K).into_iter().map(|j| labeled[j]).collect();
        let pseudo = transfer_labels(&frame.descriptors, &shortlist);
        if pseudo.admitted() {
            report.admitted.push((i, pseudo));
        } else {
            report.skipped.push((i, pseudo.s));
        }
    }
    report
}
