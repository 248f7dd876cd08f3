use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::SynthError;
use crate::frame::{Camera, Frame, FrameLabels};
use crate::geometry::{transform_to_camera, CameraPose, Intrinsics, DEPTH_EPSILON};
use crate::net::DescriptorSet;

/// Minimum number of visible reliable points for a usable frame.
pub const MIN_RELIABLE_VISIBLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Layout {
    /// Points uniform in `[-h, h]^3` with independent random codes.
    Box { half_extent: f64 },
    /// Points spread along x in `[-half_length, half_length]`, split into
    /// `regions` equal slabs. Point `j` belongs to group `j % groups` and
    /// region `j / groups`; its code is a group prototype plus a weak
    /// region signature of norm `region_amplitude`.
    Corridor {
        half_length: f64,
        regions: usize,
        region_amplitude: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub points: usize,
    pub dim: usize,
    pub unreliable_fraction: f64,
    pub layout: Layout,
    pub seed: u64,
}

impl SceneConfig {
    pub fn desk() -> Self {
        Self {
            points: 200,
            dim: 64,
            unreliable_fraction: 0.3,
            layout: Layout::Box { half_extent: 1.0 },
            seed: 7,
        }
    }

    pub fn corridor() -> Self {
        Self {
            points: 200,
            dim: 64,
            unreliable_fraction: 0.6,
            layout: Layout::Corridor {
                half_length: 4.0,
                regions: 8,
                region_amplitude: 0.15,
            },
            seed: 7,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.points < 10 {
            return Err(SynthError::BadConfig(format!("need at least 10 points, got {}", self.points)));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(SynthError::BadConfig(format!("dimension {} is not a positive multiple of 4", self.dim)));
        }
        if !(0.0..1.0).contains(&self.unreliable_fraction) {
            return Err(SynthError::BadConfig(format!(
                "unreliable fraction {} outside [0, 1)",
                self.unreliable_fraction
            )));
        }
        match self.layout {
            Layout::Box { half_extent } if !(half_extent > 0.0) => {
                Err(SynthError::BadConfig("box half extent must be positive".into()))
            }
            Layout::Corridor {
                half_length, regions, ..
            } if !(half_length > 0.0) || regions == 0 || !self.points.is_multiple_of(regions) => Err(SynthError::BadConfig(
                format!("corridor needs a positive length and {} points divisible into {regions} regions", self.points),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub points: Vec<[f64; 3]>,
    /// `M x D` row-major latent codes.
    pub codes: Vec<f32>,
    pub reliable: Vec<bool>,
    pub dim: usize,
    /// Largest distance between two scene points.
    pub diameter: f64,
    pub layout: Layout,
}

impl SyntheticScene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn code(&self, j: usize) -> &[f32] {
        &self.codes[j * self.dim..(j + 1) * self.dim]
    }

    pub fn point(&self, j: usize) -> Vector3<f64> {
        Vector3::from(self.points[j])
    }

    pub fn unreliable_count(&self) -> usize {
        self.reliable.iter().filter(|&&r| !r).count()
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn diameter(points: &[[f64; 3]]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let d = (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
            best = best.max(d);
        }
    }
    best.sqrt()
}

/// Box scene: `m` points with unit-norm codes of dimension `d`, of which
/// `floor(unreliable_fraction * m)` are unreliable.
pub fn generate_scene(m: usize, d: usize, unreliable_fraction: f64, seed: u64) -> Result<SyntheticScene, SynthError> {
    generate_scene_with(&SceneConfig {
        points: m,
        dim: d,
        unreliable_fraction,
        layout: Layout::Box { half_extent: 1.0 },
        seed,
    })
}

pub fn generate_scene_with(config: &SceneConfig) -> Result<SyntheticScene, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (m, d) = (config.points, config.dim);
    let mut points = Vec::with_capacity(m);
    let mut codes = Vec::with_capacity(m * d);
    match config.layout {
        Layout::Box { half_extent: h } => {
            for _ in 0..m {
                points.push([rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h)]);
                codes.extend(random_unit(&mut rng, d).into_iter().map(|x| x as f32));
            }
        }
        Layout::Corridor {
            half_length,
            regions,
            region_amplitude,
        } => {
            let groups = m / regions;
            let protos: Vec<Vec<f64>> = (0..groups).map(|_| random_unit(&mut rng, d)).collect();
            let signatures: Vec<Vec<f64>> = (0..regions).map(|_| random_unit(&mut rng, d)).collect();
            let width = 2.0 * half_length / regions as f64;
            for j in 0..m {
                let (g, r) = (j % groups, j / groups);
                let x0 = -half_length + r as f64 * width;
                points.push([rng.random_range(x0..x0 + width), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                // a small individual part keeps every code distinct
                let own = random_unit(&mut rng, d);
                let code: Vec<f64> = (0..d)
                    .map(|c| protos[g][c] + region_amplitude * signatures[r][c] + 0.02 * own[c])
                    .collect();
                codes.extend(normalized(code).into_iter().map(|x| x as f32));
            }
        }
    }
    let unreliable = (config.unreliable_fraction * m as f64).floor() as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let mut reliable = vec![true; m];
    for &j in &order[..unreliable] {
        reliable[j] = false;
    }
    Ok(SyntheticScene {
        diameter: diameter(&points),
        points,
        codes,
        reliable,
        dim: d,
        layout: config.layout,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub descriptor_noise_sigma: f64,
    pub pixel_noise_sigma: f64,
    /// Largest number of keypoints per frame.
    pub max_points: usize,
    pub intrinsics: Intrinsics<f64>,
    pub image_width: f64,
    pub image_height: f64,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            descriptor_noise_sigma: 0.05,
            pixel_noise_sigma: 0.5,
            max_points: 150,
            intrinsics: Intrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
            },
            image_width: 640.0,
            image_height: 480.0,
            seed: 11,
        }
    }
}

impl RenderConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if !(self.descriptor_noise_sigma >= 0.0 && self.pixel_noise_sigma >= 0.0) {
            return Err(SynthError::BadConfig("noise levels must be nonnegative".into()));
        }
        if self.max_points < 4 {
            return Err(SynthError::BadConfig(format!("max_points {} below 4", self.max_points)));
        }
        Intrinsics::new(self.intrinsics.fx, self.intrinsics.fy, self.intrinsics.cx, self.intrinsics.cy)
            .map_err(|e| SynthError::BadConfig(e.to_string()))?;
        Ok(())
    }
}

/// A rendered frame and the scene point behind every keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub frame: Frame,
    pub point_ids: Vec<usize>,
}

/// Observes `scene` from `pose`: visible points become keypoints (in random
/// order), reliable points carry their noisy code and unreliable points a
/// fresh random code.
pub fn render_frame<R: Rng + ?Sized>(
    scene: &SyntheticScene,
    pose: &CameraPose<f64>,
    config: &RenderConfig,
    rng: &mut R,
) -> Result<RenderedFrame, SynthError> {
    config.validate()?;
    let k = &config.intrinsics;
    let mut visible: Vec<(usize, [f64; 2])> = Vec::new();
    for j in 0..scene.len() {
        let c = transform_to_camera(pose, &scene.point(j));
        if c.z <= DEPTH_EPSILON {
            continue;
        }
        let (u, v) = (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
        if (0.0..config.image_width).contains(&u) && (0.0..config.image_height).contains(&v) {
            visible.push((j, [u, v]));
        }
    }
    visible.shuffle(rng);
    visible.truncate(config.max_points);
    let reliable_visible = visible.iter().filter(|(j, _)| scene.reliable[*j]).count();
    if reliable_visible < MIN_RELIABLE_VISIBLE {
        return Err(SynthError::InsufficientVisibility {
            visible: reliable_visible,
            required: MIN_RELIABLE_VISIBLE,
        });
    }

    let d = scene.dim;
    let desc_noise = Normal::new(0.0, config.descriptor_noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let px_noise = Normal::new(0.0, config.pixel_noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut descriptors = Vec::with_capacity(visible.len() * d);
    let mut keypoints = Vec::with_capacity(visible.len());
    let mut coords = Vec::with_capacity(visible.len());
    let mut reliable = Vec::with_capacity(visible.len());
    for &(j, [u, v]) in &visible {
        if scene.reliable[j] {
            for &c in scene.code(j) {
                let n = if config.descriptor_noise_sigma > 0.0 { desc_noise.sample(rng) } else { 0.0 };
                descriptors.push((c as f64 + n) as f32);
            }
        } else {
            descriptors.extend(random_unit(rng, d).into_iter().map(|x| x as f32));
        }
        let (du, dv) = if config.pixel_noise_sigma > 0.0 {
            (px_noise.sample(rng), px_noise.sample(rng))
        } else {
            (0.0, 0.0)
        };
        keypoints.push([(u + du) as f32, (v + dv) as f32]);
        let p = scene.points[j];
        coords.push([p[0] as f32, p[1] as f32, p[2] as f32]);
        reliable.push(scene.reliable[j]);
    }
    let frame = Frame {
        descriptors: DescriptorSet::new(d, descriptors, keypoints).map_err(|e| SynthError::BadConfig(e.to_string()))?,
        labels: Some(FrameLabels { coords, reliable }),
        camera: Some(Camera {
            pose: *pose,
            intrinsics: *k,
        }),
    };
    Ok(RenderedFrame {
        frame,
        point_ids: visible.iter().map(|(j, _)| *j).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trajectory {
    /// Circles around the scene centre at distinct radii and heights.
    Orbit,
    /// Sideways-looking cameras sliding along the corridor at distinct offsets.
    Corridor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrajectorySpec {
    pub kind: Trajectory,
    pub train: usize,
    pub test: usize,
    pub unlabeled: usize,
}

impl TrajectorySpec {
    pub fn orbit(train: usize, test: usize, unlabeled: usize) -> Self {
        Self {
            kind: Trajectory::Orbit,
            train,
            test,
            unlabeled,
        }
    }

    pub fn corridor(train: usize, test: usize, unlabeled: usize) -> Self {
        Self {
            kind: Trajectory::Corridor,
            train,
            test,
            unlabeled,
        }
    }

    /// Camera poses of split 0 (train), 1 (test) or 2 (unlabeled).
    pub fn poses(&self, split: usize, scene: &SyntheticScene) -> Vec<CameraPose<f64>> {
        let n = [self.train, self.test, self.unlabeled][split];
        let up = Vector3::z();
        match self.kind {
            Trajectory::Orbit => {
                let (radius, height, phase) = [(3.0, 0.8, 0.5), (3.3, -0.4, 0.25), (2.8, 0.2, 0.75)][split];
                (0..n)
                    .map(|i| {
                        let a = std::f64::consts::TAU * (i as f64 + phase) / n as f64;
                        let centre = Vector3::new(radius * a.cos(), radius * a.sin(), height);
                        CameraPose::look_at(centre, Vector3::zeros(), up)
                    })
                    .collect()
            }
            Trajectory::Corridor => {
                let half = match scene.layout {
                    Layout::Corridor { half_length, .. } => half_length,
                    Layout::Box { half_extent } => half_extent,
                };
                let (offset, height, phase) = [(3.0, 0.3, 0.5), (3.3, -0.2, 0.25), (2.8, 0.1, 0.75)][split];
                let span = 2.0 * (half - 0.5).max(0.1);
                (0..n)
                    .map(|i| {
                        let x = -span / 2.0 + span * (i as f64 + phase) / n as f64;
                        let centre = Vector3::new(x, -offset, height);
                        CameraPose::look_at(centre, Vector3::new(x, 0.0, 0.0), up)
                    })
                    .collect()
            }
        }
    }
}

/// Train, test and unlabeled frames from disjoint trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
    /// Stored without labels or camera.
    pub unlabeled: Vec<Frame>,
    /// The unlabeled frames as rendered, for measuring label quality.
    pub unlabeled_truth: Vec<Frame>,
    /// Descriptor offset added to test and unlabeled frames.
    pub shift: Vec<f32>,
}

fn split_rng(seed: u64, split: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split as u64 + 1);
    rng
}

/// Renders the three splits. With `shift > 0` a fixed random offset of that
/// norm is added to every descriptor of the test and unlabeled frames.
pub fn make_dataset(
    scene: &SyntheticScene,
    spec: &TrajectorySpec,
    config: &RenderConfig,
    shift: f64,
) -> Result<Dataset, SynthError> {
    if !(shift >= 0.0 && shift.is_finite()) {
        return Err(SynthError::BadConfig(format!("shift must be finite and nonnegative, got {shift}")));
    }
    let mut shift_rng = split_rng(config.seed, 3);
    let offset: Vec<f32> = random_unit(&mut shift_rng, scene.dim).into_iter().map(|x| (x * shift) as f32).collect();
    let mut splits: Vec<Vec<Frame>> = Vec::with_capacity(3);
    for split in 0..3 {
        let mut rng = split_rng(config.seed, split);
        let mut frames = Vec::new();
        for pose in spec.poses(split, scene) {
            let mut frame = render_frame(scene, &pose, config, &mut rng)?.frame;
            if split > 0 && shift > 0.0 {
                for row in frame.descriptors.descriptors_mut().chunks_mut(scene.dim) {
                    row.iter_mut().zip(&offset).for_each(|(x, o)| *x += o);
                }
            }
            frames.push(frame);
        }
        splits.push(frames);
    }
    let unlabeled_truth = splits.pop().unwrap_or_default();
    let test = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Dataset {
        train,
        test,
        unlabeled: unlabeled_truth.iter().map(Frame::stripped).collect(),
        unlabeled_truth,
        shift: offset,
    })
}
