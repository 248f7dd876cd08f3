use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::net::NetConfig;
use crate::pose::RansacConfig;
use crate::synth::{Layout, Preset, Trajectory};
use crate::training::{Normalization, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

/// Pose-evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    /// Translation threshold as a fraction of the scene diameter.
    pub threshold_trans_fraction: f64,
    /// Degrees.
    pub threshold_rot: f64,
    pub filter: bool,
    pub ransac: RansacConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold_trans_fraction: 0.05,
            threshold_rot: 5.0,
            filter: true,
            ransac: RansacConfig::default(),
        }
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    /// Desk-scale scene with the full network and default training schedule.
    fn default() -> Self {
        let mut preset = Preset::desk();
        preset.net = NetConfig::full(preset.scene.dim);
        preset.train = TrainConfig::default();
        Self {
            preset,
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            preset,
            eval: EvalSettings::default(),
        }
    }

    /// Applies one seed to every random stream.
    pub fn set_seed(&mut self, seed: u64) {
        let p = &mut self.preset;
        p.scene.seed = seed;
        p.render.seed = seed;
        p.train.seed = seed;
        self.eval.ransac.seed = seed;
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn get<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<(), ConfigError> {
        if let Some((line, raw)) = self.map.remove(key) {
            *target = raw.parse().map_err(|_| ConfigError {
                line,
                message: format!("cannot parse {key} = {raw:?}"),
            })?;
        }
        Ok(())
    }

    fn get_with<T>(&mut self, key: &str, target: &mut T, parse: impl Fn(&str) -> Option<T>) -> Result<(), ConfigError> {
        if let Some((line, raw)) = self.map.remove(key) {
            *target = parse(&raw).ok_or_else(|| ConfigError {
                line,
                message: format!("invalid value for {key}: {raw:?}"),
            })?;
        }
        Ok(())
    }
}

fn parse_list(raw: &str) -> Option<Vec<usize>> {
    if raw.trim().is_empty() {
        return Some(Vec::new());
    }
    raw.split(',').map(|x| x.trim().parse().ok()).collect()
}

/// Reads `key = value` lines on top of [`RunConfig::default`]. Blank lines
/// and `#` comments are ignored; unknown or repeated keys are errors.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError {
            line,
            message: format!("expected key = value, got {content:?}"),
        })?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), (line, value.trim().to_string())).is_some() {
            return Err(ConfigError {
                line,
                message: format!("{key} given twice"),
            });
        }
    }
    let mut e = Entries { map };
    let mut c = RunConfig::default();
    let p = &mut c.preset;

    let (mut layout, mut half_extent, mut half_length, mut regions, mut amplitude) =
        (String::from("box"), 1.0, 4.0, 8usize, 0.15);
    if let Layout::Corridor { half_length: h, regions: r, region_amplitude: a } = p.scene.layout {
        (layout, half_length, regions, amplitude) = ("corridor".into(), h, r, a);
    }
    e.get("scene.points", &mut p.scene.points)?;
    e.get("scene.dim", &mut p.scene.dim)?;
    e.get("scene.unreliable_fraction", &mut p.scene.unreliable_fraction)?;
    e.get("scene.layout", &mut layout)?;
    e.get("scene.half_extent", &mut half_extent)?;
    e.get("scene.half_length", &mut half_length)?;
    e.get("scene.regions", &mut regions)?;
    e.get("scene.region_amplitude", &mut amplitude)?;
    e.get("scene.seed", &mut p.scene.seed)?;
    p.scene.layout = match layout.as_str() {
        "box" => Layout::Box { half_extent },
        "corridor" => Layout::Corridor {
            half_length,
            regions,
            region_amplitude: amplitude,
        },
        other => {
            return Err(ConfigError {
                line: 0,
                message: format!("unknown scene.layout {other:?}"),
            })
        }
    };

    let r = &mut p.render;
    e.get("render.descriptor_noise", &mut r.descriptor_noise_sigma)?;
    e.get("render.pixel_noise", &mut r.pixel_noise_sigma)?;
    e.get("render.max_points", &mut r.max_points)?;
    e.get("render.fx", &mut r.intrinsics.fx)?;
    e.get("render.fy", &mut r.intrinsics.fy)?;
    e.get("render.cx", &mut r.intrinsics.cx)?;
    e.get("render.cy", &mut r.intrinsics.cy)?;
    e.get("render.width", &mut r.image_width)?;
    e.get("render.height", &mut r.image_height)?;
    e.get("render.seed", &mut r.seed)?;

    let t = &mut p.trajectory;
    e.get_with("frames.trajectory", &mut t.kind, |s| match s {
        "orbit" => Some(Trajectory::Orbit),
        "corridor" => Some(Trajectory::Corridor),
        _ => None,
    })?;
    e.get("frames.train", &mut t.train)?;
    e.get("frames.test", &mut t.test)?;
    e.get("frames.unlabeled", &mut t.unlabeled)?;
    e.get("shift", &mut p.shift)?;

    p.net.descriptor_dim = p.scene.dim;
    e.get("net.layers", &mut p.net.layers)?;
    e.get("net.heads", &mut p.net.heads)?;
    e.get_with("net.head_hidden", &mut p.net.head_hidden, parse_list)?;
    e.get("beta", &mut p.net.beta)?;
    p.train.beta = p.net.beta;

    let tr = &mut p.train;
    e.get("train.batch_size", &mut tr.batch_size)?;
    e.get("train.stage1_iters", &mut tr.stage1_iters)?;
    e.get("train.stage2_iters", &mut tr.stage2_iters)?;
    e.get("train.update_iters", &mut tr.update_iters)?;
    e.get("train.lr_stage1", &mut tr.lr_stage1)?;
    e.get("train.lr_stage2", &mut tr.lr_stage2)?;
    e.get("train.lr_update", &mut tr.lr_update)?;
    e.get("train.lr_decay", &mut tr.lr_decay)?;
    e.get_with("train.normalization", &mut tr.normalization, |s| match s {
        "frames" => Some(Normalization::Frames),
        "reliable_count" => Some(Normalization::ReliableCount),
        _ => None,
    })?;
    e.get("train.augment", &mut tr.augment)?;
    e.get("train.augment.descriptor_sigma", &mut tr.augment_config.descriptor_sigma)?;
    e.get("train.augment.warp_probability", &mut tr.augment_config.warp_probability)?;
    e.get("train.augment.warp_scale", &mut tr.augment_config.warp_scale)?;
    e.get("train.adam.beta1", &mut tr.adam.beta1)?;
    e.get("train.adam.beta2", &mut tr.adam.beta2)?;
    e.get("train.adam.eps", &mut tr.adam.eps)?;
    e.get("train.seed", &mut tr.seed)?;
    tr.augment_config.image_width = p.render.image_width;
    tr.augment_config.image_height = p.render.image_height;

    let ev = &mut c.eval;
    e.get("ransac.inlier_threshold_px", &mut ev.ransac.inlier_threshold_px)?;
    e.get("ransac.max_iterations", &mut ev.ransac.max_iterations)?;
    e.get("ransac.confidence", &mut ev.ransac.confidence)?;
    e.get("ransac.reliability_threshold", &mut ev.ransac.reliability_threshold)?;
    e.get("ransac.seed", &mut ev.ransac.seed)?;
    e.get("eval.threshold_trans_fraction", &mut ev.threshold_trans_fraction)?;
    e.get("eval.threshold_rot", &mut ev.threshold_rot)?;
    e.get("eval.filter", &mut ev.filter)?;

    if let Some((key, (line, _))) = e.map.into_iter().min_by_key(|(_, (line, _))| *line) {
        return Err(ConfigError {
            line,
            message: format!("unknown key {key}"),
        });
    }
    Ok(c)
}

/// Every key with its current value, in a form [`parse_config`] reads back.
pub fn render_config(c: &RunConfig) -> String {
    let p = &c.preset;
    let mut s = String::new();
    let mut put = |k: &str, v: &dyn std::fmt::Display| {
        writeln!(s, "{k} = {v}").expect("write to string");
    };
    match p.scene.layout {
        Layout::Box { half_extent } => {
            put("scene.layout", &"box");
            put("scene.half_extent", &half_extent);
        }
        Layout::Corridor {
            half_length,
            regions,
            region_amplitude,
        } => {
            put("scene.layout", &"corridor");
            put("scene.half_length", &half_length);
            put("scene.regions", &regions);
            put("scene.region_amplitude", &region_amplitude);
        }
    }
    put("scene.points", &p.scene.points);
    put("scene.dim", &p.scene.dim);
    put("scene.unreliable_fraction", &p.scene.unreliable_fraction);
    put("scene.seed", &p.scene.seed);
    let r = &p.render;
    put("render.descriptor_noise", &r.descriptor_noise_sigma);
    put("render.pixel_noise", &r.pixel_noise_sigma);
    put("render.max_points", &r.max_points);
    put("render.fx", &r.intrinsics.fx);
    put("render.fy", &r.intrinsics.fy);
    put("render.cx", &r.intrinsics.cx);
    put("render.cy", &r.intrinsics.cy);
    put("render.width", &r.image_width);
    put("render.height", &r.image_height);
    put("render.seed", &r.seed);
    put(
        "frames.trajectory",
        &match p.trajectory.kind {
            Trajectory::Orbit => "orbit",
            Trajectory::Corridor => "corridor",
        },
    );
    put("frames.train", &p.trajectory.train);
    put("frames.test", &p.trajectory.test);
    put("frames.unlabeled", &p.trajectory.unlabeled);
    put("shift", &p.shift);
    put("net.layers", &p.net.layers);
    put("net.heads", &p.net.heads);
    let hidden: Vec<String> = p.net.head_hidden.iter().map(|w| w.to_string()).collect();
    put("net.head_hidden", &hidden.join(","));
    put("beta", &p.net.beta);
    let t = &p.train;
    put("train.batch_size", &t.batch_size);
    put("train.stage1_iters", &t.stage1_iters);
    put("train.stage2_iters", &t.stage2_iters);
    put("train.update_iters", &t.update_iters);
    put("train.lr_stage1", &t.lr_stage1);
    put("train.lr_stage2", &t.lr_stage2);
    put("train.lr_update", &t.lr_update);
    put("train.lr_decay", &t.lr_decay);
    put(
        "train.normalization",
        &match t.normalization {
            Normalization::Frames => "frames",
            Normalization::ReliableCount => "reliable_count",
        },
    );
    put("train.augment", &t.augment);
    put("train.augment.descriptor_sigma", &t.augment_config.descriptor_sigma);
    put("train.augment.warp_probability", &t.augment_config.warp_probability);
    put("train.augment.warp_scale", &t.augment_config.warp_scale);
    put("train.adam.beta1", &t.adam.beta1);
    put("train.adam.beta2", &t.adam.beta2);
    put("train.adam.eps", &t.adam.eps);
    put("train.seed", &t.seed);
    let e = &c.eval;
    put("ransac.inlier_threshold_px", &e.ransac.inlier_threshold_px);
    put("ransac.max_iterations", &e.ransac.max_iterations);
    put("ransac.confidence", &e.ransac.confidence);
    put("ransac.reliability_threshold", &e.ransac.reliability_threshold);
    put("ransac.seed", &e.ransac.seed);
    put("eval.threshold_trans_fraction", &e.threshold_trans_fraction);
    put("eval.threshold_rot", &e.threshold_rot);
    put("eval.filter", &e.filter);
    s
}
