//! Command-line front end. `run` returns the process exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::frame::Frame;
use crate::io::{
    parse_config, read_checkpoint, read_dataset_dir, read_frame, render_config, write_checkpoint, write_dataset_dir,
    Checkpoint, IoError, RunConfig,
};
use crate::net::{ModelParams, NetError};
use crate::pose::{all_correspondences, filter_reliable, ransac_pnp, PoseSolverError};
use crate::pseudo_label::pseudo_label;
use crate::synth::{evaluate, EvalConfig, SynthError};
use crate::training::{train_with, update_with_pseudo_with, Progress, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_GATE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Name of the scene summary written next to the dataset splits.
pub const MANIFEST: &str = "scene.txt";
/// Full configuration used to generate a dataset.
pub const DATASET_CONFIG: &str = "config.cfg";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("no pose found: {0}")]
    NoPose(#[from] PoseSolverError),
    #[error("recall {recall:.2}% is below the required {required:.2}%")]
    Gate { recall: f64, required: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Io(IoError::Config(_))
            | CliError::Train(TrainError::BadConfig(_))
            | CliError::Synth(SynthError::BadConfig(_)) => EXIT_USAGE,
            CliError::Gate { .. } | CliError::NoPose(_) => EXIT_GATE,
            _ => EXIT_IO,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "d2s", version, about = "Scene coordinates from local descriptors, and camera relocalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct SolverFlags {
    /// Minimum predicted reliability of a correspondence
    #[arg(long)]
    reliability_threshold: Option<f64>,
    /// Hand every prediction to the solver
    #[arg(long)]
    no_filter: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and its train/test/unlabeled frames
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model from scratch on labeled frames
    Train {
        /// Dataset root (uses its train/ split) or a directory of frames
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a model on labeled plus pseudo-labeled frames
    Update {
        checkpoint: PathBuf,
        labeled: PathBuf,
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Transfer labels from training frames to unlabeled frames
    PseudoLabel {
        train: PathBuf,
        unlabeled: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize every frame of a test set and report pose accuracy
    Eval {
        checkpoint: PathBuf,
        test: PathBuf,
        /// Translation threshold in scene units; defaults to a fraction of the scene diameter
        #[arg(long)]
        threshold_trans: Option<f64>,
        /// Rotation threshold in degrees
        #[arg(long)]
        threshold_rot: Option<f64>,
        /// Exit with status 1 when recall (percent) is below this
        #[arg(long)]
        min_recall: Option<f64>,
        /// Directory for per-frame records and the cumulative curve
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the camera pose of one frame file
    Localize {
        checkpoint: PathBuf,
        frame: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (program name first), runs the command and returns its exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { out, common } => cmd_synth(&load_config(&common)?, &out),
        Command::Train { dataset, out, common } => cmd_train(&load_config(&common)?, &dataset, &out),
        Command::Update {
            checkpoint,
            labeled,
            pseudo,
            out,
            common,
        } => cmd_update(&load_config(&common)?, common.config.is_some(), &checkpoint, &labeled, &pseudo, &out),
        Command::PseudoLabel { train, unlabeled, out } => cmd_pseudo_label(&train, &unlabeled, &out),
        Command::Eval {
            checkpoint,
            test,
            threshold_trans,
            threshold_rot,
            min_recall,
            out,
            solver,
            common,
        } => {
            let config = load_config(&common)?;
            let mut eval = eval_config(&config, &solver);
            if let Some(r) = threshold_rot {
                eval.r_thresh = r;
            }
            eval.t_thresh = match threshold_trans {
                Some(t) => t,
                None => config.eval.threshold_trans_fraction * manifest_diameter(&test)?,
            };
            cmd_eval(&checkpoint, &test, &eval, min_recall, out.as_deref())
        }
        Command::Localize {
            checkpoint,
            frame,
            solver,
            common,
        } => {
            let config = load_config(&common)?;
            let line = cmd_localize(&config, &eval_config(&config, &solver), &checkpoint, &frame)?;
            println!("{line}");
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| IoError::Io {
                path: path.clone(),
                source,
            })?;
            parse_config(&text).map_err(IoError::from)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    Ok(config)
}

fn eval_config(config: &RunConfig, flags: &SolverFlags) -> EvalConfig {
    let mut ransac = config.eval.ransac;
    if let Some(t) = flags.reliability_threshold {
        ransac.reliability_threshold = t;
    }
    EvalConfig {
        ransac,
        filter: config.eval.filter && !flags.no_filter,
        t_thresh: f64::NAN,
        r_thresh: config.eval.threshold_rot,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Scene diameter recorded by `synth` in the parent of a split directory.
fn manifest_diameter(split_dir: &Path) -> Result<f64, CliError> {
    let candidates = [split_dir.join(MANIFEST), split_dir.join("..").join(MANIFEST)];
    let Some(path) = candidates.iter().find(|p| p.is_file()) else {
        return Err(CliError::Usage(format!(
            "no {MANIFEST} next to {}; pass --threshold-trans",
            split_dir.display()
        )));
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "diameter")
        .and_then(|(_, v)| v.trim().parse().ok())
        .ok_or_else(|| CliError::Usage(format!("{} has no diameter entry", path.display())))
}

/// Uses `dir/train` when present, otherwise `dir` itself.
fn labeled_dir(dir: &Path) -> PathBuf {
    let train = dir.join("train");
    if train.is_dir() {
        train
    } else {
        dir.to_path_buf()
    }
}

fn progress_printer(every: usize) -> impl FnMut(&Progress) {
    let start = Instant::now();
    move |p: &Progress| {
        let i = p.iteration + 1;
        if i.is_multiple_of(every) || i == p.total_iterations {
            eprintln!(
                "{} {}/{} loss {:.5} lr {:.2e} {:.0}s",
                p.stage,
                i,
                p.total_iterations,
                p.loss,
                p.lr,
                start.elapsed().as_secs_f64()
            );
        }
    }
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (scene, data) = config.preset.build()?;
    write_dataset_dir(&out.join("train"), &data.train)?;
    write_dataset_dir(&out.join("test"), &data.test)?;
    write_dataset_dir(&out.join("unlabeled"), &data.unlabeled)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "diameter = {}", scene.diameter);
    let _ = writeln!(manifest, "points = {}", scene.points.len());
    let _ = writeln!(manifest, "unreliable_points = {}", scene.unreliable_count());
    let _ = writeln!(manifest, "dim = {}", scene.dim);
    let _ = writeln!(manifest, "train_frames = {}", data.train.len());
    let _ = writeln!(manifest, "test_frames = {}", data.test.len());
    let _ = writeln!(manifest, "unlabeled_frames = {}", data.unlabeled.len());
    fs::write(out.join(MANIFEST), manifest).map_err(io_err(out))?;
    fs::write(out.join(DATASET_CONFIG), render_config(config)).map_err(io_err(out))?;
    println!(
        "wrote {} train, {} test, {} unlabeled frames to {} (diameter {:.4})",
        data.train.len(),
        data.test.len(),
        data.unlabeled.len(),
        out.display(),
        scene.diameter
    );
    Ok(())
}

pub fn cmd_train(config: &RunConfig, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let frames = read_dataset_dir(&labeled_dir(dataset))?;
    let mut net = config.preset.net.clone();
    if let Some(f) = frames.first() {
        net.descriptor_dim = f.descriptors.dim();
    }
    let init = ModelParams::<f32>::init(net, config.preset.train.seed)?;
    let params = train_with(init, &frames, &config.preset.train, &mut progress_printer(1000))?;
    write_checkpoint(out, &Checkpoint::new(params))?;
    println!("trained on {} frames, wrote {}", frames.len(), out.display());
    Ok(())
}

pub fn cmd_update(
    config: &RunConfig,
    check_architecture: bool,
    checkpoint: &Path,
    labeled: &Path,
    pseudo: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let ckpt = read_checkpoint(checkpoint)?;
    if check_architecture {
        let mut expected = config.preset.net.clone();
        expected.descriptor_dim = ckpt.params.config().descriptor_dim;
        ckpt.params_for(&expected)?;
    }
    let labeled = read_dataset_dir(&labeled_dir(labeled))?;
    let pseudo = read_dataset_dir(pseudo)?;
    let params = update_with_pseudo_with(ckpt.params, &labeled, &pseudo, &config.preset.train, &mut progress_printer(500))?;
    write_checkpoint(out, &Checkpoint::new(params))?;
    println!(
        "updated with {} labeled and {} pseudo-labeled frames, wrote {}",
        labeled.len(),
        pseudo.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_pseudo_label(train: &Path, unlabeled: &Path, out: &Path) -> Result<(), CliError> {
    let train = read_dataset_dir(&labeled_dir(train))?;
    let unlabeled = read_dataset_dir(unlabeled)?;
    let report = pseudo_label(&train, &unlabeled);
    let text = report.to_string();
    write_dataset_dir(out, &report.into_frames())?;
    fs::write(out.join("report.txt"), &text).map_err(io_err(out))?;
    print!("{text}");
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    test: &Path,
    eval: &EvalConfig,
    min_recall: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = read_checkpoint(checkpoint)?;
    let frames = read_dataset_dir(test)?;
    let report = evaluate(&ckpt.params, &frames, eval)?;
    println!("{report}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        fs::write(dir.join("records.txt"), report.records_text()).map_err(io_err(dir))?;
        fs::write(dir.join("curve.txt"), report.curve_text()).map_err(io_err(dir))?;
        fs::write(dir.join("summary.txt"), format!("{report}\n")).map_err(io_err(dir))?;
    }
    match min_recall {
        Some(required) if report.recall < required => Err(CliError::Gate {
            recall: report.recall,
            required,
        }),
        _ => Ok(()),
    }
}

/// Row-major rotation, translation and inlier count on one line. Uses the
/// frame's intrinsics when it carries a camera, else the configured ones.
pub fn cmd_localize(config: &RunConfig, eval: &EvalConfig, checkpoint: &Path, frame: &Path) -> Result<String, CliError> {
    let ckpt = read_checkpoint(checkpoint)?;
    let frame: Frame = read_frame(frame)?;
    let intrinsics = frame.camera.map_or(config.preset.render.intrinsics, |c| c.intrinsics);
    let pred = ckpt.params.forward(&frame.descriptors)?;
    let keypoints = frame.descriptors.keypoints();
    let corr = if eval.filter {
        filter_reliable(&pred, keypoints, eval.ransac.reliability_threshold)
    } else {
        all_correspondences(&pred, keypoints)
    };
    let est = ransac_pnp(&corr, &intrinsics, &eval.ransac)?;
    let m = est.pose.to_array();
    let mut line: Vec<String> = m.iter().map(|v| v.to_string()).collect();
    line.push(est.inlier_count.to_string());
    Ok(line.join(" "))
}
