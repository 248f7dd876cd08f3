use std::fs;
use std::path::{Path, PathBuf};

use super::{put_f32s, put_f64, put_u32, read_bytes, to_u32, verify_checksum, with_checksum, write_atomic, FormatError, IoError, Reader};
use crate::frame::{Camera, Frame, FrameLabels};
use crate::geometry::{CameraPose, Intrinsics};
use crate::net::DescriptorSet;

const MAGIC: &[u8; 4] = b"D2SF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const HAS_LABELS: u32 = 1;
const HAS_POSE: u32 = 2;
/// File extension used for dataset directories.
pub const FRAME_EXTENSION: &str = "d2sf";

/// Serializes one frame. Layout: magic, version, K, D, flags, descriptors,
/// keypoints, optional coordinates and reliability bytes, optional pose and
/// intrinsics, CRC-32.
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let set = &frame.descriptors;
    let (k, d) = (set.len(), set.dim());
    let mut flags = 0;
    if frame.labels.is_some() {
        flags |= HAS_LABELS;
    }
    if frame.camera.is_some() {
        flags |= HAS_POSE;
    }
    let mut out = Vec::with_capacity(expected_len(k, d, flags).unwrap_or(0));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(k, "keypoint count"));
    put_u32(&mut out, to_u32(d, "descriptor dimension"));
    put_u32(&mut out, flags);
    put_f32s(&mut out, set.descriptors());
    for kp in set.keypoints() {
        put_f32s(&mut out, kp);
    }
    if let Some(labels) = &frame.labels {
        for c in &labels.coords {
            put_f32s(&mut out, c);
        }
        out.extend(labels.reliable.iter().map(|&z| z as u8));
    }
    if let Some(cam) = &frame.camera {
        for v in cam.pose.to_array() {
            put_f64(&mut out, v);
        }
        let k = &cam.intrinsics;
        for v in [k.fx, k.fy, k.cx, k.cy] {
            put_f64(&mut out, v);
        }
    }
    with_checksum(out)
}

fn expected_len(k: usize, d: usize, flags: u32) -> Option<usize> {
    let mut n = HEADER_LEN
        .checked_add(k.checked_mul(d)?.checked_mul(4)?)?
        .checked_add(k.checked_mul(8)?)?;
    if flags & HAS_LABELS != 0 {
        n = n.checked_add(k.checked_mul(13)?)?;
    }
    if flags & HAS_POSE != 0 {
        n += 16 * 8;
    }
    n.checked_add(4)
}

pub fn decode_frame(buf: &[u8]) -> Result<Frame, FormatError> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    let at = r.pos();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::new(at, format!("unsupported version {version}")));
    }
    let at = r.pos();
    let k = r.u32("keypoint count")? as usize;
    if k == 0 {
        return Err(FormatError::new(at, "frame has no keypoints"));
    }
    let at = r.pos();
    let d = r.u32("descriptor dimension")? as usize;
    if d == 0 {
        return Err(FormatError::new(at, "descriptor dimension is zero"));
    }
    let at = r.pos();
    let flags = r.u32("flags")?;
    if flags & !(HAS_LABELS | HAS_POSE) != 0 {
        return Err(FormatError::new(at, format!("unknown flag bits {flags:#x}")));
    }
    let total = expected_len(k, d, flags).ok_or_else(|| FormatError::new(at, "header sizes overflow"))?;
    if buf.len() < total {
        return Err(FormatError::new(buf.len(), format!("file ends early, header implies {total} bytes")));
    }
    if buf.len() > total {
        return Err(FormatError::new(total, format!("{} trailing bytes", buf.len() - total)));
    }
    verify_checksum(buf)?;

    let at = r.pos();
    let descriptors = r.f32s(k * d, "descriptors")?;
    let keypoints: Vec<[f32; 2]> = r.f32s(k * 2, "keypoints")?.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let descriptors =
        DescriptorSet::new(d, descriptors, keypoints).map_err(|e| FormatError::new(at, e.to_string()))?;
    let labels = if flags & HAS_LABELS != 0 {
        let coords = r.f32s(k * 3, "coordinates")?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let at = r.pos();
        let bytes = r.take(k, "reliability")?;
        if let Some(i) = bytes.iter().position(|&b| b > 1) {
            return Err(FormatError::new(at + i, format!("reliability byte {} is not 0 or 1", bytes[i])));
        }
        Some(FrameLabels {
            coords,
            reliable: bytes.iter().map(|&b| b == 1).collect(),
        })
    } else {
        None
    };
    let camera = if flags & HAS_POSE != 0 {
        let at = r.pos();
        let mut v = [0.0; 12];
        for x in &mut v {
            *x = r.f64("pose")?;
        }
        let pose = CameraPose::from_array(&v).map_err(|e| FormatError::new(at, e.to_string()))?;
        let at = r.pos();
        let (fx, fy, cx, cy) = (r.f64("intrinsics")?, r.f64("intrinsics")?, r.f64("intrinsics")?, r.f64("intrinsics")?);
        let intrinsics = Intrinsics::new(fx, fy, cx, cy).map_err(|e| FormatError::new(at, e.to_string()))?;
        Some(Camera { pose, intrinsics })
    } else {
        None
    };
    Ok(Frame {
        descriptors,
        labels,
        camera,
    })
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<(), IoError> {
    write_atomic(path, &encode_frame(frame))
}

pub fn read_frame(path: &Path) -> Result<Frame, IoError> {
    decode_frame(&read_bytes(path)?).map_err(|source| IoError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `frames` as `frame_00000.d2sf`, `frame_00001.d2sf`, ... creating `dir`.
pub fn write_dataset_dir(dir: &Path, frames: &[Frame]) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (i, frame) in frames.iter().enumerate() {
        write_frame(&dir.join(format!("frame_{i:05}.{FRAME_EXTENSION}")), frame)?;
    }
    Ok(())
}

/// Every frame file in `dir`, in file name order.
pub fn read_dataset_dir(dir: &Path) -> Result<Vec<Frame>, IoError> {
    let io = |source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == FRAME_EXTENSION));
    paths.sort();
    paths.iter().map(|p| read_frame(p)).collect()
}
