use std::path::Path;

use super::{put_f32s, put_f64, put_u32, read_bytes, to_u32, verify_checksum, with_checksum, write_atomic, FormatError, IoError, Reader};
use crate::diffcore::{Adam, AdamConfig, Tensor};
use crate::net::{ModelParams, NetConfig};

const MAGIC: &[u8; 4] = b"D2SM";
const VERSION: u32 = 1;
/// Guards allocations driven by header fields.
const MAX_HIDDEN_LAYERS: usize = 64;

/// Optimizer moments and progress saved alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub iteration: u64,
    pub adam: Adam<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub state: Option<TrainingState>,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>) -> Self {
        Self { params, state: None }
    }

    /// The weights, provided they were saved for `expected`.
    pub fn params_for(&self, expected: &NetConfig) -> Result<&ModelParams<f32>, IoError> {
        let got = self.params.config();
        if got != expected {
            return Err(IoError::ArchitectureMismatch(format!("checkpoint holds {got:?}, expected {expected:?}")));
        }
        Ok(&self.params)
    }
}

/// Layout: magic, version, architecture (D, L, H, head widths, beta), tensor
/// index (name, rows, cols), f32 payload, optional optimizer state, CRC-32.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let params = &ckpt.params;
    let cfg = params.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(cfg.descriptor_dim, "descriptor dimension"));
    put_u32(&mut out, to_u32(cfg.layers, "layer count"));
    put_u32(&mut out, to_u32(cfg.heads, "head count"));
    put_u32(&mut out, to_u32(cfg.head_hidden.len(), "hidden layer count"));
    for &w in &cfg.head_hidden {
        put_u32(&mut out, to_u32(w, "hidden width"));
    }
    put_f64(&mut out, cfg.beta);
    put_u32(&mut out, to_u32(params.tensors().len(), "tensor count"));
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let len = u16::try_from(name.len()).expect("tensor name longer than 65535 bytes");
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(t.rows(), "rows"));
        put_u32(&mut out, to_u32(t.cols(), "cols"));
    }
    for t in params.tensors() {
        put_f32s(&mut out, t.data());
    }
    match &ckpt.state {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.iteration.to_le_bytes());
            out.extend_from_slice(&state.adam.step_count().to_le_bytes());
            let c = state.adam.config;
            for v in [c.beta1, c.beta2, c.eps] {
                put_f64(&mut out, v);
            }
            let (m, v) = state.adam.moments();
            for block in m.iter().chain(v) {
                put_f32s(&mut out, block);
            }
        }
    }
    with_checksum(out)
}

fn count(r: &mut Reader<'_>, what: &str, limit: usize) -> Result<usize, FormatError> {
    let at = r.pos();
    let n = r.u32(what)? as usize;
    if n > limit {
        return Err(FormatError::new(at, format!("{what} {n} exceeds {limit}")));
    }
    Ok(n)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    verify_checksum(buf)?;
    let body_end = buf.len() - 4;
    let at = r.pos();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::new(at, format!("unsupported version {version}")));
    }
    let arch_at = r.pos();
    let descriptor_dim = r.u32("descriptor dimension")? as usize;
    let layers = r.u32("layer count")? as usize;
    let heads = r.u32("head count")? as usize;
    let hidden = count(&mut r, "hidden layer count", MAX_HIDDEN_LAYERS)?;
    let head_hidden = (0..hidden).map(|_| r.u32("hidden width").map(|w| w as usize)).collect::<Result<_, _>>()?;
    let beta = r.f64("beta")?;
    let config = NetConfig {
        descriptor_dim,
        layers,
        heads,
        head_hidden,
        beta,
    };
    config.validate().map_err(|e| FormatError::new(arch_at, e.to_string()))?;
    let layout = config.layout();

    let at = r.pos();
    let n = r.u32("tensor count")? as usize;
    if n != layout.len() {
        return Err(FormatError::new(at, format!("{n} tensors, architecture needs {}", layout.len())));
    }
    for (name, rows, cols) in &layout {
        let at = r.pos();
        let len = r.u16("tensor name length")? as usize;
        let stored = r.take(len, "tensor name")?;
        let (sr, sc) = (r.u32("rows")? as usize, r.u32("cols")? as usize);
        if stored != name.as_bytes() || (sr, sc) != (*rows, *cols) {
            return Err(FormatError::new(
                at,
                format!(
                    "tensor {:?} {sr}x{sc} does not match architecture entry {name} {rows}x{cols}",
                    String::from_utf8_lossy(stored)
                ),
            ));
        }
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, rows, cols) in &layout {
        let at = r.pos();
        let data = r.f32s(rows * cols, name)?;
        tensors.push(Tensor::from_vec(*rows, *cols, data).map_err(|e| FormatError::new(at, e.to_string()))?);
    }
    let sizes: Vec<usize> = layout.iter().map(|(_, r, c)| r * c).collect();
    let params = ModelParams::from_tensors(config, tensors).map_err(|e| FormatError::new(arch_at, e.to_string()))?;

    let at = r.pos();
    let state = match r.u8("state flag")? {
        0 => None,
        1 => {
            let iteration = r.u64("iteration")?;
            let step = r.u64("optimizer step")?;
            let adam = AdamConfig {
                beta1: r.f64("beta1")?,
                beta2: r.f64("beta2")?,
                eps: r.f64("eps")?,
            };
            let read_blocks = |r: &mut Reader<'_>| -> Result<Vec<Vec<f32>>, FormatError> {
                sizes.iter().map(|&s| r.f32s(s, "optimizer moments")).collect()
            };
            let m = read_blocks(&mut r)?;
            let v = read_blocks(&mut r)?;
            Some(TrainingState {
                iteration,
                adam: Adam::from_state(adam, step, m, v),
            })
        }
        other => return Err(FormatError::new(at, format!("state flag {other} is not 0 or 1"))),
    };
    if r.pos() != body_end {
        let pos = r.pos().min(body_end);
        return Err(FormatError::new(pos, "payload length does not match the architecture"));
    }
    Ok(Checkpoint { params, state })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    write_atomic(path, &encode_checkpoint(ckpt))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    decode_checkpoint(&read_bytes(path)?).map_err(|source| IoError::Format {
        path: path.to_path_buf(),
        source,
    })
}
