//! The descriptor-to-scene-coordinate regressor.
//!
//! `L` residual self-attention layers refine every descriptor using all other
//! descriptors of the same frame, then a shared MLP maps each refined
//! descriptor to `(x, y, z, p)`. The raw `p` becomes a reliability score in
//! `(0, 1]` through `1 / (1 + |beta * p|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("descriptor dimension {got} does not match the model ({expected})")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid network configuration: {0}")]
    BadConfig(String),
    #[error("descriptor set is empty")]
    EmptySet,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub descriptor_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden widths of the shared head between `descriptor_dim` and the 4 outputs.
    pub head_hidden: Vec<usize>,
    pub beta: f64,
}

impl NetConfig {
    /// Five attention layers of four heads and a `D-512-1024-1024-512-4` head.
    pub fn full(descriptor_dim: usize) -> Self {
        Self {
            descriptor_dim,
            layers: 5,
            heads: 4,
            head_hidden: vec![512, 1024, 1024, 512],
            beta: 100.0,
        }
    }

    /// Reduced network for desk-scale runs.
    pub fn desk(descriptor_dim: usize) -> Self {
        Self {
            descriptor_dim,
            layers: 2,
            heads: 4,
            head_hidden: vec![128, 256, 256, 128],
            beta: 100.0,
        }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.descriptor_dim == 0 {
            return Err(NetError::BadConfig("descriptor dimension must be positive".into()));
        }
        if self.heads == 0 || !self.descriptor_dim.is_multiple_of(self.heads) {
            return Err(NetError::BadConfig(format!(
                "descriptor dimension {} is not divisible by {} heads",
                self.descriptor_dim, self.heads
            )));
        }
        if self.head_hidden.contains(&0) {
            return Err(NetError::BadConfig("head widths must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(NetError::BadConfig(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.descriptor_dim / self.heads
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let d = self.descriptor_dim;
        let mut out = Vec::new();
        for l in 0..self.layers {
            for (name, rows, cols) in [
                ("wq", d, d),
                ("bq", 1, d),
                ("wk", d, d),
                ("bk", 1, d),
                ("wv", d, d),
                ("bv", 1, d),
                ("merge_w", d, d),
                ("merge_b", 1, d),
                ("mlp0_w", 2 * d, 2 * d),
                ("mlp0_b", 1, 2 * d),
                ("mlp1_w", 2 * d, d),
            ] {
                out.push((format!("attn{l}.{name}"), rows, cols));
            }
        }
        let mut widths = vec![d];
        widths.extend(&self.head_hidden);
        widths.push(4);
        for (i, pair) in widths.windows(2).enumerate() {
            out.push((format!("head{i}.w"), pair[0], pair[1]));
            out.push((format!("head{i}.b"), 1, pair[1]));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, r, c)| r * c).sum()
    }
}

const PER_LAYER: usize = 11;

fn is_bias(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(leaf, "b" | "bq" | "bk" | "bv") || leaf.ends_with("_b")
}

/// All learnable weights, stored in [`NetConfig::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: NetConfig,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, rows, cols)| {
                if is_bias(&name) {
                    Tensor::zeros(rows, cols)
                } else {
                    let bound = 1.0 / (rows as f64).sqrt();
                    Tensor::from_fn(rows, cols, |_, _| T::of(rng.random_range(-bound..bound)))
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Wraps existing tensors; shapes must follow the configuration's layout.
    pub fn from_tensors(config: NetConfig, tensors: Vec<Tensor<T>>) -> Result<Self, NetError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(NetError::BadConfig(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, r, c), t) in layout.iter().zip(&tensors) {
            if t.shape() != (*r, *c) {
                return Err(NetError::BadConfig(format!(
                    "{name}: expected {r}x{c}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every tensor on `tape`, trainable or constant.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant_tensor(t) })
            .collect()
    }

    /// Adds the tape gradients of `vars` into the parameter accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &[Var]) -> Result<(), DiffError> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Descriptors (`K x D`, row-major) and keypoints of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    descriptors: Vec<f32>,
    keypoints: Vec<[f32; 2]>,
}

impl DescriptorSet {
    pub fn new(dim: usize, descriptors: Vec<f32>, keypoints: Vec<[f32; 2]>) -> Result<Self, NetError> {
        if dim == 0 || keypoints.is_empty() {
            return Err(NetError::EmptySet);
        }
        if descriptors.len() != keypoints.len() * dim {
            return Err(NetError::DimensionMismatch {
                expected: keypoints.len() * dim,
                got: descriptors.len(),
            });
        }
        if descriptors.iter().any(|v| v.is_nan()) || keypoints.iter().flatten().any(|v| v.is_nan()) {
            return Err(NetError::BadConfig("descriptor set contains NaN".into()));
        }
        Ok(Self {
            dim,
            descriptors,
            keypoints,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptors(&self) -> &[f32] {
        &self.descriptors
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keypoints(&self) -> &[[f32; 2]] {
        &self.keypoints
    }

    pub fn keypoints_mut(&mut self) -> &mut [[f32; 2]] {
        &mut self.keypoints
    }

    pub fn descriptors_mut(&mut self) -> &mut [f32] {
        &mut self.descriptors
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(self.len(), self.dim, self.descriptors.iter().map(|&v| T::of(v as f64)).collect())
            .expect("descriptor set shape is consistent")
    }

    /// Rows reordered so that row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            dim: self.dim,
            descriptors: order.iter().flat_map(|&i| self.descriptor(i).iter().copied()).collect(),
            keypoints: order.iter().map(|&i| self.keypoints[i]).collect(),
        }
    }
}

/// Per-descriptor network output.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneCoordinateSet<T> {
    pub coords: Vec<[T; 3]>,
    pub raw_p: Vec<T>,
    pub reliability: Vec<T>,
}

impl<T: Scalar> SceneCoordinateSet<T> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn from_output(out: &[T], beta: f64) -> Self {
        let beta = T::of(beta);
        let mut coords = Vec::with_capacity(out.len() / 4);
        let mut raw_p = Vec::with_capacity(out.len() / 4);
        for row in out.chunks(4) {
            coords.push([row[0], row[1], row[2]]);
            raw_p.push(row[3]);
        }
        let reliability = raw_p.iter().map(|&p| reliability(p, beta)).collect();
        Self {
            coords,
            raw_p,
            reliability,
        }
    }
}

/// `1 / (1 + |beta * p|)`, in `(0, 1]`.
pub fn reliability<T: Scalar>(raw_p: T, beta: T) -> T {
    T::one() / (T::one() + (beta * raw_p).abs())
}

/// Tape handles of the network output for a stacked batch.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// `R x 3`
    pub coords: Var,
    /// `R x 1`
    pub raw_p: Var,
}

struct LayerVars<'a>(&'a [Var]);

impl LayerVars<'_> {
    fn wq(&self) -> Var { self.0[0] }
    fn bq(&self) -> Var { self.0[1] }
    fn wk(&self) -> Var { self.0[2] }
    fn bk(&self) -> Var { self.0[3] }
    fn wv(&self) -> Var { self.0[4] }
    fn bv(&self) -> Var { self.0[5] }
    fn merge_w(&self) -> Var { self.0[6] }
    fn merge_b(&self) -> Var { self.0[7] }
    fn mlp0_w(&self) -> Var { self.0[8] }
    fn mlp0_b(&self) -> Var { self.0[9] }
    fn mlp1_w(&self) -> Var { self.0[10] }
}

fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    tape.affine(x, w, b)
}

/// One residual attention layer over a stack of frames.
///
/// `segments` gives the row count of each frame; attention never crosses a
/// segment boundary. Returns the updated stack and, when `keep_weights` is
/// set, the attention matrices per frame and head.
fn attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &NetConfig,
    layer: &[Var],
    x: Var,
    segments: &[usize],
    keep_weights: bool,
    exact: bool,
) -> Result<(Var, Vec<Var>), DiffError> {
    let p = LayerVars(layer);
    let dh = config.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let q = affine(tape, x, p.wq(), p.bq())?;
    let k = affine(tape, x, p.wk(), p.bk())?;
    let v = affine(tape, x, p.wv(), p.bv())?;

    // training path; the composite below sums in a fixed order for exact
    // permutation equivariance and can expose the weights
    if !exact && !keep_weights {
        let message = tape.attention(q, k, v, segments, config.heads, scale)?;
        return Ok((attention_tail(tape, &p, x, message)?, Vec::new()));
    }
    let mut weights = Vec::new();
    let mut frames = Vec::with_capacity(segments.len());
    let mut start = 0;
    for &len in segments {
        let (qf, kf, vf) = if segments.len() == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, start, len)?,
                tape.slice_rows(k, start, len)?,
                tape.slice_rows(v, start, len)?,
            )
        };
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let qh = tape.slice_cols(qf, h * dh, dh)?;
            let kh = tape.slice_cols(kf, h * dh, dh)?;
            let vh = tape.slice_cols(vf, h * dh, dh)?;
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let alpha = tape.softmax_rows(logits);
            if keep_weights {
                weights.push(alpha);
            }
            heads.push(tape.matmul_wide(alpha, vh)?);
        }
        frames.push(tape.concat_cols(&heads)?);
        start += len;
    }
    let message = if frames.len() == 1 { frames[0] } else { tape.concat_rows(&frames)? };
    Ok((attention_tail(tape, &p, x, message)?, weights))
}

/// Merge projection, residual MLP and skip connection after the attention.
fn attention_tail<T: Scalar>(tape: &mut Tape<T>, p: &LayerVars<'_>, x: Var, message: Var) -> Result<Var, DiffError> {
    let message = affine(tape, message, p.merge_w(), p.merge_b())?;
    let joined = tape.concat_cols(&[x, message])?;
    let hidden = affine(tape, joined, p.mlp0_w(), p.mlp0_b())?;
    let hidden = tape.relu(hidden);
    let delta = tape.matmul(hidden, p.mlp1_w())?;
    tape.add(x, delta)
}

fn head_on_tape<T: Scalar>(tape: &mut Tape<T>, head: &[Var], x: Var) -> Result<Var, DiffError> {
    let mut h = x;
    let n = head.len() / 2;
    for i in 0..n {
        h = affine(tape, h, head[2 * i], head[2 * i + 1])?;
        if i + 1 < n {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

impl<T: Scalar> ModelParams<T> {
    fn layer_vars<'a>(&self, vars: &'a [Var], l: usize) -> &'a [Var] {
        &vars[l * PER_LAYER..(l + 1) * PER_LAYER]
    }

    fn head_vars<'a>(&self, vars: &'a [Var]) -> &'a [Var] {
        &vars[self.config.layers * PER_LAYER..]
    }

    /// Records the forward pass of a stacked batch (`R x D`, frames given by
    /// `segments` row counts) using parameter handles from [`Self::register`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        input: Var,
        segments: &[usize],
    ) -> Result<NetOutput, NetError> {
        let (rows, cols) = tape.shape(input);
        if cols != self.config.descriptor_dim {
            return Err(NetError::DimensionMismatch {
                expected: self.config.descriptor_dim,
                got: cols,
            });
        }
        if rows == 0 || segments.iter().sum::<usize>() != rows || segments.contains(&0) {
            return Err(NetError::EmptySet);
        }
        let mut x = input;
        for l in 0..self.config.layers {
            x = attention_on_tape(tape, &self.config, self.layer_vars(vars, l), x, segments, false, false)?.0;
        }
        let out = head_on_tape(tape, self.head_vars(vars), x)?;
        Ok(NetOutput {
            coords: tape.slice_cols(out, 0, 3)?,
            raw_p: tape.slice_cols(out, 3, 1)?,
        })
    }

    /// Scene coordinates and reliabilities for one frame.
    pub fn forward(&self, input: &DescriptorSet) -> Result<SceneCoordinateSet<T>, NetError> {
        self.forward_tensor(&input.to_tensor())
    }

    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<SceneCoordinateSet<T>, NetError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let input = tape.constant_tensor(x);
        let mut h = input;
        if x.cols() != self.config.descriptor_dim {
            return Err(NetError::DimensionMismatch {
                expected: self.config.descriptor_dim,
                got: x.cols(),
            });
        }
        if x.rows() == 0 {
            return Err(NetError::EmptySet);
        }
        for l in 0..self.config.layers {
            h = attention_on_tape(&mut tape, &self.config, self.layer_vars(&vars, l), h, &[x.rows()], false, true)?.0;
        }
        let out = head_on_tape(&mut tape, self.head_vars(&vars), h)?;
        Ok(SceneCoordinateSet::from_output(tape.value(out), self.config.beta))
    }

    /// Head MLP applied row-wise with no attention.
    pub fn head_only(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let input = tape.constant_tensor(x);
        let out = head_on_tape(&mut tape, self.head_vars(&vars), input)?;
        Ok(tape.to_tensor(out))
    }

    /// Output of attention layer `layer` applied to `x` (one frame).
    pub fn attention_layer(&self, x: &Tensor<T>, layer: usize) -> Result<Tensor<T>, NetError> {
        Ok(self.attention_detail(x, layer)?.0)
    }

    /// Per-head `K x K` attention matrices of layer `layer` for input `x`.
    pub fn attention_weights(&self, x: &Tensor<T>, layer: usize) -> Result<Vec<Tensor<T>>, NetError> {
        Ok(self.attention_detail(x, layer)?.1)
    }

    fn attention_detail(&self, x: &Tensor<T>, layer: usize) -> Result<(Tensor<T>, Vec<Tensor<T>>), NetError> {
        if layer >= self.config.layers {
            return Err(NetError::BadConfig(format!(
                "layer {layer} out of range for {} layers",
                self.config.layers
            )));
        }
        if x.cols() != self.config.descriptor_dim {
            return Err(NetError::DimensionMismatch {
                expected: self.config.descriptor_dim,
                got: x.cols(),
            });
        }
        if x.rows() == 0 {
            return Err(NetError::EmptySet);
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let input = tape.constant_tensor(x);
        let (out, weights) =
            attention_on_tape(&mut tape, &self.config, self.layer_vars(&vars, layer), input, &[x.rows()], true, true)?;
        Ok((tape.to_tensor(out), weights.into_iter().map(|w| tape.to_tensor(w)).collect()))
    }
}
