use crate::scalar::Scalar;

use super::{DiffError, Tensor};

/// Smoothing constant of [`Tape::abs_smooth`]: `sqrt(x^2 + delta^2)`.
pub const ABS_SMOOTH_DELTA: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    MatMulWide { a: usize, b: usize },
    Affine { x: usize, w: usize, b: usize },
    Add { a: usize, b: usize, broadcast: bool },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, s: T },
    AddScalar { a: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    Relu(usize),
    SoftmaxRows(usize),
    Attention(Box<AttentionOp<T>>),
    Square(usize),
    AbsSmooth(usize),
    Recip(usize),
    Sum(usize),
    Mean(usize),
}

#[derive(Clone, Debug)]
struct AttentionOp<T> {
    q: usize,
    k: usize,
    v: usize,
    segments: Vec<usize>,
    heads: usize,
    scale: T,
    /// Row-softmax weights, one `n x n` block per segment and head.
    alpha: Vec<T>,
}

#[derive(Clone, Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in order; `backward` replays them in reverse.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_vec(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Trainable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Result<Var, DiffError> {
        if value.len() != rows * cols {
            return Err(DiffError::BadLength {
                rows,
                cols,
                len: value.len(),
            });
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    pub fn constant_tensor(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), k, 1, self.value(b), n, 1, T::zero(), &mut out, n, 1);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul { a: a.0, b: b.0, trans_b: false }, rg))
    }

    /// `x w + b` with the `1 x n` row `b` added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let ((m, k), (k2, n), bs) = (self.shape(x), self.shape(w), self.shape(b));
        if k != k2 || bs != (1, n) {
            return Err(DiffError::ShapeMismatch {
                op: "affine",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.value(b));
        }
        T::gemm(m, k, n, T::one(), self.value(x), k, 1, self.value(w), n, 1, T::one(), &mut out, n, 1);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(m, n, out, Op::Affine { x: x.0, w: w.0, b: b.0 }, rg))
    }

    /// `a (m x k) * b^T` with `b` stored as `n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul_nt",
                lhs: (m, k),
                rhs: (n, k2),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), k, 1, self.value(b), 1, k, T::zero(), &mut out, n, 1);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul { a: a.0, b: b.0, trans_b: true }, rg))
    }

    /// Same product as [`Tape::matmul`] but every output entry is accumulated
    /// in `f64` in index order before rounding, so reordering the inner
    /// dimension changes the result only at rounding ties.
    pub fn matmul_wide(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul_wide",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for p in 0..k {
                let aip = av[i * k + p].as_f64();
                for (x, &bpj) in acc.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *x += aip * bpj.as_f64();
                }
            }
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = T::of(x);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMulWide { a: a.0, b: b.0 }, rg))
    }

    /// Element-wise sum; `b` may also be a `1 x cols` row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let ((ra, ca), (rb, cb)) = (self.shape(a), self.shape(b));
        let broadcast = if (ra, ca) == (rb, cb) {
            false
        } else if rb == 1 && cb == ca {
            true
        } else {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                lhs: (ra, ca),
                rhs: (rb, cb),
            });
        };
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<T> = if broadcast {
            av.chunks(ca.max(1))
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(ra, ca, out, Op::Add { a: a.0, b: b.0, broadcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Sub { a: a.0, b: b.0 }, rg))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (r, c) = self.same_shape("div", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x / y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Div { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(r, c, out, Op::Scale { a: a.0, s }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let rg = self.rg(a);
        self.push(r, c, out, Op::AddScalar { a: a.0 }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or(DiffError::BadLength { rows: 0, cols: 0, len: 0 })?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: (r, c),
                });
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let n = self.node(p);
                out.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or(DiffError::BadLength { rows: 0, cols: 0, len: 0 })?;
        let cols = self.shape(first).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: (r, c),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(&self.node(p).value);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(DiffError::OutOfRange {
                op: "slice_cols",
                start,
                end: start + len,
                extent: cols,
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(rows, len, out, Op::SliceCols { a: a.0, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (rows, cols) = self.shape(a);
        if start + len > rows {
            return Err(DiffError::OutOfRange {
                op: "slice_rows",
                start,
                end: start + len,
                extent: rows,
            });
        }
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(len, cols, out, Op::SliceRows { a: a.0, start }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let rg = self.rg(a);
        self.push(r, c, out, Op::Relu(a.0), rg)
    }

    /// Row-wise softmax. The normalizer is accumulated in `f64`.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        softmax_in_place(&mut out, c);
        let rg = self.rg(a);
        self.push(r, c, out, Op::SoftmaxRows(a.0), rg)
    }

    /// Multi-head scaled dot-product attention within row segments.
    ///
    /// `q`, `k` and `v` are `R x D`; columns split into `heads` equal blocks
    /// and rows into consecutive `segments`. Each segment and head gets
    /// `softmax(scale * Q K^T) V`, written to the matching block of the output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[usize],
        heads: usize,
        scale: T,
    ) -> Result<Var, DiffError> {
        let (r, d) = self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let total: usize = segments.iter().sum();
        if heads == 0 || d % heads != 0 || total != r {
            return Err(DiffError::ShapeMismatch {
                op: "attention",
                lhs: (r, d),
                rhs: (total, heads),
            });
        }
        let dh = d / heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut alpha = Vec::with_capacity(segments.iter().map(|n| n * n).sum::<usize>() * heads);
        let mut out = vec![T::zero(); r * d];
        let mut start = 0;
        for &n in segments {
            for h in 0..heads {
                let off = start * d + h * dh;
                let base = alpha.len();
                alpha.resize(base + n * n, T::zero());
                let block = &mut alpha[base..];
                T::gemm(n, dh, n, scale, &qv[off..], d, 1, &kv[off..], 1, d, T::zero(), block, n, 1);
                softmax_in_place(block, n);
                T::gemm(n, n, dh, T::one(), block, n, 1, &vv[off..], d, 1, T::zero(), &mut out[off..], d, 1);
            }
            start += n;
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = AttentionOp {
            q: q.0,
            k: k.0,
            v: v.0,
            segments: segments.to_vec(),
            heads,
            scale,
            alpha,
        };
        Ok(self.push(r, d, out, Op::Attention(Box::new(op)), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * x).collect();
        let rg = self.rg(a);
        self.push(r, c, out, Op::Square(a.0), rg)
    }

    /// `sqrt(x^2 + delta^2)`: a differentiable stand-in for `|x|`.
    pub fn abs_smooth(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let d2 = T::of(ABS_SMOOTH_DELTA * ABS_SMOOTH_DELTA);
        let out = self.value(a).iter().map(|&x| (x * x + d2).sqrt()).collect();
        let rg = self.rg(a);
        self.push(r, c, out, Op::AbsSmooth(a.0), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.recip()).collect();
        let rg = self.rg(a);
        self.push(r, c, out, Op::Recip(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().fold(0.0f64, |s, &x| s + x.as_f64());
        let rg = self.rg(a);
        self.push(1, 1, vec![T::of(total)], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len().max(1) as f64;
        let total = v.iter().fold(0.0f64, |s, &x| s + x.as_f64());
        let rg = self.rg(a);
        self.push(1, 1, vec![T::of(total / n)], Op::Mean(a.0), rg)
    }

    /// Propagates d(loss)/d(node) to every node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(DiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = cols;
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let da = slot(grads, *a, m * k);
                    // dA = dC * B^T (B is k x n), or dC * B when B is stored n x k
                    if *trans_b {
                        T::gemm(m, n, k, T::one(), g, n, 1, bv, k, 1, T::one(), da, k, 1);
                    } else {
                        T::gemm(m, n, k, T::one(), g, n, 1, bv, 1, n, T::one(), da, k, 1);
                    }
                }
                if self.nodes[*b].requires_grad {
                    let db = slot(grads, *b, k * n);
                    if *trans_b {
                        // dB (n x k) = dC^T * A
                        T::gemm(n, m, k, T::one(), g, 1, n, av, k, 1, T::one(), db, k, 1);
                    } else {
                        // dB (k x n) = A^T * dC
                        T::gemm(k, m, n, T::one(), av, 1, k, g, n, 1, T::one(), db, n, 1);
                    }
                }
            }
            Op::MatMulWide { a, b } => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = cols;
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let da = slot(grads, *a, m * k);
                    T::gemm(m, n, k, T::one(), g, n, 1, bv, 1, n, T::one(), da, k, 1);
                }
                if self.nodes[*b].requires_grad {
                    let db = slot(grads, *b, k * n);
                    T::gemm(k, m, n, T::one(), av, 1, k, g, n, 1, T::one(), db, n, 1);
                }
            }
            Op::Affine { x, w, b } => {
                let (m, k) = (self.nodes[*x].rows, self.nodes[*x].cols);
                let n = cols;
                if self.nodes[*x].requires_grad {
                    let dx = slot(grads, *x, m * k);
                    T::gemm(m, n, k, T::one(), g, n, 1, &self.nodes[*w].value, 1, n, T::one(), dx, k, 1);
                }
                if self.nodes[*w].requires_grad {
                    let dw = slot(grads, *w, k * n);
                    T::gemm(k, m, n, T::one(), &self.nodes[*x].value, 1, k, g, n, 1, T::one(), dw, n, 1);
                }
                if self.nodes[*b].requires_grad {
                    let db = slot(grads, *b, n);
                    for row in g.chunks(n.max(1)) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if self.nodes[*a].requires_grad {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.nodes[*b].requires_grad {
                    if *broadcast {
                        let db = slot(grads, *b, cols);
                        for row in g.chunks(cols.max(1)) {
                            add_into(db, row);
                        }
                    } else {
                        add_into(slot(grads, *b, g.len()), g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[*a].requires_grad {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.nodes[*b].requires_grad {
                    slot(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let da = slot(grads, *a, g.len());
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if self.nodes[*b].requires_grad {
                    let db = slot(grads, *b, g.len());
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let da = slot(grads, *a, g.len());
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x / y;
                    }
                }
                if self.nodes[*b].requires_grad {
                    let db = slot(grads, *b, g.len());
                    for (((d, &x), &num), &den) in db.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= x * num / (den * den);
                    }
                }
            }
            Op::Scale { a, s } => {
                let da = slot(grads, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *s);
            }
            Op::AddScalar { a } => add_into(slot(grads, *a, g.len()), g),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    if self.nodes[p].requires_grad {
                        let dp = slot(grads, p, rows * pc);
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * pc..(r + 1) * pc],
                                &g[r * cols + offset..r * cols + offset + pc],
                            );
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if self.nodes[p].requires_grad {
                        add_into(slot(grads, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { a, start } => {
                let ac = self.nodes[*a].cols;
                let da = slot(grads, *a, rows * ac);
                for r in 0..rows {
                    add_into(&mut da[r * ac + start..r * ac + start + cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::SliceRows { a, start } => {
                let len = self.nodes[*a].value.len();
                let da = slot(grads, *a, len);
                add_into(&mut da[start * cols..start * cols + g.len()], g);
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                let da = slot(grads, *a, g.len());
                for ((d, &x), &v) in da.iter_mut().zip(g).zip(av) {
                    if v > T::zero() {
                        *d += x;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                softmax_backward(slot(grads, *a, g.len()), g, &node.value, cols);
            }
            Op::Attention(op) => self.attention_backward(op, g, cols, grads),
            Op::Square(a) => {
                let av = &self.nodes[*a].value;
                let two = T::of(2.0);
                let da = slot(grads, *a, g.len());
                for ((d, &x), &v) in da.iter_mut().zip(g).zip(av) {
                    *d += two * v * x;
                }
            }
            Op::AbsSmooth(a) => {
                let av = &self.nodes[*a].value;
                let y = &node.value;
                let da = slot(grads, *a, g.len());
                for (((d, &x), &v), &yy) in da.iter_mut().zip(g).zip(av).zip(y) {
                    *d += x * v / yy;
                }
            }
            Op::Recip(a) => {
                let y = &node.value;
                let da = slot(grads, *a, g.len());
                for ((d, &x), &yy) in da.iter_mut().zip(g).zip(y) {
                    *d -= x * yy * yy;
                }
            }
            Op::Sum(a) => {
                let len = self.nodes[*a].value.len();
                slot(grads, *a, len).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let len = self.nodes[*a].value.len();
                let share = g[0] / T::of(len.max(1) as f64);
                slot(grads, *a, len).iter_mut().for_each(|d| *d += share);
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn attention_backward(&self, op: &AttentionOp<T>, g: &[T], d: usize, grads: &mut [Option<Vec<T>>]) {
        let dh = d / op.heads;
        let (qv, kv, vv) = (&self.nodes[op.q].value, &self.nodes[op.k].value, &self.nodes[op.v].value);
        let mut dq = vec![T::zero(); g.len()];
        let mut dk = vec![T::zero(); g.len()];
        let mut dv = vec![T::zero(); g.len()];
        let (mut start, mut base) = (0, 0);
        let mut dalpha = Vec::new();
        let mut dlogits = Vec::new();
        for &n in &op.segments {
            for h in 0..op.heads {
                let off = start * d + h * dh;
                let alpha = &op.alpha[base..base + n * n];
                base += n * n;
                // dV = A^T G, dA = G V^T
                T::gemm(n, n, dh, T::one(), alpha, 1, n, &g[off..], d, 1, T::one(), &mut dv[off..], d, 1);
                dalpha.clear();
                dalpha.resize(n * n, T::zero());
                T::gemm(n, dh, n, T::one(), &g[off..], d, 1, &vv[off..], 1, d, T::zero(), &mut dalpha, n, 1);
                dlogits.clear();
                dlogits.resize(n * n, T::zero());
                softmax_backward(&mut dlogits, &dalpha, alpha, n);
                T::gemm(n, n, dh, op.scale, &dlogits, n, 1, &kv[off..], d, 1, T::one(), &mut dq[off..], d, 1);
                T::gemm(n, n, dh, op.scale, &dlogits, 1, n, &qv[off..], d, 1, T::one(), &mut dk[off..], d, 1);
            }
            start += n;
        }
        for (idx, grad) in [(op.q, dq), (op.k, dk), (op.v, dv)] {
            if self.nodes[idx].requires_grad {
                add_into(slot(grads, idx, grad.len()), &grad);
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(values: &mut [T], cols: usize) {
    for row in values.chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = 0.0f64;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += x.as_f64();
        }
        let inv = 1.0 / total;
        for x in row.iter_mut() {
            *x = T::of(x.as_f64() * inv);
        }
    }
}

/// Adds the softmax vector-Jacobian product of `g` at output `y` into `da`.
fn softmax_backward<T: Scalar>(da: &mut [T], g: &[T], y: &[T], cols: usize) {
    let c = cols.max(1);
    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
        let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&gg, &yy)| s + gg * yy);
        for ((d, &gg), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
            *d += yy * (gg - dot);
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut [T] {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
