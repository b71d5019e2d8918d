//! Operation tape: eager forward execution with recorded reverse rules.

use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Probability clamp for binary cross entropy, keeping `ln` finite.
pub const BCE_EPS: f64 = 1e-7;
/// Variance stabilizer inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    /// `out = opA(a) . opB(b)` with optional transposes applied via strides.
    Matmul {
        a: Var,
        b: Var,
        out: Var,
        ta: bool,
        tb: bool,
    },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    /// Elementwise product.
    Mul { a: Var, b: Var, out: Var },
    /// Multiply by a compile-time-constant scalar.
    Scale { a: Var, out: Var, c: f64 },
    /// Broadcast-add a `[rows,1]` vector to every column.
    AddColVec { a: Var, v: Var, out: Var },
    Sigmoid { a: Var, out: Var },
    Tanh { a: Var, out: Var },
    Relu { a: Var, out: Var },
    /// Column-wise softmax with max subtraction.
    SoftmaxCols { a: Var, out: Var },
    /// Column-wise normalization over the row axis, then affine gain/bias.
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        out: Var,
    },
    ConcatRows { parts: Vec<Var>, out: Var },
    ConcatCols { parts: Vec<Var>, out: Var },
    SliceRows {
        a: Var,
        out: Var,
        start: usize,
        len: usize,
    },
    SliceCol { a: Var, out: Var, col: usize },
    /// `out[:, j] = a[:, idx[j]]`.
    GatherCols { a: Var, out: Var, idx: Vec<usize> },
    Transpose { a: Var, out: Var },
    /// Elementwise mean of same-shape tensors.
    MeanList { parts: Vec<Var>, out: Var },
    /// Scalar sum of all elements.
    SumAll { a: Var, out: Var },
    /// Scalar squared Frobenius norm.
    FrobeniusSq { a: Var, out: Var },
    /// Elementwise binary cross entropy of probabilities `p` against labels `y`,
    /// with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    Bce { p: Var, y: Var, out: Var },
}

/// Reverse-mode tape. Ops execute eagerly; `backward` replays the records.
///
/// A tape built with [`Tape::inference`] keeps values but records nothing,
/// for forward passes whose gradients are never needed (frozen teachers,
/// evaluation).
pub struct Tape<T> {
    nodes: Vec<Tensor<T>>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates ops but records no reverse rules.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Register a leaf value (input or parameter snapshot).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0]
    }

    /// Accumulated gradient for `v`, zeros if nothing flowed to it.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(&shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn push(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(t);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) {
        if self.recording {
            self.ops.push(op);
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].shape()
    }

    fn require_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0];
        if !t.is_matrix() {
            return Err(TensorError::BadShape {
                op,
                expected: "matrix",
                shape: t.shape().to_vec(),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    fn require_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- op constructors -------------------------------------------------

    /// `opA(a) . opB(b)` where `ta`/`tb` transpose the operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.require_matrix("matmul", a)?;
        let (br, bc) = self.require_matrix("matmul", b)?;
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        let (rsa, csa) = strides(ar, ac, ta);
        let (rsb, csb) = strides(br, bc, tb);
        T::gemm(
            m,
            ka,
            n,
            T::one(),
            self.nodes[a.0].data(),
            rsa,
            csa,
            self.nodes[b.0].data(),
            rsb,
            csb,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let out = self.push(out);
        self.record(Op::Matmul { a, b, out, ta, tb });
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a^T . b`, the usual inner-product orientation for logits and scores.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, true, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("add", a, b)?;
        let out = zip_map(&self.nodes[a.0], &self.nodes[b.0], |x, y| x + y);
        let out = self.push(out);
        self.record(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("subtract", a, b)?;
        let out = zip_map(&self.nodes[a.0], &self.nodes[b.0], |x, y| x - y);
        let out = self.push(out);
        self.record(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("mul", a, b)?;
        let out = zip_map(&self.nodes[a.0], &self.nodes[b.0], |x, y| x * y);
        let out = self.push(out);
        self.record(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::fl(c);
        let out = map(&self.nodes[a.0], |x| x * k);
        let out = self.push(out);
        self.record(Op::Scale { a, out, c });
        Ok(out)
    }

    /// Add column vector `v` (`[rows,1]`) to every column of `a`.
    pub fn add_col_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.require_matrix("add_col_vec", a)?;
        let (vr, vc) = self.require_matrix("add_col_vec", v)?;
        if vr != rows || vc != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_col_vec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let mut out = self.nodes[a.0].clone();
        {
            let vd = self.nodes[v.0].data();
            let od = out.data_mut();
            for r in 0..rows {
                let add = vd[r];
                for x in &mut od[r * cols..(r + 1) * cols] {
                    *x += add;
                }
            }
        }
        let out = self.push(out);
        self.record(Op::AddColVec { a, v, out });
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let out = map(&self.nodes[a.0], |x| one / (one + (-x).exp()));
        let out = self.push(out);
        self.record(Op::Sigmoid { a, out });
        out
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(&self.nodes[a.0], |x| x.tanh());
        let out = self.push(out);
        self.record(Op::Tanh { a, out });
        out
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let z = T::zero();
        let out = map(&self.nodes[a.0], |x| if x > z { x } else { z });
        let out = self.push(out);
        self.record(Op::Relu { a, out });
        out
    }

    /// Column-wise softmax (each column is nonnegative and sums to one).
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.require_matrix("softmax_columns", a)?;
        let src = self.nodes[a.0].data();
        let mut out = Tensor::zeros(&[rows, cols]);
        let od = out.data_mut();
        for c in 0..cols {
            let mut mx = T::neg_infinity();
            for r in 0..rows {
                mx = mx.max(src[r * cols + c]);
            }
            let mut sum = T::zero();
            for r in 0..rows {
                let e = (src[r * cols + c] - mx).exp();
                od[r * cols + c] = e;
                sum += e;
            }
            for r in 0..rows {
                od[r * cols + c] = od[r * cols + c] / sum;
            }
        }
        let out = self.push(out);
        self.record(Op::SoftmaxCols { a, out });
        Ok(out)
    }

    /// Normalize each column of `a` to zero mean and unit variance over the
    /// row axis (epsilon-stabilized), then apply elementwise `gain` and `bias`
    /// (`[rows,1]` each, broadcast across columns).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.require_matrix("layer_norm", a)?;
        for v in [gain, bias] {
            let (vr, vc) = self.require_matrix("layer_norm", v)?;
            if vr != rows || vc != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![rows, cols],
                    rhs: vec![vr, vc],
                });
            }
        }
        let out = layer_norm_forward(
            &self.nodes[a.0],
            self.nodes[gain.0].data(),
            self.nodes[bias.0].data(),
        );
        let out = self.push(out);
        self.record(Op::LayerNorm { a, gain, bias, out });
        Ok(out)
    }

    /// Stack matrices vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, cols) = self.require_matrix("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.require_matrix("concat_rows", p)?;
            if pc != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].data());
        }
        let out = self.push(Tensor::new(&[rows, cols], data)?);
        self.record(Op::ConcatRows {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Stack matrices horizontally; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (rows, _) = self.require_matrix("concat_cols", parts[0])?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.require_matrix("concat_cols", p)?;
            if pr != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            cols += pc;
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        {
            let od = out.data_mut();
            let mut base = 0;
            for &p in parts {
                let t = &self.nodes[p.0];
                let pc = t.cols();
                for r in 0..rows {
                    od[r * cols + base..r * cols + base + pc]
                        .copy_from_slice(&t.data()[r * pc..(r + 1) * pc]);
                }
                base += pc;
            }
        }
        let out = self.push(out);
        self.record(Op::ConcatCols {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.require_matrix("slice_rows", a)?;
        if start + len > rows {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_rows",
                index: start + len,
                shape: vec![rows, cols],
            });
        }
        let data = self.nodes[a.0].data()[start * cols..(start + len) * cols].to_vec();
        let out = self.push(Tensor::new(&[len, cols], data)?);
        self.record(Op::SliceRows { a, out, start, len });
        Ok(out)
    }

    /// Extract column `col` as a `[rows,1]` tensor.
    pub fn slice_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let (rows, cols) = self.require_matrix("slice_col", a)?;
        if col >= cols {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_col",
                index: col,
                shape: vec![rows, cols],
            });
        }
        let out = self.push(self.nodes[a.0].col(col));
        self.record(Op::SliceCol { a, out, col });
        Ok(out)
    }

    /// Reorder columns: `out[:, j] = a[:, idx[j]]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.require_matrix("gather_cols", a)?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather_cols",
                index: bad,
                shape: vec![rows, cols],
            });
        }
        let src = self.nodes[a.0].data();
        let mut out = Tensor::zeros(&[rows, idx.len()]);
        {
            let od = out.data_mut();
            let oc = idx.len();
            for r in 0..rows {
                for (j, &sj) in idx.iter().enumerate() {
                    od[r * oc + j] = src[r * cols + sj];
                }
            }
        }
        let out = self.push(out);
        self.record(Op::GatherCols {
            a,
            out,
            idx: idx.to_vec(),
        });
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.require_matrix("transpose", a)?;
        let src = self.nodes[a.0].data();
        let mut out = Tensor::zeros(&[cols, rows]);
        {
            let od = out.data_mut();
            for r in 0..rows {
                for c in 0..cols {
                    od[c * rows + r] = src[r * cols + c];
                }
            }
        }
        let out = self.push(out);
        self.record(Op::Transpose { a, out });
        Ok(out)
    }

    /// Elementwise mean over a nonempty list of same-shape tensors.
    pub fn mean_list(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "mean_list",
                expected: "at least one tensor",
                shape: vec![],
            });
        }
        for &p in &parts[1..] {
            self.require_same_shape("mean_list", parts[0], p)?;
        }
        let mut out = self.nodes[parts[0].0].clone();
        for &p in &parts[1..] {
            let pd = self.nodes[p.0].data();
            for (o, &x) in out.data_mut().iter_mut().zip(pd) {
                *o += x;
            }
        }
        let inv = T::one() / T::fl(parts.len() as f64);
        for o in out.data_mut() {
            *o *= inv;
        }
        let out = self.push(out);
        self.record(Op::MeanList {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Sum of all elements as a `[1,1]` scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0]
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        let out = self.push(Tensor::scalar(s));
        self.record(Op::SumAll { a, out });
        out
    }

    /// Squared Frobenius norm as a `[1,1]` scalar.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0]
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x);
        let out = self.push(Tensor::scalar(s));
        self.record(Op::FrobeniusSq { a, out });
        out
    }

    /// Elementwise binary cross entropy `-(y ln p + (1-y) ln(1-p))` with `p`
    /// clamped to `[BCE_EPS, 1-BCE_EPS]`. Labels flow no gradient in practice
    /// but receive their analytic adjoint anyway.
    pub fn bce_elementwise(&mut self, p: Var, y: Var) -> Result<Var> {
        self.require_same_shape("bce_elementwise", p, y)?;
        let lo = T::fl(BCE_EPS);
        let hi = T::one() - lo;
        let out = zip_map(&self.nodes[p.0], &self.nodes[y.0], |pv, yv| {
            let pc = pv.max(lo).min(hi);
            -(yv * pc.ln() + (T::one() - yv) * (T::one() - pc).ln())
        });
        let out = self.push(out);
        self.record(Op::Bce { p, y, out });
        Ok(out)
    }

    // ---- backward --------------------------------------------------------

    /// Seed `d loss / d loss = 1` and replay all records in reverse.
    /// `loss` must be a `[1,1]` scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape().to_vec(),
            });
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        let Tape {
            nodes, ops, grads, ..
        } = self;
        for op in ops.iter().rev() {
            backward_op(op, nodes, grads);
        }
        Ok(())
    }
}

#[inline]
fn strides(_rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn map<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("same shape")
}

fn layer_norm_forward<T: Scalar>(a: &Tensor<T>, gain: &[T], bias: &[T]) -> Tensor<T> {
    let (rows, cols) = (a.rows(), a.cols());
    let src = a.data();
    let eps = T::fl(LAYER_NORM_EPS);
    let inv_rows = T::one() / T::fl(rows as f64);
    let mut out = Tensor::zeros(&[rows, cols]);
    let od = out.data_mut();
    for c in 0..cols {
        let mut mean = T::zero();
        for r in 0..rows {
            mean += src[r * cols + c];
        }
        mean *= inv_rows;
        let mut var = T::zero();
        for r in 0..rows {
            let d = src[r * cols + c] - mean;
            var += d * d;
        }
        var *= inv_rows;
        let inv_std = T::one() / (var + eps).sqrt();
        for r in 0..rows {
            let xhat = (src[r * cols + c] - mean) * inv_std;
            od[r * cols + c] = gain[r] * xhat + bias[r];
        }
    }
    out
}

/// Add `delta` into the gradient accumulator of `v`.
fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (gi, &d) in g.iter_mut().zip(delta) {
                *gi += d;
            }
        }
        None => grads[v.0] = Some(delta.to_vec()),
    }
}

/// Grab the accumulator of `v`, zero-initialized, for in-place writes.
fn grad_buf<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Tensor<T>],
    v: Var,
) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].len()])
}

fn backward_op<T: Scalar>(op: &Op, nodes: &[Tensor<T>], grads: &mut [Option<Vec<T>>]) {
    match *op {
        Op::Matmul { a, b, out, ta, tb } => {
            let Some(g) = grads[out.0].take() else { return };
            let (m, n) = (nodes[out.0].rows(), nodes[out.0].cols());
            let (ar, ac) = (nodes[a.0].rows(), nodes[a.0].cols());
            let (br, bc) = (nodes[b.0].rows(), nodes[b.0].cols());
            let k = if ta { ar } else { ac };
            let (gs_r, gs_c) = (n as isize, 1);
            // d opA(a) = g . opB(b)^T, written back through opA's layout.
            {
                let (rsb, csb) = strides(br, bc, tb);
                let da = grad_buf(grads, nodes, a);
                if !ta {
                    // a is m x k: da = g . opB(b)^T
                    T::gemm(
                        m, n, k, T::one(), &g, gs_r, gs_c,
                        nodes[b.0].data(), csb, rsb, // opB(b)^T via swapped strides
                        T::one(), da, ac as isize, 1,
                    );
                } else {
                    // a is k x m: da = opB(b) . g^T
                    T::gemm(
                        k, n, m, T::one(), nodes[b.0].data(), rsb, csb,
                        &g, gs_c, gs_r, // g^T
                        T::one(), da, ac as isize, 1,
                    );
                }
            }
            // d opB(b) = opA(a)^T . g, written back through opB's layout.
            {
                let (rsa, csa) = strides(ar, ac, ta);
                let db = grad_buf(grads, nodes, b);
                if !tb {
                    // b is k x n: db = opA(a)^T . g
                    T::gemm(
                        k, m, n, T::one(), nodes[a.0].data(), csa, rsa,
                        &g, gs_r, gs_c,
                        T::one(), db, bc as isize, 1,
                    );
                } else {
                    // b is n x k: db = g^T . opA(a)
                    T::gemm(
                        n, m, k, T::one(), &g, gs_c, gs_r,
                        nodes[a.0].data(), rsa, csa,
                        T::one(), db, bc as isize, 1,
                    );
                }
            }
            grads[out.0] = Some(g);
        }
        Op::Add { a, b, out } => {
            let Some(g) = grads[out.0].take() else { return };
            accumulate(grads, a, &g);
            accumulate(grads, b, &g);
            grads[out.0] = Some(g);
        }
        Op::Sub { a, b, out } => {
            let Some(g) = grads[out.0].take() else { return };
            accumulate(grads, a, &g);
            {
                let db = grad_buf(grads, nodes, b);
                for (d, &gi) in db.iter_mut().zip(&g) {
                    *d -= gi;
                }
            }
            grads[out.0] = Some(g);
        }
        Op::Mul { a, b, out } => {
            let Some(g) = grads[out.0].take() else { return };
            {
                let bd = nodes[b.0].data();
                let da = grad_buf(grads, nodes, a);
                for i in 0..g.len() {
                    da[i] += g[i] * bd[i];
                }
            }
            {
                let ad = nodes[a.0].data();
                let db = grad_buf(grads, nodes, b);
                for i in 0..g.len() {
                    db[i] += g[i] * ad[i];
                }
            }
            grads[out.0] = Some(g);
        }
        Op::Scale { a, out, c } => {
            let Some(g) = grads[out.0].take() else { return };
            let k = T::fl(c);
            let da = grad_buf(grads, nodes, a);
            for (d, &gi) in da.iter_mut().zip(&g) {
                *d += k * gi;
            }
            grads[out.0] = Some(g);
        }
        Op::AddColVec { a, v, out } => {
            let Some(g) = grads[out.0].take() else { return };
            accumulate(grads, a, &g);
            {
                let cols = nodes[a.0].cols();
                let dv = grad_buf(grads, nodes, v);
                for (r, dvr) in dv.iter_mut().enumerate() {
                    for c in 0..cols {
                        *dvr += g[r * cols + c];
                    }
                }
            }
            grads[out.0] = Some(g);
        }
        Op::Sigmoid { a, out } => {
            let Some(g) = grads[out.0].take() else { return };
            {
                let y = nodes[out.0].data();
                let da = grad_buf(grads, nodes, a);
                for i in 0..g.len() {
                    da[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            }
            grads[out.0] = Some(g);
        }
        Op::Tanh { a, out } => {
            let Some(g) = grads[out.0].take() else { return };
            {
                let y = nodes[out.0].data();
                let da = grad_buf(grads, nodes, a);
                for i in 0..g.len() {
                    da[i] += g[i] * (T::one() - y[i] * y[i]);
                }
            }
            grads[out.0] = Some(g);
        }
        Op::Relu { a, out } => {
            let Some(g) = grads[out.0].take() else { return };
            {
                let x = nodes[a.0].data();
                let da = grad_buf(grads, nodes, a);
                for i in 0..g.len() {
                    if x[i] > T::zero() {
                        da[i] += g[i];
                    }
                }
            }
            grads[out.0] = Some(g);
        }
        Op::SoftmaxCols { a, out } => {
            let Some(g) = grads[out.0].take() else { return };
            {
                let y = nodes[out.0].data();
                let (rows, cols) = (nodes[out.0].rows(), nodes[out.0].cols());
                let da = grad_buf(grads, nodes, a);
                for c in 0..cols {
                    let mut dot = T::zero();
                    for r in 0..rows {
                        dot += g[r * cols + c] * y[r * cols + c];
                    }
                    for r in 0..rows {
                        let i = r * cols + c;
                        da[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            grads[out.0] = Some(g);
        }
        Op::LayerNorm { a, gain, bias, out } => {
            let Some(g) = grads[out.0].take() else { return };
            let (rows, cols) = (nodes[a.0].rows(), nodes[a.0].cols());
            let src = nodes[a.0].data();
            let gn = nodes[gain.0].data();
            let eps = T::fl(LAYER_NORM_EPS);
            let inv_rows = T::one() / T::fl(rows as f64);
            let mut dgain = vec![T::zero(); rows];
            let mut dbias = vec![T::zero(); rows];
            {
                let da = grad_buf(grads, nodes, a);
                for c in 0..cols {
                    let mut mean = T::zero();
                    for r in 0..rows {
                        mean += src[r * cols + c];
                    }
                    mean *= inv_rows;
                    let mut var = T::zero();
                    for r in 0..rows {
                        let d = src[r * cols + c] - mean;
                        var += d * d;
                    }
                    var *= inv_rows;
                    let inv_std = T::one() / (var + eps).sqrt();
                    // dxhat = gain * g; column means of dxhat and dxhat*xhat
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for r in 0..rows {
                        let i = r * cols + c;
                        let xhat = (src[i] - mean) * inv_std;
                        let dxh = gn[r] * g[i];
                        m1 += dxh;
                        m2 += dxh * xhat;
                        dgain[r] += g[i] * xhat;
                        dbias[r] += g[i];
                    }
                    m1 *= inv_rows;
                    m2 *= inv_rows;
                    for r in 0..rows {
                        let i = r * cols + c;
                        let xhat = (src[i] - mean) * inv_std;
                        let dxh = gn[r] * g[i];
                        da[i] += (dxh - m1 - xhat * m2) * inv_std;
                    }
                }
            }
            accumulate(grads, gain, &dgain);
            accumulate(grads, bias, &dbias);
            grads[out.0] = Some(g);
        }
        Op::ConcatRows { ref parts, out } => {
            let Some(g) = grads[out.0].take() else { return };
            let cols = nodes[out.0].cols();
            let mut row = 0;
            for &p in parts {
                let pr = nodes[p.0].rows();
                accumulate(grads, p, &g[row * cols..(row + pr) * cols]);
                row += pr;
            }
            grads[out.0] = Some(g);
        }
        Op::ConcatCols { ref parts, out } => {
            let Some(g) = grads[out.0].take() else { return };
            let (rows, cols) = (nodes[out.0].rows(), nodes[out.0].cols());
            let mut base = 0;
            for &p in parts {
                let pc = nodes[p.0].cols();
                {
                    let dp = grad_buf(grads, nodes, p);
                    for r in 0..rows {
                        for j in 0..pc {
                            dp[r * pc + j] += g[r * cols + base + j];
                        }
                    }
                }
                base += pc;
            }
            grads[out.0] = Some(g);
        }
        Op::SliceRows { a, out, start, len } => {
            let Some(g) = grads[out.0].take() else { return };
            let cols = nodes[a.0].cols();
            {
                let da = grad_buf(grads, nodes, a);
                for (i, &gi) in g.iter().enumerate() {
                    da[start * cols + i] += gi;
                }
            }
            let _ = len;
            grads[out.0] = Some(g);
        }
        Op::SliceCol { a, out, col } => {
            let Some(g) = grads[out.0].take() else { return };
            let cols = nodes[a.0].cols();
            {
                let da = grad_buf(grads, nodes, a);
                for (r, &gi) in g.iter().enumerate() {
                    da[r * cols + col] += gi;
                }
            }
            grads[out.0] = Some(g);
        }
        Op::GatherCols { a, out, ref idx } => {
            let Some(g) = grads[out.0].take() else { return };
            let rows = nodes[a.0].rows();
            let cols = nodes[a.0].cols();
            let oc = idx.len();
            {
                let da = grad_buf(grads, nodes, a);
                for r in 0..rows {
                    for (j, &sj) in idx.iter().enumerate() {
                        da[r * cols + sj] += g[r * oc + j];
                    }
                }
            }
            grads[out.0] = Some(g);
        }
        Op::Transpose { a, out } => {
            let Some(g) = grads[out.0].take() else { return };
            let (rows, cols) = (nodes[a.0].rows(), nodes[a.0].cols());
            {
                let da = grad_buf(grads, nodes, a);
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            grads[out.0] = Some(g);
        }
        Op::MeanList { ref parts, out } => {
            let Some(g) = grads[out.0].take() else { return };
            let inv = T::one() / T::fl(parts.len() as f64);
            for &p in parts {
                let dp = grad_buf(grads, nodes, p);
                for (d, &gi) in dp.iter_mut().zip(&g) {
                    *d += inv * gi;
                }
            }
            grads[out.0] = Some(g);
        }
        Op::SumAll { a, out } => {
            let Some(g) = grads[out.0].take() else { return };
            let gs = g[0];
            {
                let da = grad_buf(grads, nodes, a);
                for d in da.iter_mut() {
                    *d += gs;
                }
            }
            grads[out.0] = Some(g);
        }
        Op::FrobeniusSq { a, out } => {
            let Some(g) = grads[out.0].take() else { return };
            let gs = g[0] + g[0];
            {
                let x = nodes[a.0].data();
                let da = grad_buf(grads, nodes, a);
                for i in 0..x.len() {
                    da[i] += gs * x[i];
                }
            }
            grads[out.0] = Some(g);
        }
        Op::Bce { p, y, out } => {
            let Some(g) = grads[out.0].take() else { return };
            let lo = T::fl(BCE_EPS);
            let hi = T::one() - lo;
            {
                let pd = nodes[p.0].data();
                let yd = nodes[y.0].data();
                let dp = grad_buf(grads, nodes, p);
                for i in 0..g.len() {
                    // clamped region carries zero slope
                    if pd[i] >= lo && pd[i] <= hi {
                        dp[i] += g[i] * (-yd[i] / pd[i] + (T::one() - yd[i]) / (T::one() - pd[i]));
                    }
                }
            }
            {
                let pd = nodes[p.0].data();
                let yd = nodes[y.0].data();
                let dy = grad_buf(grads, nodes, y);
                for i in 0..g.len() {
                    let pc = pd[i].max(lo).min(hi);
                    let _ = yd;
                    dy[i] += g[i] * ((T::one() - pc).ln() - pc.ln());
                }
            }
            grads[out.0] = Some(g);
        }
    }
}
