//! Reverse-mode differentiation over a closed set of tensor ops.
//!
//! Every op appends one node to the tape. Backward walks the nodes once in
//! reverse order. Adding an op means adding a variant to [`Op`], its forward
//! builder, its arm in [`Tape::backward`], and a finite-difference test.

use std::collections::BTreeMap;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{ensure, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Broadcast { x: Var },
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    BatchMatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SmoothL1(Var),
    Dot(Var, Var),
    Sum(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    SoftmaxRow { x: Var },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    requires_grad: bool,
}

/// Op record plus the values it produced. Single writer; drop it to free the
/// intermediates of a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradients for every registered parameter, by name. Unreached parameters get zeros.
    pub fn params(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, v) in &tape.params {
            let g = self.get(*v);
            match out.get_mut(name) {
                Some(acc) => acc.accumulate(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("binary op on equal shapes")
}

/// Strides of a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visit every multi-index of `shape` in row-major order together with a
/// secondary offset that advances by `src_strides`.
fn for_each_offset(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for flat in 0..n {
        f(flat, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            src -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let op = if requires_grad { op } else { Op::Leaf };
        self.values.push(value);
        self.nodes.push(Node { op, requires_grad });
        Ok(Var(self.values.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.nodes.push(Node { op: Op::Leaf, requires_grad: false });
        Var(self.values.len() - 1)
    }

    /// Leaf that collects a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.nodes.push(Node { op: Op::Leaf, requires_grad: true });
        Var(self.values.len() - 1)
    }

    /// Named trainable leaf; see [`Gradients::params`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.input(t.clone());
        self.params.push((name.to_string(), v));
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = binary(self.value(a), self.value(b), |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(y, Op::Add(a, b), g, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = binary(self.value(a), self.value(b), |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(y, Op::Sub(a, b), g, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = binary(self.value(a), self.value(b), |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(y, Op::Mul(a, b), g, "mul")
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let y = unary(self.value(x), |v| scale * v + shift);
        let g = self.any_grad(&[x]);
        self.push(y, Op::Affine { x, scale }, g, "affine")
    }

    /// Numpy-style broadcast of `x` to `shape` (x's shape is right-aligned; size-1 dims expand).
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() <= shape.len(), "broadcast: {:?} has higher rank than {:?}", xs, shape);
        let pad = shape.len() - xs.len();
        let mut src_strides = vec![0; shape.len()];
        let xstr = strides(&xs);
        for (i, &d) in xs.iter().enumerate() {
            let target = shape[pad + i];
            ensure!(d == target || d == 1, "broadcast: cannot expand {:?} to {:?}", xs, shape);
            src_strides[pad + i] = if d == 1 { 0 } else { xstr[i] };
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; shape.iter().product()];
        for_each_offset(shape, &src_strides, |flat, off| out[flat] = src[off]);
        let y = Tensor::new(shape, out)?;
        let g = self.any_grad(&[x]);
        self.push(y, Op::Broadcast { x }, g, "broadcast")
    }

    /// 2-D matrix product `op(a)·op(b)`, where `a_t`/`b_t` transpose the stored operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(sa.len() == 2 && sb.len() == 2, "matmul: expected 2-D operands, got {:?} and {:?}", sa, sb);
        let (m, k) = if a_t { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        ensure!(k == k2, "matmul: inner dims differ, {:?} vs {:?}", sa, sb);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), a_t, self.value(b).data(), b_t, &mut c, false);
        let y = Tensor::new(&[m, n], c)?;
        let g = self.any_grad(&[a, b]);
        self.push(y, Op::MatMul { a, b, a_t, b_t }, g, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched matrix product over the leading axis of two 3-D tensors.
    pub fn batch_matmul(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(sa.len() == 3 && sb.len() == 3, "batch_matmul: expected 3-D operands, got {:?} and {:?}", sa, sb);
        ensure!(sa[0] == sb[0], "batch_matmul: batch sizes differ, {:?} vs {:?}", sa, sb);
        let bs = sa[0];
        let (m, k) = if a_t { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if b_t { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        ensure!(k == k2, "batch_matmul: inner dims differ, {:?} vs {:?}", sa, sb);
        let mut c = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                a_t,
                &bd[i * k * n..(i + 1) * k * n],
                b_t,
                &mut c[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let y = Tensor::new(&[bs, m, n], c)?;
        let g = self.any_grad(&[a, b]);
        self.push(y, Op::BatchMatMul { a, b, a_t, b_t }, g, "batch_matmul")
    }

    /// `x·wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        ensure!(sx.len() == 2 && sw.len() == 2, "linear: expected x [n,in] and w [out,in], got {:?}, {:?}", sx, sw);
        ensure!(sx[1] == sw[1], "linear: input width {} vs weight {:?}", sx[1], sw);
        let (n, out) = (sx[0], sw[0]);
        let mut y = vec![0.0; n * out];
        if let Some(b) = b {
            ensure!(self.shape(b) == [out], "linear: bias {:?} for {} outputs", self.shape(b), out);
            let bd = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bd);
            }
        }
        gemm(n, sx[1], out, self.value(x).data(), false, self.value(w).data(), true, &mut y, true);
        let y = Tensor::new(&[n, out], y)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        self.push(y, Op::Linear { x, w, b }, g, "linear")
    }

    /// Single-image convolution: `x: [C,H,W]`, `w: [O,C,k,k]`, odd k, stride 1 or 2, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        ensure!(sx.len() == 3, "conv2d: input must be [C,H,W], got {:?}", sx);
        ensure!(sw.len() == 4 && sw[2] == sw[3], "conv2d: weight must be [O,C,k,k], got {:?}", sw);
        ensure!(sw[1] == sx[0], "conv2d: weight {:?} expects {} channels, input has {}", sw, sw[1], sx[0]);
        ensure!(sw[2] % 2 == 1, "conv2d: kernel size {} is not odd", sw[2]);
        ensure!(stride == 1 || stride == 2, "conv2d: stride {} unsupported", stride);
        ensure!(sx[1] + 2 * pad >= sw[2] && sx[2] + 2 * pad >= sw[2], "conv2d: kernel {} larger than padded input {:?}", sw[2], sx);
        let geom = ConvGeom { channels: sx[0], height: sx[1], width: sx[2], kernel: sw[2], stride, pad };
        let (o, cols_n) = (sw[0], geom.col_cols());
        let cols = im2col(self.value(x).data(), &geom);
        let mut y = vec![0.0; o * cols_n];
        if let Some(b) = b {
            ensure!(self.shape(b) == [o], "conv2d: bias {:?} for {} outputs", self.shape(b), o);
            for (row, &bv) in y.chunks_mut(cols_n).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        gemm(o, geom.col_rows(), cols_n, self.value(w).data(), false, &cols, false, &mut y, true);
        let y = Tensor::new(&[o, geom.out_height(), geom.out_width()], y)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        let cols = if g { cols } else { Vec::new() };
        self.push(y, Op::Conv2d { x, w, b, geom, cols }, g, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = unary(self.value(x), |v| v.max(0.0));
        let g = self.any_grad(&[x]);
        self.push(y, Op::Relu(x), g, "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let y = unary(self.value(x), f64::exp);
        let g = self.any_grad(&[x]);
        self.push(y, Op::Exp(x), g, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let y = unary(self.value(x), f64::ln);
        let g = self.any_grad(&[x]);
        self.push(y, Op::Log(x), g, "log")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = unary(self.value(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let g = self.any_grad(&[x]);
        self.push(y, Op::Sigmoid(x), g, "sigmoid")
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        ensure!(lo <= hi, "clamp: empty range [{lo}, {hi}]");
        let y = unary(self.value(x), |v| v.clamp(lo, hi));
        let g = self.any_grad(&[x]);
        self.push(y, Op::Clamp { x, lo, hi }, g, "clamp")
    }

    /// Elementwise smooth-L1: `0.5 d²` for `|d| < 1`, else `|d| − 0.5`.
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        let y = unary(self.value(x), |d| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 });
        let g = self.any_grad(&[x]);
        self.push(y, Op::SmoothL1(x), g, "smooth_l1")
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(s), Op::Dot(a, b), g, "dot")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g, "sum")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat: no inputs");
        let first = self.shape(inputs[0]).to_vec();
        ensure!(axis < first.len(), "concat: axis {} out of range for {:?}", axis, first);
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            ensure!(
                s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                "concat: {:?} incompatible with {:?} along axis {}",
                s,
                first,
                axis
            );
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let y = Tensor::new(&out_shape, out)?;
        let g = self.any_grad(inputs);
        self.push(y, Op::Concat { inputs: inputs.to_vec(), axis }, g, "concat")
    }

    /// Maximum over one axis (removed from the shape). Ties go to the lowest index.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(axis < s.len(), "max_over_axis: axis {} out of range for {:?}", axis, s);
        ensure!(s[axis] > 0, "max_over_axis: empty axis in {:?}", s);
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (i, &v) in row.iter().enumerate() {
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = a;
                    }
                }
            }
        }
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let y = Tensor::new(&out_shape, out)?;
        let g = self.any_grad(&[x]);
        self.push(y, Op::MaxAxis { x, axis, argmax }, g, "max_over_axis")
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax_row(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Softmax along the last axis of `[.., n, n]` with the diagonal excluded
    /// (those entries get probability exactly 0). Requires n ≥ 2.
    pub fn softmax_row_masked_diag(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, mask_diag: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(!s.is_empty() && s[s.len() - 1] > 0, "softmax_row: empty rows in {:?}", s);
        let n = s[s.len() - 1];
        if mask_diag {
            ensure!(s.len() >= 2 && s[s.len() - 2] == n, "softmax_row: masked diagonal needs square trailing dims, got {:?}", s);
            ensure!(n >= 2, "softmax_row: masking the diagonal of a 1x1 block leaves an empty row");
        }
        let mut out = self.value(x).data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let diag = if mask_diag { Some(r % n) } else { None };
            let mx = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != diag)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if Some(j) == diag {
                    *v = 0.0;
                } else {
                    *v = (*v - mx).exp();
                    z += *v;
                }
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let y = Tensor::new(&s, out)?;
        let g = self.any_grad(&[x]);
        self.push(y, Op::SoftmaxRow { x }, g, "softmax_row")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let g = self.any_grad(&[x]);
        self.push(y, Op::Reshape(x), g, "reshape")
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        ensure!(perm.len() == s.len(), "permute: {:?} does not match rank of {:?}", perm, s);
        for &p in perm {
            ensure!(p < s.len() && !seen[p], "permute: {:?} is not a permutation", perm);
            seen[p] = true;
        }
        let y = permute_tensor(self.value(x), perm);
        let g = self.any_grad(&[x]);
        self.push(y, Op::Permute { x, perm: perm.to_vec() }, g, "permute")
    }

    /// Rows of a 2-D tensor picked by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 2, "gather_rows: expected 2-D input, got {:?}", s);
        let w = s[1];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            ensure!(r < s[0], "gather_rows: row {} out of range for {:?}", r, s);
            out.extend_from_slice(&xd[r * w..(r + 1) * w]);
        }
        let y = Tensor::new(&[rows.len(), w], out)?;
        let g = self.any_grad(&[x]);
        self.push(y, Op::GatherRows { x, rows: rows.to_vec() }, g, "gather_rows")
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(self.value(loss).numel() == 1, "backward: loss must be scalar, got shape {:?}", self.shape(loss));
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.values.iter().map(|t| t.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &self.values[id];
        let send = |v: Var, d: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.accumulate(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                send(*a, binary(g, self.value(*b), |g, y| g * y), grads);
                send(*b, binary(g, self.value(*a), |g, x| g * x), grads);
            }
            Op::Affine { x, scale } => send(*x, g.map(|v| v * scale), grads),
            Op::Broadcast { x } => {
                let xs = self.shape(*x).to_vec();
                let pad = y.rank() - xs.len();
                let xstr = strides(&xs);
                let mut src_strides = vec![0; y.rank()];
                for (i, &d) in xs.iter().enumerate() {
                    src_strides[pad + i] = if d == 1 { 0 } else { xstr[i] };
                }
                let mut acc = vec![0.0; xs.iter().product()];
                let gd = g.data();
                for_each_offset(y.shape(), &src_strides, |flat, off| acc[off] += gd[flat]);
                send(*x, Tensor::new(&xs, acc)?, grads);
            }
            Op::MatMul { a, b, a_t, b_t } => {
                let (da, db) = matmul_grads(self.value(*a), self.value(*b), g.data(), *a_t, *b_t);
                send(*a, da, grads);
                send(*b, db, grads);
            }
            Op::BatchMatMul { a, b, a_t, b_t } => {
                let bs = y.dim(0);
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.numel() / bs, bv.numel() / bs);
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                let gs = g.numel() / bs;
                for i in 0..bs {
                    let (pa, pb) = matmul_grads_raw(
                        &av.shape()[1..],
                        &av.data()[i * sa..(i + 1) * sa],
                        &bv.shape()[1..],
                        &bv.data()[i * sb..(i + 1) * sb],
                        &g.data()[i * gs..(i + 1) * gs],
                        *a_t,
                        *b_t,
                    );
                    da[i * sa..(i + 1) * sa].copy_from_slice(&pa);
                    db[i * sb..(i + 1) * sb].copy_from_slice(&pb);
                }
                send(*a, Tensor::new(av.shape(), da)?, grads);
                send(*b, Tensor::new(bv.shape(), db)?, grads);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, inp, out) = (xv.dim(0), xv.dim(1), wv.dim(0));
                let mut dx = vec![0.0; n * inp];
                gemm(n, out, inp, g.data(), false, wv.data(), false, &mut dx, false);
                let mut dw = vec![0.0; out * inp];
                gemm(out, n, inp, g.data(), true, xv.data(), false, &mut dw, false);
                send(*x, Tensor::new(xv.shape(), dx)?, grads);
                send(*w, Tensor::new(wv.shape(), dw)?, grads);
                if let Some(b) = b {
                    let mut db = vec![0.0; out];
                    for row in g.data().chunks(out) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*b, Tensor::from_vec(db), grads);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let wv = self.value(*w);
                let (o, rows, n) = (wv.dim(0), geom.col_rows(), geom.col_cols());
                let mut dw = vec![0.0; o * rows];
                gemm(o, n, rows, g.data(), false, cols, true, &mut dw, false);
                send(*w, Tensor::new(wv.shape(), dw)?, grads);
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; rows * n];
                    gemm(rows, o, n, wv.data(), true, g.data(), false, &mut dcols, false);
                    send(*x, Tensor::new(self.shape(*x), col2im(&dcols, geom))?, grads);
                }
                if let Some(b) = b {
                    let db: Vec<f64> = g.data().chunks(n).map(|c| c.iter().sum()).collect();
                    send(*b, Tensor::from_vec(db), grads);
                }
            }
            Op::Relu(x) => send(*x, binary(g, self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 }), grads),
            Op::Exp(x) => send(*x, binary(g, y, |g, y| g * y), grads),
            Op::Log(x) => send(*x, binary(g, self.value(*x), |g, x| g / x), grads),
            Op::Sigmoid(x) => send(*x, binary(g, y, |g, y| g * y * (1.0 - y)), grads),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                send(*x, binary(g, self.value(*x), |g, x| if x >= lo && x <= hi { g } else { 0.0 }), grads)
            }
            Op::SmoothL1(x) => send(
                *x,
                binary(g, self.value(*x), |g, d| if d.abs() < 1.0 { g * d } else { g * d.signum() }),
                grads,
            ),
            Op::Dot(a, b) => {
                let gs = g.item();
                send(*a, self.value(*b).map(|v| v * gs), grads);
                send(*b, self.value(*a).map(|v| v * gs), grads);
            }
            Op::Sum(x) => send(*x, Tensor::full(self.shape(*x), g.item()), grads),
            Op::Concat { inputs, axis } => {
                let s = y.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    let mut part = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        part.extend_from_slice(&g.data()[o * total + start..o * total + start + len]);
                    }
                    start += len;
                    send(v, Tensor::new(self.shape(v), part)?, grads);
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let s = self.shape(*x);
                let inner: usize = s[axis + 1..].iter().product();
                let len = s[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (k, (&a, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    let (o, i) = (k / inner, k % inner);
                    dx[(o * len + a) * inner + i] += gv;
                }
                send(*x, Tensor::new(s, dx)?, grads);
            }
            Op::SoftmaxRow { x } => {
                let n = y.dim(y.rank() - 1);
                let mut dx = vec![0.0; y.numel()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                send(*x, Tensor::new(y.shape(), dx)?, grads);
            }
            Op::Reshape(x) => send(*x, g.reshape(self.shape(*x))?, grads),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                send(*x, permute_tensor(g, &inv), grads);
            }
            Op::GatherRows { x, rows } => {
                let s = self.shape(*x);
                let w = s[1];
                let mut dx = vec![0.0; s[0] * w];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, gv) in dx[r * w..(r + 1) * w].iter_mut().zip(&g.data()[k * w..(k + 1) * w]) {
                        *d += gv;
                    }
                }
                send(*x, Tensor::new(s, dx)?, grads);
            }
        }
        Ok(())
    }
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let xstr = strides(s);
    let src_strides: Vec<usize> = perm.iter().map(|&p| xstr[p]).collect();
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    for_each_offset(&out_shape, &src_strides, |flat, off| out[flat] = xd[off]);
    Tensor::new(&out_shape, out).expect("permutation preserves element count")
}

fn matmul_grads(a: &Tensor, b: &Tensor, g: &[f64], a_t: bool, b_t: bool) -> (Tensor, Tensor) {
    let (da, db) = matmul_grads_raw(a.shape(), a.data(), b.shape(), b.data(), g, a_t, b_t);
    (
        Tensor::new(a.shape(), da).expect("shape of a"),
        Tensor::new(b.shape(), db).expect("shape of b"),
    )
}

/// Gradients of `c = op(a)·op(b)` w.r.t. the stored operands.
fn matmul_grads_raw(
    sa: &[usize],
    a: &[f64],
    sb: &[usize],
    b: &[f64],
    g: &[f64],
    a_t: bool,
    b_t: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = if a_t { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
    let n = if b_t { sb[0] } else { sb[1] };
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    if a_t {
        gemm(k, n, m, b, b_t, g, true, &mut da, false);
    } else {
        gemm(m, n, k, g, false, b, !b_t, &mut da, false);
    }
    if b_t {
        gemm(n, m, k, g, true, a, a_t, &mut db, false);
    } else {
        gemm(k, m, n, a, !a_t, g, false, &mut db, false);
    }
    (da, db)
}
