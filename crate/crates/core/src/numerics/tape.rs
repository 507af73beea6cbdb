//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Nodes are
//! appended in creation order, so node ids are a topological order and the
//! backward sweep is a single reverse pass over the node list. The tape is
//! meant to be rebuilt for every forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Operation kinds the tape knows how to differentiate.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Input `[c_in, h, w]`, weight `[c_out, c_in, k, k]`, symmetric zero padding.
    Conv2d { stride: usize, padding: usize },
    Relu,
    Sigmoid,
    /// Elementwise maximum of two tensors. Ties go to the first input.
    Maximum,
    Mean,
    Sum,
    Abs,
    Square,
    Sqrt,
    /// Separable blur over the trailing two dimensions with an odd-length
    /// kernel. Taps falling outside the image are dropped and the remaining
    /// weights renormalised, so constant images are preserved.
    Blur { kernel: Vec<f64> },
    /// Multiply by a fixed scalar.
    Scale(f64),
    /// `mul * x + add` with fixed scalars.
    Affine { mul: f64, add: f64 },
    /// Nearest-neighbour resize of the trailing two dimensions.
    UpsampleNearest { height: usize, width: usize },
    /// Concatenate along `axis`.
    Concat { axis: usize },
    /// Add a 1-D tensor broadcast along `axis` of the first input.
    AddAlong { axis: usize },
    /// Multiply by a 1-D tensor broadcast along `axis` of the first input.
    MulAlong { axis: usize },
    Reshape(Vec<usize>),
    /// 2-D transpose.
    Transpose,
    /// Per-channel standardisation over all non-leading positions.
    InstanceNorm { eps: f64 },
    /// `[m, h, w] x [c, h, w] -> [m * c, h, w]`, block `m` is mask `m`
    /// multiplying every feature channel.
    ChannelOuter,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Maximum => "maximum",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Blur { .. } => "blur",
            OpKind::Scale(_) => "scale",
            OpKind::Affine { .. } => "affine",
            OpKind::UpsampleNearest { .. } => "upsample_nearest",
            OpKind::Concat { .. } => "concat",
            OpKind::AddAlong { .. } => "add_along",
            OpKind::MulAlong { .. } => "mul_along",
            OpKind::Reshape(_) => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::InstanceNorm { .. } => "instance_norm",
            OpKind::ChannelOuter => "channel_outer",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::Conv2d { .. }
            | OpKind::Maximum
            | OpKind::AddAlong { .. }
            | OpKind::MulAlong { .. }
            | OpKind::ChannelOuter => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Option<(OpKind, Vec<usize>)>,
    requires_grad: bool,
}

/// Recording of a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Option<(OpKind, Vec<usize>)>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, None, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Record `kind` applied to `inputs`.
    pub fn apply<'t>(&'t self, kind: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::shape(
                    kind.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(kind.name(), "no inputs"));
        }
        if inputs.iter().any(|v| !std::ptr::eq(v.tape, self)) {
            return Err(Error::domain(kind.name(), "variables belong to a different tape"));
        }
        let (values, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<Rc<Tensor>> =
                inputs.iter().map(|v| nodes[v.id].value.clone()).collect();
            let rg = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (values, rg)
        };
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = forward(&kind, &refs)?;
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(out, Some((kind, ids)), requires_grad))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some((kind, inputs)) = &node.op else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let values: Vec<&Tensor> = inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let wanted: Vec<bool> = inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let contribs = backward_op(kind, &values, &node.value, &g, &wanted);
            for ((&input, contrib), want) in inputs.iter().zip(contribs).zip(wanted) {
                if !want {
                    continue;
                }
                if let Some(c) = contrib {
                    accumulate(&mut grads[input], c);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, c: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(c) {
                *a += v;
            }
        }
        None => *slot = Some(c),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the root does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        let value = var.value();
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone())
                .expect("gradient has the shape of its value"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Whether the root depended on `var` at all.
    pub fn reached(&self, var: Var<'_>) -> bool {
        matches!(self.grads.get(var.id), Some(Some(_)))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, kind: OpKind) -> Result<Var<'t>> {
        self.tape.apply(kind, &[self])
    }

    fn binary(self, kind: OpKind, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(kind, &[self, other])
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::Add, o)
    }
    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::Sub, o)
    }
    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::Mul, o)
    }
    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::Div, o)
    }
    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::MatMul, o)
    }
    pub fn conv2d(self, weight: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.binary(OpKind::Conv2d { stride, padding }, weight)
    }
    pub fn maximum(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::Maximum, o)
    }
    pub fn add_along(self, b: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.binary(OpKind::AddAlong { axis }, b)
    }
    pub fn mul_along(self, b: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.binary(OpKind::MulAlong { axis }, b)
    }
    pub fn channel_outer(self, features: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::ChannelOuter, features)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(OpKind::Relu)
    }
    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(OpKind::Sigmoid)
    }
    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(OpKind::Mean)
    }
    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(OpKind::Sum)
    }
    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(OpKind::Abs)
    }
    pub fn square(self) -> Result<Var<'t>> {
        self.unary(OpKind::Square)
    }
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(OpKind::Sqrt)
    }
    pub fn blur(self, kernel: &[f64]) -> Result<Var<'t>> {
        self.unary(OpKind::Blur {
            kernel: kernel.to_vec(),
        })
    }
    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(OpKind::Scale(c))
    }
    pub fn affine(self, mul: f64, add: f64) -> Result<Var<'t>> {
        self.unary(OpKind::Affine { mul, add })
    }
    pub fn upsample_nearest(self, height: usize, width: usize) -> Result<Var<'t>> {
        self.unary(OpKind::UpsampleNearest { height, width })
    }
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(OpKind::Reshape(shape.to_vec()))
    }
    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(OpKind::Transpose)
    }
    pub fn instance_norm(self, eps: f64) -> Result<Var<'t>> {
        self.unary(OpKind::InstanceNorm { eps })
    }

    /// Concatenate `self` and `others` along `axis`.
    pub fn concat(self, others: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let mut all = Vec::with_capacity(others.len() + 1);
        all.push(self);
        all.extend_from_slice(others);
        self.tape.apply(OpKind::Concat { axis }, &all)
    }
}

// ---------------------------------------------------------------------------
// forward

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn elementwise(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    a.zip_map(b, f)
}

fn forward(kind: &OpKind, x: &[&Tensor]) -> Result<Tensor> {
    let name = kind.name();
    match kind {
        OpKind::Add => elementwise(name, x[0], x[1], |a, b| a + b),
        OpKind::Sub => elementwise(name, x[0], x[1], |a, b| a - b),
        OpKind::Mul => elementwise(name, x[0], x[1], |a, b| a * b),
        OpKind::Div => {
            same_shape(name, x[0], x[1])?;
            if x[1].data().iter().any(|&v| v == 0.0) {
                return Err(Error::DivisionByZero { op: name });
            }
            x[0].zip_map(x[1], |a, b| a / b)
        }
        OpKind::Maximum => elementwise(name, x[0], x[1], |a, b| if a >= b { a } else { b }),
        OpKind::MatMul => matmul_forward(x[0], x[1]),
        OpKind::Conv2d { stride, padding } => conv2d_forward(x[0], x[1], *stride, *padding),
        OpKind::Relu => Ok(x[0].map(|v| v.max(0.0))),
        OpKind::Sigmoid => Ok(x[0].map(sigmoid)),
        OpKind::Mean => Ok(Tensor::scalar(x[0].mean())),
        OpKind::Sum => Ok(Tensor::scalar(x[0].sum())),
        OpKind::Abs => Ok(x[0].map(f64::abs)),
        OpKind::Square => Ok(x[0].map(|v| v * v)),
        OpKind::Sqrt => {
            if let Some(v) = x[0].data().iter().find(|&&v| v < 0.0) {
                return Err(Error::domain(name, format!("negative input {v}")));
            }
            Ok(x[0].map(f64::sqrt))
        }
        OpKind::Blur { kernel } => {
            let (lead, h, w) = image_dims(name, x[0])?;
            check_kernel(kernel)?;
            let data = blur_apply(x[0].data(), lead, h, w, kernel, false);
            Tensor::new(x[0].shape().to_vec(), data)
        }
        OpKind::Scale(c) => Ok(x[0].map(|v| v * c)),
        OpKind::Affine { mul, add } => Ok(x[0].map(|v| mul * v + add)),
        OpKind::UpsampleNearest { height, width } => {
            let (lead, h, w) = image_dims(name, x[0])?;
            if *height == 0 || *width == 0 {
                return Err(Error::shape(name, "zero target size"));
            }
            let mut shape = x[0].shape().to_vec();
            let r = shape.len();
            shape[r - 2] = *height;
            shape[r - 1] = *width;
            let src = x[0].data();
            let rows: Vec<usize> = (0..*height).map(|i| i * h / height).collect();
            let cols: Vec<usize> = (0..*width).map(|j| j * w / width).collect();
            let mut out = Vec::with_capacity(lead * height * width);
            for b in 0..lead {
                for &si in &rows {
                    let row = &src[b * h * w + si * w..][..w];
                    out.extend(cols.iter().map(|&sj| row[sj]));
                }
            }
            Tensor::new(shape, out)
        }
        OpKind::Concat { axis } => concat_forward(x, *axis),
        OpKind::AddAlong { axis } | OpKind::MulAlong { axis } => {
            let (inner, dim) = along_dims(name, x[0], x[1], *axis)?;
            let b = x[1].data();
            let add = matches!(kind, OpKind::AddAlong { .. });
            let data = x[0]
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let k = (i / inner) % dim;
                    if add {
                        v + b[k]
                    } else {
                        v * b[k]
                    }
                })
                .collect();
            Tensor::new(x[0].shape().to_vec(), data)
        }
        OpKind::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != x[0].len() {
                return Err(Error::shape(
                    name,
                    format!("cannot reshape {:?} into {shape:?}", x[0].shape()),
                ));
            }
            x[0].reshape(shape)
        }
        OpKind::Transpose => {
            let s = x[0].shape();
            if s.len() != 2 {
                return Err(Error::shape(name, format!("expected 2-D, got {s:?}")));
            }
            let (m, n) = (s[0], s[1]);
            Ok(transpose(x[0].data(), m, n, vec![n, m]))
        }
        OpKind::InstanceNorm { eps } => {
            let s = x[0].shape();
            if s.len() < 2 {
                return Err(Error::shape(name, format!("expected rank >= 2, got {s:?}")));
            }
            let (data, _) = instance_norm(x[0].data(), s[0], *eps);
            Tensor::new(s.to_vec(), data)
        }
        OpKind::ChannelOuter => {
            let (ms, fs) = (x[0].shape(), x[1].shape());
            if ms.len() != 3 || fs.len() != 3 || ms[1..] != fs[1..] {
                return Err(Error::shape(name, format!("mask {ms:?} vs features {fs:?}")));
            }
            let (m, c, hw) = (ms[0], fs[0], ms[1] * ms[2]);
            let (mask, feat) = (x[0].data(), x[1].data());
            let mut out = Vec::with_capacity(m * c * hw);
            for mi in 0..m {
                let a = &mask[mi * hw..][..hw];
                for ci in 0..c {
                    let f = &feat[ci * hw..][..hw];
                    out.extend(a.iter().zip(f).map(|(p, q)| p * q));
                }
            }
            Tensor::new(vec![m * c, ms[1], ms[2]], out)
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn image_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    let (h, w) = t
        .hw()
        .ok_or_else(|| Error::shape(op, format!("expected rank >= 2, got {:?}", t.shape())))?;
    Ok((t.len() / (h * w), h, w))
}

fn check_kernel(kernel: &[f64]) -> Result<()> {
    if kernel.is_empty() || kernel.len() % 2 == 0 {
        return Err(Error::shape("blur", format!("kernel length {} is not odd", kernel.len())));
    }
    if kernel.iter().any(|&k| k <= 0.0) {
        return Err(Error::domain("blur", "kernel taps must be positive"));
    }
    Ok(())
}

fn along_dims(op: &'static str, a: &Tensor, b: &Tensor, axis: usize) -> Result<(usize, usize)> {
    let s = a.shape();
    if axis >= s.len() || b.shape().len() != 1 || b.shape()[0] != s[axis] {
        return Err(Error::shape(
            op,
            format!("cannot broadcast {:?} along axis {axis} of {s:?}", b.shape()),
        ));
    }
    Ok((s[axis + 1..].iter().product(), s[axis]))
}

fn transpose(src: &[f64], m: usize, n: usize, shape: Vec<usize>) -> Tensor {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new(shape, out).expect("transpose keeps element count")
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (si, sw) = (input.shape(), weight.shape());
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", format!("input {si:?}, weight {sw:?}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::domain("conv2d", format!("unsupported stride {stride}")));
        }
        let k = sw[2];
        if si[1] + 2 * pad < k || si[2] + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {si:?} (pad {pad})"),
            ));
        }
        Ok(Self {
            c_in: si[0],
            h: si[1],
            w: si[2],
            c_out: sw[0],
            k,
            stride,
            pad,
            oh: (si[1] + 2 * pad - k) / stride + 1,
            ow: (si[2] + 2 * pad - k) / stride + 1,
        })
    }

    /// Output index range `[lo, hi)` along an axis of input length `n` and
    /// output length `on` for which `o * stride + kk - pad` stays in bounds.
    fn valid(&self, kk: usize, n: usize, on: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= n-1
        let hi = (n as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, on as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    /// Calls `f(tap, out_offset, in_offset, len)` for every kernel tap and
    /// output row, covering the run of output columns whose input is in bounds.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for ky in 0..self.k {
            let (oy0, oy1) = self.valid(ky, self.h, self.oh);
            for kx in 0..self.k {
                let (ox0, ox1) = self.valid(kx, self.w, self.ow);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * self.stride + ky - self.pad;
                    let ix0 = ox0 * self.stride + kx - self.pad;
                    f(ky * self.k + kx, oy * self.ow + ox0, iy * self.w + ix0, ox1 - ox0);
                }
            }
        }
    }
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    let (x, wt) = (input.data(), weight.data());
    let (ihw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let mut out = vec![0.0; g.c_out * ohw];
    for co in 0..g.c_out {
        let o = &mut out[co * ohw..][..ohw];
        for ci in 0..g.c_in {
            let xin = &x[ci * ihw..][..ihw];
            let wk = &wt[(co * g.c_in + ci) * kk..][..kk];
            g.for_each_tap(|tap, oi, ii, len| {
                let wv = wk[tap];
                if g.stride == 1 {
                    for (ov, xv) in o[oi..oi + len].iter_mut().zip(&xin[ii..ii + len]) {
                        *ov += wv * xv;
                    }
                } else {
                    for j in 0..len {
                        o[oi + j] += wv * xin[ii + j * g.stride];
                    }
                }
            });
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad: &[f64],
    want: &[bool],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let g = ConvGeom::new(input, weight, stride, pad).expect("validated in forward");
    let (x, wt) = (input.data(), weight.data());
    let (ihw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let mut gx = want[0].then(|| vec![0.0; x.len()]);
    let mut gw = want[1].then(|| vec![0.0; wt.len()]);
    for co in 0..g.c_out {
        let go = &grad[co * ohw..][..ohw];
        for ci in 0..g.c_in {
            let xin = &x[ci * ihw..][..ihw];
            let widx = (co * g.c_in + ci) * kk;
            let wk = &wt[widx..][..kk];
            let mut gx_c = gx.as_mut().map(|v| &mut v[ci * ihw..][..ihw]);
            let mut gw_k = gw.as_mut().map(|v| &mut v[widx..][..kk]);
            g.for_each_tap(|tap, oi, ii, len| {
                if g.stride == 1 {
                    let gos = &go[oi..oi + len];
                    if let Some(gwk) = gw_k.as_deref_mut() {
                        gwk[tap] += gos.iter().zip(&xin[ii..ii + len]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(gxc) = gx_c.as_deref_mut() {
                        let wv = wk[tap];
                        for (gxv, gov) in gxc[ii..ii + len].iter_mut().zip(gos) {
                            *gxv += wv * gov;
                        }
                    }
                } else {
                    if let Some(gwk) = gw_k.as_deref_mut() {
                        let mut acc = 0.0;
                        for j in 0..len {
                            acc += go[oi + j] * xin[ii + j * g.stride];
                        }
                        gwk[tap] += acc;
                    }
                    if let Some(gxc) = gx_c.as_deref_mut() {
                        let wv = wk[tap];
                        for j in 0..len {
                            gxc[ii + j * g.stride] += wv * go[oi + j];
                        }
                    }
                }
            });
        }
    }
    (gx, gw)
}

fn concat_forward(x: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = x[0].shape();
    if axis >= first.len() {
        return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
    }
    for t in &x[1..] {
        let s = t.shape();
        let ok = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total_axis: usize = x.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for t in x {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..][..block]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total_axis;
    Tensor::new(shape, out)
}

fn instance_norm(x: &[f64], channels: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / channels;
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; channels];
    for c in 0..channels {
        let xs = &x[c * n..][..n];
        let mu = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[c] = is;
        for (o, v) in out[c * n..][..n].iter_mut().zip(xs) {
            *o = (v - mu) * is;
        }
    }
    (out, inv)
}

/// Row/column normalisers for the truncated blur.
fn blur_norms(n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .filter(|(t, _)| {
                    let p = i as isize + *t as isize - r as isize;
                    p >= 0 && (p as usize) < n
                })
                .map(|(_, k)| k)
                .sum()
        })
        .collect()
}

/// Separable truncated blur; `transpose` applies the adjoint.
fn blur_apply(src: &[f64], lead: usize, h: usize, w: usize, kernel: &[f64], transpose: bool) -> Vec<f64> {
    let r = kernel.len() as isize / 2;
    let nh = blur_norms(w, kernel);
    let nv = blur_norms(h, kernel);
    let hw = h * w;

    let horizontal = |src: &[f64], dst: &mut [f64]| {
        for row in 0..h {
            let s = &src[row * w..][..w];
            let d = &mut dst[row * w..][..w];
            for j in 0..w {
                for (t, &k) in kernel.iter().enumerate() {
                    let p = j as isize + t as isize - r;
                    if p < 0 || p as usize >= w {
                        continue;
                    }
                    let p = p as usize;
                    if transpose {
                        d[p] += k / nh[j] * s[j];
                    } else {
                        d[j] += k / nh[j] * s[p];
                    }
                }
            }
        }
    };
    let vertical = |src: &[f64], dst: &mut [f64]| {
        for i in 0..h {
            for (t, &k) in kernel.iter().enumerate() {
                let p = i as isize + t as isize - r;
                if p < 0 || p as usize >= h {
                    continue;
                }
                let p = p as usize;
                let coef = k / nv[i];
                let (from, to) = if transpose { (i, p) } else { (p, i) };
                for j in 0..w {
                    dst[to * w + j] += coef * src[from * w + j];
                }
            }
        }
    };

    let mut out = vec![0.0; src.len()];
    let mut tmp = vec![0.0; hw];
    for b in 0..lead {
        let s = &src[b * hw..][..hw];
        let o = &mut out[b * hw..][..hw];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        if transpose {
            vertical(s, &mut tmp);
            horizontal(&tmp, o);
        } else {
            horizontal(s, &mut tmp);
            vertical(&tmp, o);
        }
    }
    out
}

/// Plain-tensor blur, used where no gradient is needed.
pub(crate) fn blur_tensor(t: &Tensor, kernel: &[f64]) -> Result<Tensor> {
    forward(
        &OpKind::Blur {
            kernel: kernel.to_vec(),
        },
        &[t],
    )
}

// ---------------------------------------------------------------------------
// backward

fn backward_op(
    kind: &OpKind,
    x: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    want: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let map1 = |f: &dyn Fn(usize) -> f64| Some((0..g.len()).map(f).collect::<Vec<f64>>());
    match kind {
        OpKind::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        OpKind::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        OpKind::Mul => {
            let (a, b) = (x[0].data(), x[1].data());
            vec![map1(&|i| g[i] * b[i]), map1(&|i| g[i] * a[i])]
        }
        OpKind::Div => {
            let (a, b) = (x[0].data(), x[1].data());
            vec![map1(&|i| g[i] / b[i]), map1(&|i| -g[i] * a[i] / (b[i] * b[i]))]
        }
        OpKind::Maximum => {
            let (a, b) = (x[0].data(), x[1].data());
            vec![
                map1(&|i| if a[i] >= b[i] { g[i] } else { 0.0 }),
                map1(&|i| if a[i] >= b[i] { 0.0 } else { g[i] }),
            ]
        }
        OpKind::MatMul => {
            let (sa, sb) = (x[0].shape(), x[1].shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let ga = want[0].then(|| {
                let bt = transpose(x[1].data(), k, n, vec![n, k]);
                let mut o = vec![0.0; m * k];
                matmul_into(g, bt.data(), &mut o, m, n, k);
                o
            });
            let gb = want[1].then(|| {
                let at = transpose(x[0].data(), m, k, vec![k, m]);
                let mut o = vec![0.0; k * n];
                matmul_into(at.data(), g, &mut o, k, m, n);
                o
            });
            vec![ga, gb]
        }
        OpKind::Conv2d { stride, padding } => {
            let (gx, gw) = conv2d_backward(x[0], x[1], *stride, *padding, g, want);
            vec![gx, gw]
        }
        OpKind::Relu => {
            let a = x[0].data();
            vec![map1(&|i| if a[i] > 0.0 { g[i] } else { 0.0 })]
        }
        OpKind::Sigmoid => {
            let y = out.data();
            vec![map1(&|i| g[i] * y[i] * (1.0 - y[i]))]
        }
        OpKind::Mean => {
            let n = x[0].len();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        OpKind::Sum => vec![Some(vec![g[0]; x[0].len()])],
        OpKind::Abs => {
            let a = x[0].data();
            vec![map1(&|i| g[i] * sign(a[i]))]
        }
        OpKind::Square => {
            let a = x[0].data();
            vec![map1(&|i| 2.0 * a[i] * g[i])]
        }
        OpKind::Sqrt => {
            // derivative at 0 is taken as 0
            let y = out.data();
            vec![map1(&|i| if y[i] > 0.0 { g[i] / (2.0 * y[i]) } else { 0.0 })]
        }
        OpKind::Blur { kernel } => {
            let (h, w) = x[0].hw().expect("validated in forward");
            let lead = x[0].len() / (h * w);
            vec![Some(blur_apply(g, lead, h, w, kernel, true))]
        }
        OpKind::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        OpKind::Affine { mul, .. } => vec![Some(g.iter().map(|v| v * mul).collect())],
        OpKind::UpsampleNearest { height, width } => {
            let (h, w) = x[0].hw().expect("validated in forward");
            let lead = x[0].len() / (h * w);
            let mut gi = vec![0.0; x[0].len()];
            for b in 0..lead {
                for i in 0..*height {
                    let si = i * h / height;
                    for j in 0..*width {
                        let sj = j * w / width;
                        gi[b * h * w + si * w + sj] += g[b * height * width + i * width + j];
                    }
                }
            }
            vec![Some(gi)]
        }
        OpKind::Concat { axis } => {
            let first = x[0].shape();
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let total: usize = x.iter().map(|t| t.shape()[*axis]).sum();
            let mut res: Vec<Vec<f64>> = x.iter().map(|t| Vec::with_capacity(t.len())).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (t, r) in x.iter().zip(res.iter_mut()) {
                    let block = t.shape()[*axis] * inner;
                    r.extend_from_slice(&g[off..off + block]);
                    off += block;
                }
            }
            res.into_iter().map(Some).collect()
        }
        OpKind::AddAlong { axis } | OpKind::MulAlong { axis } => {
            let s = x[0].shape();
            let inner: usize = s[axis + 1..].iter().product();
            let dim = s[*axis];
            let b = x[1].data();
            let a = x[0].data();
            let add = matches!(kind, OpKind::AddAlong { .. });
            let mut gb = vec![0.0; dim];
            let ga: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, &gv)| {
                    let k = (i / inner) % dim;
                    if add {
                        gb[k] += gv;
                        gv
                    } else {
                        gb[k] += gv * a[i];
                        gv * b[k]
                    }
                })
                .collect();
            vec![Some(ga), Some(gb)]
        }
        OpKind::Reshape(_) => vec![Some(g.to_vec())],
        OpKind::Transpose => {
            let s = x[0].shape();
            // g has shape [n, m]
            vec![Some(transpose(g, s[1], s[0], s.to_vec()).into_data())]
        }
        OpKind::InstanceNorm { eps } => {
            let c = x[0].shape()[0];
            let n = x[0].len() / c;
            let (y, inv) = instance_norm(x[0].data(), c, *eps);
            let mut gi = vec![0.0; g.len()];
            for ch in 0..c {
                let gs = &g[ch * n..][..n];
                let ys = &y[ch * n..][..n];
                let mg = gs.iter().sum::<f64>() / n as f64;
                let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for i in 0..n {
                    gi[ch * n + i] = inv[ch] * (gs[i] - mg - ys[i] * mgy);
                }
            }
            vec![Some(gi)]
        }
        OpKind::ChannelOuter => {
            let (ms, fs) = (x[0].shape(), x[1].shape());
            let (m, c, hw) = (ms[0], fs[0], ms[1] * ms[2]);
            let (mask, feat) = (x[0].data(), x[1].data());
            let mut gm = vec![0.0; mask.len()];
            let mut gf = vec![0.0; feat.len()];
            for mi in 0..m {
                for ci in 0..c {
                    let go = &g[(mi * c + ci) * hw..][..hw];
                    for p in 0..hw {
                        gm[mi * hw + p] += go[p] * feat[ci * hw + p];
                        gf[ci * hw + p] += go[p] * mask[mi * hw + p];
                    }
                }
            }
            vec![Some(gm), Some(gf)]
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
