use std::collections::BTreeMap;
use std::str::FromStr;

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub use super::kernels::PairIndex;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed kernel catalog reachable through [`Graph::apply_kernel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Conv2d,
    Dense,
    Matmul,
    Relu,
    Add,
    Mul,
    Scale,
    Concat,
    Softmax,
    Log,
    Exp,
    L2Normalize,
    BilinearResize,
    Sum,
    Mean,
    Gather,
    Sigmoid,
    MaxPool2,
}

impl KernelKind {
    pub const ALL: [KernelKind; 18] = [
        KernelKind::Conv2d,
        KernelKind::Dense,
        KernelKind::Matmul,
        KernelKind::Relu,
        KernelKind::Add,
        KernelKind::Mul,
        KernelKind::Scale,
        KernelKind::Concat,
        KernelKind::Softmax,
        KernelKind::Log,
        KernelKind::Exp,
        KernelKind::L2Normalize,
        KernelKind::BilinearResize,
        KernelKind::Sum,
        KernelKind::Mean,
        KernelKind::Gather,
        KernelKind::Sigmoid,
        KernelKind::MaxPool2,
    ];

    pub fn id(self) -> &'static str {
        match self {
            KernelKind::Conv2d => "conv2d",
            KernelKind::Dense => "dense",
            KernelKind::Matmul => "matmul",
            KernelKind::Relu => "relu",
            KernelKind::Add => "add",
            KernelKind::Mul => "mul",
            KernelKind::Scale => "scale",
            KernelKind::Concat => "concat",
            KernelKind::Softmax => "softmax",
            KernelKind::Log => "log",
            KernelKind::Exp => "exp",
            KernelKind::L2Normalize => "l2-normalize",
            KernelKind::BilinearResize => "bilinear-resize",
            KernelKind::Sum => "sum",
            KernelKind::Mean => "mean",
            KernelKind::Gather => "gather",
            KernelKind::Sigmoid => "sigmoid",
            KernelKind::MaxPool2 => "max-pool2",
        }
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelKind::ALL.into_iter().find(|k| k.id() == s).ok_or_else(|| Error::UnknownKernel(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
}

/// Named kernel attributes (stride, output size, scale, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Attrs(BTreeMap<String, AttrValue>);

impl Attrs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn int(mut self, key: &str, v: i64) -> Self {
        self.0.insert(key.to_string(), AttrValue::Int(v));
        self
    }

    pub fn float(mut self, key: &str, v: f64) -> Self {
        self.0.insert(key.to_string(), AttrValue::Float(v));
        self
    }

    pub fn ints(mut self, key: &str, v: Vec<i64>) -> Self {
        self.0.insert(key.to_string(), AttrValue::Ints(v));
        self
    }

    fn get_int(&self, kernel: &'static str, key: &str) -> Result<i64> {
        match self.0.get(key) {
            Some(AttrValue::Int(v)) => Ok(*v),
            _ => Err(Error::invalid(format!("{kernel}: missing integer attribute `{key}`"))),
        }
    }

    fn get_int_or(&self, key: &str, default: i64) -> i64 {
        match self.0.get(key) {
            Some(AttrValue::Int(v)) => *v,
            _ => default,
        }
    }

    fn get_float_or(&self, key: &str, default: f64) -> f64 {
        match self.0.get(key) {
            Some(AttrValue::Float(v)) => *v,
            Some(AttrValue::Int(v)) => *v as f64,
            _ => default,
        }
    }

    fn get_ints(&self, kernel: &'static str, key: &str) -> Result<Vec<i64>> {
        match self.0.get(key) {
            Some(AttrValue::Ints(v)) => Ok(v.clone()),
            _ => Err(Error::invalid(format!("{kernel}: missing integer-list attribute `{key}`"))),
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        cin: usize,
        cout: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        inputs: Vec<Var>,
        last_axis: bool,
    },
    Softmax(Var),
    Log(Var),
    Exp(Var),
    L2Normalize(Var),
    Sigmoid(Var),
    Resize {
        x: Var,
        dims: (usize, usize, usize),
        oh: usize,
        ow: usize,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        classes: usize,
        count: usize,
    },
    InfoNce {
        anchors: Var,
        pool: Var,
        weights: Option<Var>,
        pairs: PairIndex,
        coeffs: Vec<T>,
        tau: T,
        per_anchor: Vec<T>,
    },
    RowDistance {
        a: Var,
        b: Var,
        mask: Vec<bool>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss w.r.t. every trainable leaf that it reaches.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Computation record: values plus the kernels that produced them.
///
/// Confined to one thread; build a fresh graph per forward pass. A graph
/// created with [`Graph::inference`] never records kernels, so a backward
/// pass over it is rejected.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<T: Scalar>(kernel: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { kernel })
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), recording: true, consumed: false }
    }

    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), recording: false, consumed: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf (`requires_grad`).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let rg = self.recording;
        self.push_raw(t, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Branch taken by every piecewise kernel on the record: ReLU input
    /// signs, max-pool winners and log clamping. Two evaluations with equal
    /// patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let (lo, hi) = log_bounds::<T>();
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.data(*x).iter().map(|&v| usize::from(v > T::zero()))),
                Op::MaxPool2 { argmax, .. } => out.extend(argmax),
                Op::Log(x) => out.extend(self.data(*x).iter().map(|&v| usize::from(v < lo) + 2 * usize::from(v > hi))),
                _ => {}
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, kernel: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        ensure_finite(kernel, value.data())?;
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, rg))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ------------------------------------------------------------ kernels

    /// Dispatch by catalog id. See [`KernelKind`] for the accepted ids.
    ///
    /// Attributes: `conv2d` takes `stride` (1 or 2); `matmul` takes optional
    /// `transpose_b` (0/1); `scale` takes `factor` and optional `offset`;
    /// `concat` takes `axis` (0 or -1); `bilinear-resize` takes `height` and
    /// `width`; `gather` takes `rows`.
    pub fn apply_kernel(&mut self, kind: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let kind: KernelKind = kind.parse()?;
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(kind.id(), format!("expected {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            KernelKind::Conv2d => {
                arity(3)?;
                let stride = attrs.get_int("conv2d", "stride")?;
                self.conv2d(inputs[0], inputs[1], inputs[2], stride as usize)
            }
            KernelKind::Dense => {
                arity(3)?;
                self.dense(inputs[0], inputs[1], inputs[2])
            }
            KernelKind::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1], attrs.get_int_or("transpose_b", 0) != 0)
            }
            KernelKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            KernelKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            KernelKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            KernelKind::Scale => {
                arity(1)?;
                let factor = T::of(attrs.get_float_or("factor", 1.0));
                let offset = T::of(attrs.get_float_or("offset", 0.0));
                self.affine(inputs[0], factor, offset)
            }
            KernelKind::Concat => match attrs.get_int_or("axis", -1) {
                0 => self.concat_rows(inputs),
                -1 => self.concat_channels(inputs),
                other => Err(Error::invalid(format!("concat: unsupported axis {other}"))),
            },
            KernelKind::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            KernelKind::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            KernelKind::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            KernelKind::L2Normalize => {
                arity(1)?;
                self.l2_normalize(inputs[0])
            }
            KernelKind::BilinearResize => {
                arity(1)?;
                let h = attrs.get_int("bilinear-resize", "height")?;
                let w = attrs.get_int("bilinear-resize", "width")?;
                if h < 1 || w < 1 {
                    return Err(Error::shape("bilinear-resize", format!("output size {h}×{w}")));
                }
                self.resize_bilinear(inputs[0], h as usize, w as usize)
            }
            KernelKind::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            KernelKind::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            KernelKind::Gather => {
                arity(1)?;
                let rows = attrs.get_ints("gather", "rows")?;
                let rows = rows
                    .into_iter()
                    .map(|r| usize::try_from(r).map_err(|_| Error::invalid(format!("gather: negative row {r}"))))
                    .collect::<Result<Vec<_>>>()?;
                self.gather_rows(inputs[0], &rows)
            }
            KernelKind::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            KernelKind::MaxPool2 => {
                arity(1)?;
                self.max_pool2(inputs[0])
            }
        }
    }

    /// 3×3 convolution, zero padding 1. `x: H×W×Cin`, `w: 3×3×Cin×Cout`, `b: Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        const K: &str = "conv2d";
        if stride != 1 && stride != 2 {
            return Err(Error::shape(K, format!("stride must be 1 or 2, got {stride}")));
        }
        let (h, wd, cin) = match self.shape(x) {
            &[h, w, c] if h > 0 && w > 0 && c > 0 => (h, w, c),
            s => return Err(Error::shape(K, format!("input must be non-empty H×W×C, got {s:?}"))),
        };
        let cout = match self.shape(w) {
            &[3, 3, ci, co] if ci == cin => co,
            s => return Err(Error::shape(K, format!("weight {s:?} incompatible with input channels {cin}"))),
        };
        if self.shape(b) != [cout] {
            return Err(Error::shape(K, format!("bias {:?} vs {cout} output channels", self.shape(b))));
        }
        let geom = ConvGeom::new(h, wd, cin, cout, stride);
        let out = kernels::conv2d_forward(self.data(x), self.data(w), self.data(b), &geom);
        let value = Tensor::new(vec![geom.oh, geom.ow, cout], out)?;
        self.push(K, value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// `x[..., Cin] · w[Cin, Cout] + b[Cout]` over all leading positions.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const K: &str = "dense";
        let xs = self.shape(x).to_vec();
        let Some(&cin) = xs.last() else {
            return Err(Error::shape(K, "input must have rank ≥ 1"));
        };
        let cout = match self.shape(w) {
            &[ci, co] if ci == cin => co,
            s => return Err(Error::shape(K, format!("weight {s:?} vs input channels {cin}"))),
        };
        if self.shape(b) != [cout] {
            return Err(Error::shape(K, format!("bias {:?} vs {cout} outputs", self.shape(b))));
        }
        let rows = self.value(x).len() / cin.max(1);
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(self.data(b));
        }
        T::gemm(rows, cin, cout, self.data(x), false, self.data(w), false, &mut out, true);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out)?;
        self.push(K, value, Op::Dense { x, w, b, rows, cin, cout }, &[x, w, b])
    }

    /// `a[M,K] · b[K,N]`, or `a · bᵀ` with `b[N,K]` when `transpose_b`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        const K: &str = "matmul";
        let (m, k) = match self.shape(a) {
            &[m, k] => (m, k),
            s => return Err(Error::shape(K, format!("lhs must be rank 2, got {s:?}"))),
        };
        let n = match (self.shape(b), transpose_b) {
            (&[kb, n], false) if kb == k => n,
            (&[n, kb], true) if kb == k => n,
            (s, _) => return Err(Error::shape(K, format!("rhs {s:?} incompatible with lhs [{m}, {k}]"))),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), false, self.data(b), transpose_b, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(K, value, Op::Matmul { a, b, m, k, n, transpose_b }, &[a, b])
    }

    fn unary(&mut self, kernel: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let data: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(kernel, value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    /// Natural log of probabilities, clamped to `[1e-12, 1 − 1e-12]` first.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let (lo, hi) = log_bounds::<T>();
        self.unary("log", x, |v| v.max(lo).min(hi).ln(), Op::Log(x))
    }

    /// `factor · x + offset`, elementwise.
    pub fn affine(&mut self, x: Var, factor: T, offset: T) -> Result<Var> {
        self.unary("scale", x, |v| factor * v + offset, Op::Scale { x, factor })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.affine(x, factor, T::zero())
    }

    fn binary(&mut self, kernel: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(kernel, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(kernel, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Concatenate along the last (channel) axis; leading dims must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const K: &str = "concat";
        let Some(&first) = inputs.first() else {
            return Err(Error::shape(K, "no inputs"));
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        if self.shape(first).is_empty() {
            return Err(Error::shape(K, "inputs must have rank ≥ 1"));
        }
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(K, format!("leading dims {s:?} vs {lead:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        self.push(K, value, Op::Concat { inputs: inputs.to_vec(), last_axis: true }, inputs)
    }

    /// Concatenate along axis 0; trailing dims must agree.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        const K: &str = "concat";
        let Some(&first) = inputs.first() else {
            return Err(Error::shape(K, "no inputs"));
        };
        if self.shape(first).is_empty() {
            return Err(Error::shape(K, "inputs must have rank ≥ 1"));
        }
        let tail = self.shape(first)[1..].to_vec();
        let mut n = 0;
        let mut out = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(K, format!("trailing dims {s:?} vs {tail:?}")));
            }
            n += s[0];
            out.extend_from_slice(self.data(v));
        }
        let mut shape = vec![n];
        shape.extend(tail);
        let value = Tensor::new(shape, out)?;
        self.push(K, value, Op::Concat { inputs: inputs.to_vec(), last_axis: false }, inputs)
    }

    fn last_dim(&self, kernel: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&c) if c > 0 => Ok(c),
            _ => Err(Error::shape(kernel, format!("needs a non-empty last axis, got {:?}", self.shape(x)))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.last_dim("softmax", x)?;
        let value = Tensor::new(self.shape(x).to_vec(), kernels::softmax_rows(self.data(x), c))?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Unit-length rows over the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let c = self.last_dim("l2-normalize", x)?;
        let value = Tensor::new(self.shape(x).to_vec(), kernels::l2_normalize_rows(self.data(x), c))?;
        self.push("l2-normalize", value, Op::L2Normalize(x), &[x])
    }

    /// Half-pixel-center bilinear resize of an `H×W×C` map.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        const K: &str = "bilinear-resize";
        let dims = match self.shape(x) {
            &[h, w, c] if h > 0 && w > 0 && c > 0 => (h, w, c),
            s => return Err(Error::shape(K, format!("input must be non-empty H×W×C, got {s:?}"))),
        };
        if oh == 0 || ow == 0 {
            return Err(Error::shape(K, format!("output size {oh}×{ow}")));
        }
        let out = kernels::resize_forward(self.data(x), dims, oh, ow);
        let value = Tensor::new(vec![oh, ow, dims.2], out)?;
        self.push(K, value, Op::Resize { x, dims, oh, ow }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let s: T = self.data(x).iter().copied().sum();
        self.push("mean", Tensor::scalar(s / T::of(n as f64)), Op::Mean(x), &[x])
    }

    /// Select rows (axis 0) by index; repeated indices allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        const K: &str = "gather";
        let s = self.shape(x).to_vec();
        let Some(&n) = s.first() else {
            return Err(Error::shape(K, "input must have rank ≥ 1"));
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(K, format!("row {bad} out of range for {n} rows")));
        }
        let width: usize = s[1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        self.push(K, value, Op::Gather { x, rows: rows.to_vec() }, &[x])
    }

    /// 2×2 max-pool, stride 2, on an `H×W×C` map with even `H`, `W`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        const K: &str = "max-pool2";
        let dims = match self.shape(x) {
            &[h, w, c] if h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0 => (h, w, c),
            s => return Err(Error::shape(K, format!("needs even H, W ≥ 2, got {s:?}"))),
        };
        let (out, argmax) = kernels::max_pool2_forward(self.data(x), dims);
        let value = Tensor::new(vec![dims.0 / 2, dims.1 / 2, dims.2], out)?;
        self.push(K, value, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} → {shape:?}", self.shape(x))));
        }
        let value = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    // ------------------------------------------------------------ losses

    /// Mean softmax cross-entropy over non-ignored positions.
    /// `logits: [..., C]`, one label per leading position, 255 = ignore.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        const K: &str = "cross-entropy";
        let c = self.last_dim(K, logits)?;
        let rows = self.value(logits).len() / c;
        if labels.len() != rows {
            return Err(Error::shape(K, format!("{} labels for {rows} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != kernels::IGNORE_LABEL && l as usize >= c) {
            return Err(Error::invalid(format!("{K}: label {bad} out of range for {c} classes")));
        }
        let (loss, count) = kernels::cross_entropy_forward(self.data(logits), labels, c);
        if count == 0 {
            return Err(Error::invalid(format!("{K}: every pixel is ignored")));
        }
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), classes: c, count };
        self.push(K, Tensor::scalar(loss), op, &[logits])
    }

    /// `Σ_i coeffs[i] · weights[i] · InfoNCE_i` over the anchors of `pairs`,
    /// accumulated in canonical anchor order. Rows of `anchors` and `pool`
    /// are expected to be unit length.
    pub fn info_nce(
        &mut self,
        anchors: Var,
        pool: Var,
        weights: Option<Var>,
        pairs: &PairIndex,
        coeffs: &[T],
        tau: T,
    ) -> Result<Var> {
        const K: &str = "info-nce";
        let c = match (self.shape(anchors), self.shape(pool)) {
            (&[_, ca], &[_, cp]) if ca == cp => ca,
            (a, p) => return Err(Error::shape(K, format!("anchor store {a:?} vs pool {p:?}"))),
        };
        let (na, np) = (self.shape(anchors)[0], self.shape(pool)[0]);
        let m = pairs.len();
        if pairs.positives.len() != m || pairs.negatives.len() != m || coeffs.len() != m {
            return Err(Error::shape(K, "pair lists / coefficients disagree in length"));
        }
        if pairs.anchors.iter().any(|&a| a >= na)
            || pairs.positives.iter().chain(&pairs.negatives).flatten().any(|&p| p >= np)
        {
            return Err(Error::shape(K, "pair index out of range"));
        }
        if let Some(w) = weights {
            if self.value(w).len() != m {
                return Err(Error::shape(K, format!("{} weights for {m} anchors", self.value(w).len())));
            }
        }
        if tau <= T::zero() {
            return Err(Error::invalid(format!("{K}: temperature must be positive")));
        }
        let per_anchor = kernels::info_nce_per_anchor(self.data(anchors), self.data(pool), c, pairs, tau);
        let mut total = T::zero();
        for i in pairs.sorted_order() {
            let w = weights.map_or(T::one(), |w| self.data(w)[i]);
            total += coeffs[i] * w * per_anchor[i];
        }
        let mut inputs = vec![anchors, pool];
        inputs.extend(weights);
        let op = Op::InfoNce { anchors, pool, weights, pairs: pairs.clone(), coeffs: coeffs.to_vec(), tau, per_anchor };
        self.push(K, Tensor::scalar(total), op, &inputs)
    }

    /// Mean Euclidean distance between rows of `a` and `b` (both `[..., C]`)
    /// over positions where `mask` is set.
    pub fn masked_row_distance(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        const K: &str = "row-distance";
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(K, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let c = self.last_dim(K, a)?;
        let rows = self.value(a).len() / c;
        if mask.len() != rows {
            return Err(Error::shape(K, format!("mask of {} for {rows} rows", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid(format!("{K}: empty mask")));
        }
        let v = kernels::row_distance_forward(self.data(a), self.data(b), c, mask);
        self.push(K, Tensor::scalar(v), Op::RowDistance { a, b, mask: mask.to_vec() }, &[a, b])
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar loss. Consumes the record: a second call
    /// fails with [`Error::RecordConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::NoRecord);
        }
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        let node = self.nodes.get(loss.0).ok_or(Error::NoRecord)?;
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::NoRecord);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = BTreeMap::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    out.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let y = nodes[id].value.data();

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), geom, g, needs(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Dense { x, w, b, rows, cin, cout } => {
                let (rows, cin, cout) = (*rows, *cin, *cout);
                if needs(*x) {
                    let mut dx = vec![T::zero(); rows * cin];
                    T::gemm(rows, cout, cin, g, false, val(*w), true, &mut dx, false);
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); cin * cout];
                    T::gemm(cin, rows, cout, val(*x), true, g, false, &mut dw, false);
                    acc(*w, dw);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); cout];
                    for row in g.chunks_exact(cout) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    acc(*b, db);
                }
            }
            Op::Matmul { a, b, m, k, n, transpose_b } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    // dA = G · B^T  (B stored K×N), or G · B (B stored N×K)
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, val(*b), !*transpose_b, &mut da, false);
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *transpose_b {
                        // dB[N,K] = G^T · A
                        T::gemm(n, m, k, g, true, val(*a), false, &mut db, false);
                    } else {
                        T::gemm(k, m, n, val(*a), true, g, false, &mut db, false);
                    }
                    acc(*b, db);
                }
            }
            Op::Relu(x) => {
                let d = val(*x).iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = y.iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                acc(*x, d);
            }
            Op::Exp(x) => {
                let d = y.iter().zip(g).map(|(&e, &gv)| gv * e).collect();
                acc(*x, d);
            }
            Op::Log(x) => {
                let (lo, hi) = log_bounds::<T>();
                let d =
                    val(*x).iter().zip(g).map(|(&v, &gv)| if v < lo || v > hi { T::zero() } else { gv / v }).collect();
                acc(*x, d);
            }
            Op::Scale { x, factor } => {
                let d = g.iter().map(|&gv| gv * *factor).collect();
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, val(*b).iter().zip(g).map(|(&v, &gv)| v * gv).collect());
                }
                if needs(*b) {
                    acc(*b, val(*a).iter().zip(g).map(|(&v, &gv)| v * gv).collect());
                }
            }
            Op::Concat { inputs, last_axis } => {
                if *last_axis {
                    let widths: Vec<usize> = inputs.iter().map(|v| *nodes[v.0].value.shape().last().unwrap()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = g.len() / total;
                    let mut off = 0;
                    for (&v, &w) in inputs.iter().zip(&widths) {
                        if needs(v) {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                            }
                            acc(v, d);
                        }
                        off += w;
                    }
                } else {
                    let mut off = 0;
                    for &v in inputs {
                        let n = nodes[v.0].value.len();
                        acc(v, g[off..off + n].to_vec());
                        off += n;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = *nodes[id].value.shape().last().unwrap();
                acc(*x, kernels::softmax_rows_backward(y, g, c));
            }
            Op::L2Normalize(x) => {
                let c = *nodes[id].value.shape().last().unwrap();
                acc(*x, kernels::l2_normalize_rows_backward(val(*x), y, g, c));
            }
            Op::Resize { x, dims, oh, ow } => {
                acc(*x, kernels::resize_backward(g, *dims, *oh, *ow));
            }
            Op::Sum(x) => {
                acc(*x, vec![g[0]; nodes[x.0].value.len()]);
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                acc(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Gather { x, rows } => {
                let n = nodes[x.0].value.len();
                let width = n / nodes[x.0].value.shape()[0].max(1);
                let mut d = vec![T::zero(); n];
                for (i, &r) in rows.iter().enumerate() {
                    for k in 0..width {
                        d[r * width + k] += g[i * width + k];
                    }
                }
                acc(*x, d);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![T::zero(); nodes[x.0].value.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                acc(*x, d);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::CrossEntropy { logits, labels, classes, count } => {
                acc(*logits, kernels::cross_entropy_backward(val(*logits), labels, *classes, *count, g[0]));
            }
            Op::InfoNce { anchors, pool, weights, pairs, coeffs, tau, per_anchor } => {
                let c = nodes[anchors.0].value.shape()[1];
                let scale: Vec<T> =
                    (0..pairs.len()).map(|i| coeffs[i] * weights.map_or(T::one(), |w| val(w)[i])).collect();
                let mut d_anchor = vec![T::zero(); nodes[anchors.0].value.len()];
                let mut d_pool = vec![T::zero(); nodes[pool.0].value.len()];
                kernels::info_nce_backward(
                    val(*anchors),
                    val(*pool),
                    c,
                    pairs,
                    *tau,
                    &scale,
                    g[0],
                    &mut d_anchor,
                    &mut d_pool,
                );
                if anchors == pool {
                    d_anchor.iter_mut().zip(&d_pool).for_each(|(a, &p)| *a += p);
                    acc(*anchors, d_anchor);
                } else {
                    acc(*anchors, d_anchor);
                    acc(*pool, d_pool);
                }
                if let Some(w) = weights {
                    let d = (0..pairs.len()).map(|i| g[0] * coeffs[i] * per_anchor[i]).collect();
                    acc(*w, d);
                }
            }
            Op::RowDistance { a, b, mask } => {
                let c = *nodes[a.0].value.shape().last().unwrap();
                let da = kernels::row_distance_backward(val(*a), val(*b), c, mask, g[0]);
                if needs(*b) {
                    acc(*b, da.iter().map(|&v| -v).collect());
                }
                acc(*a, da);
            }
        }
        Ok(())
    }
}

fn log_bounds<T: Scalar>() -> (T, T) {
    (T::of(1e-12), T::of(1.0 - 1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.apply_kernel("softmax", &[x], &Attrs::new()).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.apply_kernel("l2-normalize", &[x], &Attrs::new()).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 2]));
        let y = g.apply_kernel("matmul", &[a, b], &Attrs::new()).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn unknown_kernel_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2]));
        assert!(matches!(g.apply_kernel("fft", &[x], &Attrs::new()), Err(Error::UnknownKernel(_))));
    }

    #[test]
    fn shape_errors_name_the_kernel() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2, 3]));
        let err = g.matmul(a, b, false).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut g = Graph::<f64>::new();
        let data = [0.3, -1.2, 2.0, 0.7];
        let x = g.param(t(&[4], &data));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &data);
    }

    #[test]
    fn backward_is_single_use() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[3]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::RecordConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar_and_unrecorded() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[3]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));

        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[3]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::NoRecord)));

        let mut g = Graph::<f64>::inference();
        let x = g.param(Tensor::ones(&[3]));
        let s = g.sum(x).unwrap();
        assert!(matches!(g.backward(s), Err(Error::NoRecord)));
    }

    #[test]
    fn resize_identity_and_center_value() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]));
        let same = g.resize_bilinear(x, 2, 2).unwrap();
        assert_eq!(g.value(same).data(), g.value(x).data());
        let up = g.resize_bilinear(x, 3, 3).unwrap();
        assert!((g.value(up).data()[4] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[3, 5, 2], 0.25));
        for (h, w) in [(1, 1), (7, 2), (16, 9)] {
            let y = g.resize_bilinear(x, h, w).unwrap();
            assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn resize_rejects_empty_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[0, 3, 1]));
        assert!(g.resize_bilinear(x, 2, 2).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { kernel: "exp" })));
    }

    #[test]
    fn conv_shapes_and_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[8, 6, 2]));
        let w = g.constant(Tensor::ones(&[3, 3, 2, 4]));
        let b = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.conv2d(x, w, b, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 3, 4]);
        assert_eq!(&g.value(y).data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(g.conv2d(x, w, b, 3).is_err());
    }

    #[test]
    fn info_nce_scalar_case() {
        // anchor (1,0), positive (0,1), negative (1,0), τ = 1 → ln(1 + e)
        let mut g = Graph::<f64>::new();
        let store = g.param(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]));
        let pairs = PairIndex { anchors: vec![0], positives: vec![vec![1]], negatives: vec![vec![2]] };
        let l = g.info_nce(store, store, None, &pairs, &[1.0], 1.0).unwrap();
        let expected = (1.0 + 1f64.exp()).ln();
        assert!((g.value(l).data()[0] - expected).abs() < 1e-14);
    }
}
