//! Eager tape for reverse-mode differentiation.
//!
//! Every operation evaluates immediately and appends a node holding its value
//! and a record of how it was produced. [`Graph::backward`] walks the tape in
//! reverse. Node values are never mutated after they are recorded.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Gelu,
    Sigmoid,
    Relu,
    Sqrt,
    Square,
    Log,
    Exp,
    Abs,
    Neg,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl UnaryOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Log => x.ln(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Neg => -x,
            UnaryOp::Tanh => x.tanh(),
        }
    }

    /// Derivative at input `x` with output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Exp => y,
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Neg => -1.0,
            UnaryOp::Tanh => 1.0 - y * y,
        }
    }
}

impl BinaryOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Max => a.max(b),
            BinaryOp::Min => a.min(b),
        }
    }

    /// Partial derivatives (d/da, d/db).
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (1.0 / b, -a / (b * b)),
            // ties route to the left operand
            BinaryOp::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            BinaryOp::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let np = self.positions();
        let mut cols = vec![0.0; self.patch_len() * np];
        for c in 0..self.channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let src_row = (c * self.height + y as usize) * self.width;
                        for ox in 0..self.out_w {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.width as isize {
                                dst[oy * self.out_w + ox] = x[src_row + xx as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let np = self.positions();
        for c in 0..self.channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * np..(row + 1) * np];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst_row = (c * self.height + y as usize) * self.width;
                        for ox in 0..self.out_w {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.width as isize {
                                dx[dst_row + xx as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    /// Normalizes `groups` contiguous runs of `len` values; used for both
    /// layer norm (rows) and per-channel spatial norm.
    Norm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        len: usize,
        per_group_affine: bool,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        offset: usize,
    },
    SliceCols {
        x: Var,
        rows: usize,
        cols: usize,
        start: usize,
        len: usize,
    },
    Concat(Vec<Var>),
    ConcatCols {
        parts: Vec<Var>,
        rows: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: u64,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths match the logical extents and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn grad_slot<'a>(
    nodes: &[Node],
    local: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(local[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

/// Output shape of a broadcast binary op: the shorter shape must be a suffix
/// of the longer one.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long.ends_with(short) {
        Some(long.to_vec())
    } else if short.iter().product::<usize>() == 1 {
        Some(long.to_vec())
    } else {
        None
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matmul and conv2d so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf. Gradients are tracked iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a tensor as a constant (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        assert_eq!(node.value.len(), 1, "item() on shape {:?}", node.shape);
        node.value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies a node out as a tensor, with its accumulated gradient if any.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(&node.shape, node.value.clone())
            .expect("recorded nodes have valid shapes")
            .with_requires_grad(node.requires_grad);
        if let Some(g) = &self.grads[v.0] {
            t.accumulate_grad(g).expect("grad shape matches value");
        }
        t
    }

    /// Gradient accumulated into `v` by all `backward` calls since the last
    /// [`Graph::zero_grad`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ----------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.iter().map(|&v| op.apply(v)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, value, Op::Unary(op, x), rg)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let shape = broadcast_shape(sa, sb).ok_or_else(|| {
            Error::shape("elementwise", format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n: usize = shape.iter().product();
        let (na, nb) = (va.len(), vb.len());
        let value = if na == n && nb == n {
            va.iter().zip(vb).map(|(&x, &y)| op.apply(x, y)).collect()
        } else {
            (0..n).map(|i| op.apply(va[i % na], vb[i % nb])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Min, a, b)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.iter().map(|&v| v * c).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.iter().map(|&v| v + c).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, value, Op::AddScalar(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.iter().map(|&v| v.clamp(lo, hi)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, value, Op::Clamp { x, lo, hi }, rg)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            false,
            &mut out,
            false,
        );
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, rg))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for rank {}", shape.len()),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| v[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (v[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, rg))
    }

    fn norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        groups: usize,
        len: usize,
        per_group_affine: bool,
    ) -> Var {
        let v = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; groups];
        let mut out = vec![0.0; v.len()];
        for r in 0..groups {
            let row = &v[r * len..(r + 1) * len];
            let mean = row.iter().sum::<f64>() / len as f64;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / len as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..len {
                let h = (row[c] - mean) * rs;
                xhat[r * len + c] = h;
                let (gi, bi) = if per_group_affine { (g[r], b[r]) } else { (g[c], b[c]) };
                out[r * len + c] = h * gi + bi;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            shape,
            out,
            Op::Norm {
                x,
                gain,
                bias,
                groups,
                len,
                per_group_affine,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let shape = &self.nodes[x.0].shape;
        let len = *shape.last().expect("rank >= 1");
        let groups = self.nodes[x.0].value.len() / len;
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.nodes[p.0].value.len() != len {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} has {} values, feature dim is {len}", self.nodes[p.0].value.len()),
                ));
            }
        }
        Ok(self.norm(x, gain, bias, eps, groups, len, false))
    }

    /// Per-channel normalization over the spatial extent of a `[C, H, W]`
    /// map, with per-channel gain and bias.
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("channel_norm eps must be > 0".into()));
        }
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 3 {
            return Err(Error::shape("channel_norm", format!("expected [C,H,W], got {shape:?}")));
        }
        let (c, len) = (shape[0], shape[1] * shape[2]);
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.nodes[p.0].value.len() != c {
                return Err(Error::shape(
                    "channel_norm",
                    format!("{name} has {} values, channel count is {c}", self.nodes[p.0].value.len()),
                ));
            }
        }
        Ok(self.norm(x, gain, bias, eps, c, len, true))
    }

    /// 2-D cross-correlation of `x: [C, H, W]` with `kernel: [O, C, kh, kw]`
    /// using zero padding.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[kernel.0].shape);
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sk:?} (stride {stride})"),
            ));
        }
        let (h, w, kh, kw) = (sx[1], sx[2], sk[2], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            channels: sx[0],
            height: h,
            width: w,
            out_channels: sk[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = geom.im2col(&self.nodes[x.0].value);
        let (o, pl, np) = (geom.out_channels, geom.patch_len(), geom.positions());
        let mut out = vec![0.0; o * np];
        gemm(o, pl, np, &self.nodes[kernel.0].value, false, &cols, false, &mut out, false);
        self.macs += (o * pl * np) as u64;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            vec![o, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { x, kernel, geom },
            rg,
        ))
    }

    // ---- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.nodes[x.0].shape),
            ));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if len == 0 || start + len > shape[0] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} outside leading extent {}", start + len, shape[0]),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let mut new_shape = shape.clone();
        new_shape[0] = len;
        let value = self.nodes[x.0].value[start * inner..(start + len) * inner].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            new_shape,
            value,
            Op::Narrow {
                x,
                offset: start * inner,
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 || len == 0 || start + len > shape[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {shape:?}", start + len),
            ));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows, len],
            out,
            Op::SliceCols {
                x,
                rows,
                cols,
                start,
                len,
            },
            rg,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.nodes[first.0].shape[1..].to_vec();
        let mut lead = 0;
        let mut value = Vec::new();
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("trailing shape {s:?} vs {tail:?}")));
            }
            lead += s[0];
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), rg))
    }

    /// Concatenation of matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.nodes[first.0].shape[0];
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", format!("part {s:?} vs {rows} rows")));
            }
            total += s[1];
        }
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = self.nodes[p.0].shape[1];
                value.extend_from_slice(&self.nodes[p.0].value[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            vec![rows, total],
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
                rows,
            },
            rg,
        ))
    }

    /// Picks elements by flat (row-major) index into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if indices.is_empty() || indices.iter().any(|&i| i >= v.len()) {
            return Err(Error::shape(
                "gather",
                format!("indices {indices:?} for {} elements", v.len()),
            ));
        }
        let value = indices.iter().map(|&i| v[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![indices.len()],
            value,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element `loss`. Gradients add into the
    /// per-node slots, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].shape),
            ));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = local[i].take() else { continue };
            self.propagate(i, &gout, &mut local);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                None => self.grads[i] = Some(gout),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], local: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {
                if let Some($g) = grad_slot(nodes, local, $v) $body
            };
        }

        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, x) => {
                let xv = &nodes[x.0].value;
                with_grad!(*x, |g| {
                    for j in 0..g.len() {
                        g[j] += gout[j] * op.derivative(xv[j], node.value[j]);
                    }
                });
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (na, nb) = (va.len(), vb.len());
                let n = gout.len();
                if a == b {
                    with_grad!(*a, |g| {
                        for j in 0..n {
                            let (da, db) = op.partials(va[j % na], vb[j % nb]);
                            g[j % na] += gout[j] * (da + db);
                        }
                    });
                } else {
                    with_grad!(*a, |g| {
                        for j in 0..n {
                            g[j % na] += gout[j] * op.partials(va[j % na], vb[j % nb]).0;
                        }
                    });
                    with_grad!(*b, |g| {
                        for j in 0..n {
                            g[j % nb] += gout[j] * op.partials(va[j % na], vb[j % nb]).1;
                        }
                    });
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                if a == b {
                    let mut tmp = vec![0.0; m * k];
                    gemm(*m, *n, *k, gout, false, vb, true, &mut tmp, false);
                    gemm(*k, *m, *n, va, true, gout, false, &mut tmp, true);
                    with_grad!(*a, |g| {
                        g.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                    });
                } else {
                    with_grad!(*a, |g| {
                        gemm(*m, *n, *k, gout, false, vb, true, g, true);
                    });
                    with_grad!(*b, |g| {
                        gemm(*k, *m, *n, va, true, gout, false, g, true);
                    });
                }
            }
            Op::Transpose { x, rows, cols } => {
                with_grad!(*x, |g| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            g[r * cols + c] += gout[c * rows + r];
                        }
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                with_grad!(*x, |g| {
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let base = o * len * inner + ii;
                            let dot: f64 = (0..*len)
                                .map(|j| y[base + j * inner] * gout[base + j * inner])
                                .sum();
                            for j in 0..*len {
                                let at = base + j * inner;
                                g[at] += y[at] * (gout[at] - dot);
                            }
                        }
                    }
                });
            }
            Op::Norm {
                x,
                gain,
                bias,
                groups,
                len,
                per_group_affine,
                xhat,
                rstd,
            } => {
                let gv = &nodes[gain.0].value;
                let affine = |r: usize, c: usize| if *per_group_affine { r } else { c };
                with_grad!(*gain, |g| {
                    for r in 0..*groups {
                        for c in 0..*len {
                            g[affine(r, c)] += gout[r * len + c] * xhat[r * len + c];
                        }
                    }
                });
                with_grad!(*bias, |g| {
                    for r in 0..*groups {
                        for c in 0..*len {
                            g[affine(r, c)] += gout[r * len + c];
                        }
                    }
                });
                with_grad!(*x, |g| {
                    let nf = *len as f64;
                    let mut dxhat = vec![0.0; *len];
                    for r in 0..*groups {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..*len {
                            let d = gout[r * len + c] * gv[affine(r, c)];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * len + c];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for c in 0..*len {
                            g[r * len + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * len + c] * mean_dx);
                        }
                    }
                });
            }
            Op::Conv2d { x, kernel, geom } => {
                let (o, pl, np) = (geom.out_channels, geom.patch_len(), geom.positions());
                let need_k = nodes[kernel.0].requires_grad;
                let need_x = nodes[x.0].requires_grad;
                if need_k {
                    let cols = geom.im2col(&nodes[x.0].value);
                    with_grad!(*kernel, |g| {
                        gemm(o, np, pl, gout, false, &cols, true, g, true);
                    });
                }
                if need_x {
                    let mut dcols = vec![0.0; pl * np];
                    gemm(pl, o, np, &nodes[kernel.0].value, true, gout, false, &mut dcols, false);
                    with_grad!(*x, |g| {
                        geom.col2im(&dcols, g);
                    });
                }
            }
            Op::Sum(x) => {
                with_grad!(*x, |g| {
                    g.iter_mut().for_each(|v| *v += gout[0]);
                });
            }
            Op::Mean(x) => {
                with_grad!(*x, |g| {
                    let d = gout[0] / g.len() as f64;
                    g.iter_mut().for_each(|v| *v += d);
                });
            }
            Op::Scale(x, c) => {
                with_grad!(*x, |g| {
                    g.iter_mut().zip(gout).for_each(|(v, d)| *v += c * d);
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                with_grad!(*x, |g| {
                    g.iter_mut().zip(gout).for_each(|(v, d)| *v += d);
                });
            }
            Op::Narrow { x, offset } => {
                with_grad!(*x, |g| {
                    g[*offset..*offset + gout.len()]
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(v, d)| *v += d);
                });
            }
            Op::SliceCols {
                x,
                rows,
                cols,
                start,
                len,
            } => {
                with_grad!(*x, |g| {
                    for r in 0..*rows {
                        for c in 0..*len {
                            g[r * cols + start + c] += gout[r * len + c];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    with_grad!(*p, |g| {
                        g.iter_mut()
                            .zip(&gout[offset..offset + n])
                            .for_each(|(v, d)| *v += d);
                    });
                    offset += n;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| nodes[p.0].shape[1]).sum();
                let mut start = 0;
                for p in parts {
                    let c = nodes[p.0].shape[1];
                    with_grad!(*p, |g| {
                        for r in 0..*rows {
                            for j in 0..c {
                                g[r * c + j] += gout[r * total + start + j];
                            }
                        }
                    });
                    start += c;
                }
            }
            Op::Gather { x, indices } => {
                with_grad!(*x, |g| {
                    for (j, &idx) in indices.iter().enumerate() {
                        g[idx] += gout[j];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &nodes[x.0].value;
                with_grad!(*x, |g| {
                    for j in 0..g.len() {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            g[j] += gout[j];
                        }
                    }
                });
            }
        }
    }
}
