//! Dense tensors, a recording tape for reverse-mode gradients, and a
//! central-difference gradient checker.

mod gradcheck;
mod graph;
mod params;
mod session;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_coords, grad_check_fn, relative_error, GradCheckReport,
    REL_ERROR_FLOOR,
};
pub use graph::{sigmoid, BinaryOp, Graph, UnaryOp, Var};
pub use params::{trunc_normal, ParamStore, FORMAT_VERSION, MAGIC};
pub use session::Session;
pub use tensor::Tensor;

use crate::error::Result;

// Plain-tensor conveniences over a throwaway graph.

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a), g.constant(b));
    let y = g.matmul(a, b)?;
    Ok(g.tensor(y))
}

pub fn unary(op: UnaryOp, x: &Tensor) -> Tensor {
    x.map(|v| op.apply(v))
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a), g.constant(b));
    let y = g.binary(op, a, b)?;
    Ok(g.tensor(y))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x);
    let y = g.softmax(x, axis)?;
    Ok(g.tensor(y))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, gain, bias) = (g.constant(x), g.constant(gain), g.constant(bias));
    let y = g.layer_norm(x, gain, bias, eps)?;
    Ok(g.tensor(y))
}

pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, k) = (g.constant(x), g.constant(kernel));
    let y = g.conv2d(x, k, stride, pad)?;
    Ok(g.tensor(y))
}
