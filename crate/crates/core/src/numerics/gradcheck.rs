use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate, if any were checked.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Relative errors below this denominator are measured against it instead,
/// so coordinates with vanishing gradient are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

const STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks `grad` against central differences of `value` at the given
/// coordinates of `point` (all coordinates when `coords` is `None`).
pub fn grad_check_fn(
    value: impl Fn(&Tensor) -> Result<f64>,
    grad: impl Fn(&Tensor) -> Result<Vec<f64>>,
    point: &Tensor,
    tol: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let analytic = grad(point)?;
    if analytic.len() != point.numel() {
        return Err(Error::shape("grad_check", "analytic gradient has wrong length"));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0;
    let mut worst_index = None;
    let mut probe = point.clone();
    for &i in coords {
        let x = point.data()[i];
        let h = STEP * x.abs().max(1.0);
        probe.data_mut()[i] = x + h;
        let fp = value(&probe)?;
        probe.data_mut()[i] = x - h;
        let fm = value(&probe)?;
        probe.data_mut()[i] = x;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("grad_check evaluation at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if worst_index.is_none() || err > worst {
            worst = err;
            worst_index = Some(i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        checked: coords.len(),
        tol,
        passed: worst <= tol,
    })
}

/// Gradient check for a function recorded on a [`Graph`]. `f` receives the
/// graph and a leaf holding the point and must return a one-element var.
pub fn grad_check<F>(f: F, point: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_coords(f, point, tol, None)
}

pub fn grad_check_coords<F>(
    f: F,
    point: &Tensor,
    tol: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor, with_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let x = g.leaf(&t.clone().with_requires_grad(with_grad));
        let y = f(&mut g, x)?;
        let v = g.item(y);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        if !with_grad {
            return Ok((v, None));
        }
        g.backward(y)?;
        let grad = g
            .grad(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        Ok((v, Some(grad)))
    };
    grad_check_fn(
        |t| eval(t, false).map(|r| r.0),
        |t| eval(t, true).map(|r| r.1.expect("requested gradient")),
        point,
        tol,
        coords,
    )
}
