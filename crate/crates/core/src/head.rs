//! Convolutional prediction head over the search-token feature map and the
//! peak-based box decoder.

use std::f64::consts::PI;

use rand::Rng;

use crate::bbox::BBox;
use crate::config::ViTConfig;
use crate::error::{Error, Result};
use crate::numerics::{trunc_normal, Graph, ParamStore, Session, Tensor, Var};

const NORM_EPS: f64 = 1e-5;
const HIDDEN_LAYERS: usize = 3;
/// Smallest decoded extent, keeping boxes non-degenerate.
pub const MIN_EXTENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Class,
    Offset,
    Size,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Class, Branch::Offset, Branch::Size];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Class => "cls",
            Branch::Offset => "offset",
            Branch::Size => "size",
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            Branch::Class => 1,
            _ => 2,
        }
    }
}

/// Channel widths `d, d/2, d/4, d/8, out` of one branch.
pub fn branch_widths(embed_dim: usize, branch: Branch) -> Vec<usize> {
    let mut w: Vec<usize> = (0..=HIDDEN_LAYERS).map(|i| embed_dim >> i).collect();
    w.push(branch.out_channels());
    w
}

pub(crate) fn register_params<R: Rng>(store: &mut ParamStore, cfg: &ViTConfig, rng: &mut R) -> Result<()> {
    for branch in Branch::ALL {
        let widths = branch_widths(cfg.embed_dim, branch);
        for (i, pair) in widths.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let p = format!("head.{}.{i}", branch.name());
            let std = (2.0 / (cin * 9) as f64).sqrt();
            store.insert(format!("{p}.weight"), trunc_normal(&[cout, cin, 3, 3], std, rng))?;
            if i < HIDDEN_LAYERS {
                store.insert(format!("{p}.gain"), Tensor::ones(&[cout]))?;
            }
            store.insert(format!("{p}.bias"), Tensor::zeros(&[cout]))?;
        }
    }
    Ok(())
}

/// Graph handles of the three head maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadVars {
    /// `[G, G]`
    pub p: Var,
    /// `[2, G, G]`, channel 0 horizontal.
    pub o: Var,
    /// `[2, G, G]`, channel 0 width.
    pub s: Var,
    pub grid: usize,
}

impl HeadVars {
    pub fn output(&self, g: &Graph) -> HeadOutput {
        HeadOutput {
            p: g.tensor(self.p),
            o: g.tensor(self.o),
            s: g.tensor(self.s),
        }
    }

    /// `[cx, cy, w, h]` decoded at `(row, col)`, differentiable in the maps.
    pub fn box_at(&self, g: &mut Graph, row: usize, col: usize) -> Result<Var> {
        let n = self.grid;
        if row >= n || col >= n {
            return Err(Error::InvalidArgument(format!("cell ({row},{col}) outside {n}x{n} grid")));
        }
        let cell = row * n + col;
        let off = g.gather(self.o, &[cell, n * n + cell])?;
        let base = g.constant_from(&[2], vec![col as f64, row as f64])?;
        let center = g.add(off, base)?;
        let center = g.scale(center, 1.0 / n as f64);
        let size = g.gather(self.s, &[cell, n * n + cell])?;
        g.concat(&[center, size])
    }
}

fn branch_forward(s: &mut Session, branch: Branch, mut x: Var, widths: &[usize]) -> Result<Var> {
    for i in 0..widths.len() - 1 {
        let p = format!("head.{}.{i}", branch.name());
        let k = s.param(&format!("{p}.weight"))?;
        let b = s.param(&format!("{p}.bias"))?;
        x = s.conv2d(x, k, 1, 1)?;
        if i < HIDDEN_LAYERS {
            let gain = s.param(&format!("{p}.gain"))?;
            x = s.channel_norm(x, gain, b, NORM_EPS)?;
            x = s.relu(x);
        } else {
            let c = widths[i + 1];
            let shape = s.shape(x).to_vec();
            let bias = s.reshape(b, &[c, 1, 1])?;
            let bias = expand_channels(s, bias, &shape)?;
            x = s.add(x, bias)?;
            x = s.sigmoid(x);
        }
    }
    Ok(x)
}

/// Broadcasts a `[C,1,1]` bias over `[C,H,W]`.
fn expand_channels(g: &mut Graph, bias: Var, shape: &[usize]) -> Result<Var> {
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let idx: Vec<usize> = (0..c).flat_map(|ch| std::iter::repeat(ch).take(hw)).collect();
    let flat = g.gather(bias, &idx)?;
    g.reshape(flat, shape)
}

/// Runs the three branches on search tokens `[K_x, d]`.
pub fn head_forward(s: &mut Session, cfg: &ViTConfig, search_tokens: Var) -> Result<HeadVars> {
    let shape = s.shape(search_tokens).to_vec();
    if shape.len() != 2 || shape[1] != cfg.embed_dim {
        return Err(Error::shape("head_forward", format!("expected [K_x, {}], got {shape:?}", cfg.embed_dim)));
    }
    let kx = shape[0];
    let grid = (kx as f64).sqrt().round() as usize;
    if grid * grid != kx {
        return Err(Error::shape("head_forward", format!("{kx} search tokens do not form a square grid")));
    }
    let t = s.transpose(search_tokens)?;
    let map = s.reshape(t, &[cfg.embed_dim, grid, grid])?;
    let mut outs = [map; 3];
    for (slot, branch) in outs.iter_mut().zip(Branch::ALL) {
        *slot = branch_forward(s, branch, map, &branch_widths(cfg.embed_dim, branch))?;
    }
    let p = s.reshape(outs[0], &[grid, grid])?;
    Ok(HeadVars {
        p,
        o: outs[1],
        s: outs[2],
        grid,
    })
}

/// Plain head maps over a `G x G` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub p: Tensor,
    pub o: Tensor,
    pub s: Tensor,
}

impl HeadOutput {
    pub fn grid(&self) -> usize {
        self.p.shape()[0]
    }

    fn check(&self) -> Result<usize> {
        let n = self.grid();
        if self.p.shape() != [n, n] || self.o.shape() != [2, n, n] || self.s.shape() != [2, n, n] {
            return Err(Error::shape(
                "head output",
                format!("p {:?}, o {:?}, s {:?}", self.p.shape(), self.o.shape(), self.s.shape()),
            ));
        }
        Ok(n)
    }

    /// Box read at cell `idx` (row-major) from the raw maps.
    pub fn box_at(&self, idx: usize) -> BBox {
        let n = self.grid();
        let (row, col) = (idx / n, idx % n);
        let (o, s) = (self.o.data(), self.s.data());
        BBox::new(
            (col as f64 + o[idx]) / n as f64,
            (row as f64 + o[n * n + idx]) / n as f64,
            s[idx].clamp(MIN_EXTENT, 1.0),
            s[n * n + idx].clamp(MIN_EXTENT, 1.0),
        )
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Box at the classification peak, in normalized search-crop coordinates.
pub fn decode_box(out: &HeadOutput) -> Result<(BBox, f64)> {
    out.check()?;
    let idx = argmax_first(out.p.data());
    Ok((out.box_at(idx), out.p.data()[idx]))
}

/// Peak of `p * window`; offset and size are still read from the raw maps.
/// The returned score is the penalized one.
pub fn decode_box_windowed(out: &HeadOutput, window: &Tensor) -> Result<(BBox, f64)> {
    out.check()?;
    if window.shape() != out.p.shape() {
        return Err(Error::shape(
            "decode_box_windowed",
            format!("window {:?} vs score map {:?}", window.shape(), out.p.shape()),
        ));
    }
    let scored: Vec<f64> = out.p.data().iter().zip(window.data()).map(|(p, w)| p * w).collect();
    let idx = argmax_first(&scored);
    Ok((out.box_at(idx), scored[idx]))
}

/// Outer product of a symmetric Hann profile, blended towards 1:
/// `(1 - blend) + blend * hann`. The profile samples `n + 2` points and drops
/// the zero endpoints, so every cell keeps a positive weight.
pub fn hanning_window(n: usize, blend: f64) -> Tensor {
    let m = (n + 1) as f64;
    let profile: Vec<f64> = (1..=n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / m).cos()).collect();
    let mut data = Vec::with_capacity(n * n);
    for r in &profile {
        for c in &profile {
            data.push((1.0 - blend) + blend * r * c);
        }
    }
    Tensor::new(&[n, n], data).expect("positive extent")
}
