//! Classification and box-regression losses and the weighted overall
//! objective.

use crate::bbox::BBox;
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const PROB_EPS: f64 = 1e-7;
pub const FOCAL_ALPHA: u32 = 2;
pub const FOCAL_BETA: i32 = 4;
const MIN_OVERLAP: f64 = 0.7;

/// Supervision for one search crop on a `grid x grid` score map.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTarget {
    /// Normalized search-crop coordinates.
    pub gt_box: BBox,
    /// `[grid, grid]`, peak 1 at `positive_cell`.
    pub cls_map: Tensor,
    /// `(row, col)`.
    pub positive_cell: (usize, usize),
}

/// Largest radius (in cells) such that a box corner displaced by it still
/// overlaps the true box by `min_overlap`.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let root = |a: f64, b: f64, c: f64| (b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / 2.0;
    let r1 = root(1.0, h + w, w * h * (1.0 - min_overlap) / (1.0 + min_overlap));
    let r2 = root(4.0, 2.0 * (h + w), (1.0 - min_overlap) * w * h);
    let r3 = root(4.0 * min_overlap, -2.0 * min_overlap * (h + w), (min_overlap - 1.0) * w * h);
    r1.min(r2).min(r3)
}

impl TrainTarget {
    /// Gaussian bump on the cell containing the box center, with
    /// `sigma = (2r + 1) / 6` for the overlap radius `r`.
    pub fn new(gt_box: BBox, grid: usize) -> Result<Self> {
        if !gt_box.is_valid_normalized() {
            return Err(Error::InvalidArgument(format!("target box {gt_box:?} is not normalized")));
        }
        let n = grid as f64;
        let cell = |v: f64| ((v * n).floor() as usize).min(grid - 1);
        let (row, col) = (cell(gt_box.cy), cell(gt_box.cx));
        let radius = gaussian_radius(gt_box.h * n, gt_box.w * n, MIN_OVERLAP).floor().max(0.0);
        let sigma = (2.0 * radius + 1.0) / 6.0;
        let mut data = Vec::with_capacity(grid * grid);
        for r in 0..grid {
            for c in 0..grid {
                let d2 = (r as f64 - row as f64).powi(2) + (c as f64 - col as f64).powi(2);
                data.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        Ok(Self {
            gt_box,
            cls_map: Tensor::new(&[grid, grid], data)?,
            positive_cell: (row, col),
        })
    }

    pub fn grid(&self) -> usize {
        self.cls_map.shape()[0]
    }

    pub fn positive_index(&self) -> usize {
        self.positive_cell.0 * self.grid() + self.positive_cell.1
    }
}

/// Penalty-reduced focal loss of `p: [G, G]` against the target heat map,
/// normalized by the single positive.
pub fn focal_loss(g: &mut Graph, p: Var, target: &TrainTarget) -> Result<Var> {
    if g.shape(p) != target.cls_map.shape() {
        return Err(Error::shape(
            "focal_loss",
            format!("scores {:?} vs target {:?}", g.shape(p), target.cls_map.shape()),
        ));
    }
    let shape = target.cls_map.shape().to_vec();
    let pos = target.positive_index();
    let (mut pos_mask, mut neg_weight) = (vec![0.0; target.cls_map.numel()], Vec::new());
    pos_mask[pos] = 1.0;
    for (i, y) in target.cls_map.data().iter().enumerate() {
        neg_weight.push(if i == pos { 0.0 } else { (1.0 - y).powi(FOCAL_BETA) });
    }
    let pos_mask = g.constant_from(&shape, pos_mask)?;
    let neg_weight = g.constant_from(&shape, neg_weight)?;

    let pc = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let neg_pc = g.scale(pc, -1.0);
    let one_minus = g.add_scalar(neg_pc, 1.0);
    let log_p = g.log(pc);
    let log_1mp = g.log(one_minus);

    let pos_focus = pow(g, one_minus, FOCAL_ALPHA)?;
    let pos_term = g.mul(pos_focus, log_p)?;
    let pos_term = g.mul(pos_term, pos_mask)?;
    let neg_focus = pow(g, pc, FOCAL_ALPHA)?;
    let neg_term = g.mul(neg_focus, log_1mp)?;
    let neg_term = g.mul(neg_term, neg_weight)?;
    let both = g.add(pos_term, neg_term)?;
    let total = g.sum(both);
    Ok(g.scale(total, -1.0))
}

fn pow(g: &mut Graph, x: Var, k: u32) -> Result<Var> {
    let mut y = x;
    for _ in 1..k {
        y = g.mul(y, x)?;
    }
    Ok(y)
}

fn check_box_var(g: &Graph, pred: Var, op: &'static str) -> Result<()> {
    if g.shape(pred) != [4] {
        return Err(Error::shape(op, format!("expected a [4] box, got {:?}", g.shape(pred))));
    }
    Ok(())
}

/// `1 - GIoU(pred, gt)` for `pred = [cx, cy, w, h]`.
pub fn giou_loss(g: &mut Graph, pred: Var, gt: &BBox) -> Result<Var> {
    check_box_var(g, pred, "giou_loss")?;
    if !(gt.area() > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate ground-truth box {gt:?}")));
    }
    let centers = g.gather(pred, &[0, 1, 0, 1])?;
    let sizes = g.gather(pred, &[2, 3, 2, 3])?;
    let half = g.constant_from(&[4], vec![-0.5, -0.5, 0.5, 0.5])?;
    let offsets = g.mul(sizes, half)?;
    let pc = g.add(centers, offsets)?; // x1, y1, x2, y2
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let gc = g.constant_from(&[4], vec![gx1, gy1, gx2, gy2])?;

    // intersection uses max of the low corners and min of the high ones
    let lo = g.gather(pc, &[0, 1])?;
    let hi = g.gather(pc, &[2, 3])?;
    let glo = g.gather(gc, &[0, 1])?;
    let ghi = g.gather(gc, &[2, 3])?;
    let ilo = g.maximum(lo, glo)?;
    let ihi = g.minimum(hi, ghi)?;
    let iext = g.sub(ihi, ilo)?;
    let iext = g.relu(iext);
    let inter = product(g, iext)?;

    let pext = g.sub(hi, lo)?;
    let pext = g.relu(pext);
    let parea = product(g, pext)?;
    let garea = g.scalar(gt.area());
    let union = g.add(parea, garea)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;

    let clo = g.minimum(lo, glo)?;
    let chi = g.maximum(hi, ghi)?;
    let cext = g.sub(chi, clo)?;
    let carea = product(g, cext)?;
    let gap = g.sub(carea, union)?;
    let gap = g.div(gap, carea)?;
    let giou = g.sub(iou, gap)?;
    let neg = g.scale(giou, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Product of the two entries of a `[2]` var, as `[1]`.
fn product(g: &mut Graph, v: Var) -> Result<Var> {
    let a = g.gather(v, &[0])?;
    let b = g.gather(v, &[1])?;
    g.mul(a, b)
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_loss(g: &mut Graph, pred: Var, gt: &BBox) -> Result<Var> {
    check_box_var(g, pred, "l1_loss")?;
    let t = g.constant_from(&[4], gt.to_array().to_vec())?;
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Values of the five objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub blur: f64,
    pub sparsity: f64,
}

impl LossComponents {
    pub fn to_array(&self) -> [f64; 5] {
        [self.cls, self.iou, self.l1, self.blur, self.sparsity]
    }

    /// The weighted sum; fails on a non-finite term.
    pub fn total(&self, w: &LossWeights) -> Result<f64> {
        let names = ["cls", "iou", "l1", "blur", "sparsity"];
        for (name, v) in names.iter().zip(self.to_array()) {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name} = {v}")));
            }
        }
        Ok(self.cls + w.iou * self.iou + w.l1 * self.l1 + w.blur * self.blur + w.sparsity * self.sparsity)
    }
}

/// Graph handles of the five terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub iou: Var,
    pub l1: Var,
    pub blur: Var,
    pub sparsity: Var,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossComponents {
        LossComponents {
            cls: g.item(self.cls),
            iou: g.item(self.iou),
            l1: g.item(self.l1),
            blur: g.item(self.blur),
            sparsity: g.item(self.sparsity),
        }
    }
}

/// `cls + w.iou * iou + w.l1 * l1 + w.blur * blur + w.sparsity * sparsity`.
pub fn overall_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let values = terms.values(g);
    values.total(w)?;
    let mut total = terms.cls;
    for (v, c) in [(terms.iou, w.iou), (terms.l1, w.l1), (terms.blur, w.blur), (terms.sparsity, w.sparsity)] {
        let scaled = g.scale(v, c);
        total = g.add(total, scaled)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot_target(n: usize, row: usize, col: usize) -> TrainTarget {
        let mut map = Tensor::zeros(&[n, n]);
        map.data_mut()[row * n + col] = 1.0;
        TrainTarget {
            gt_box: BBox::new((col as f64 + 0.5) / n as f64, (row as f64 + 0.5) / n as f64, 0.2, 0.2),
            cls_map: map,
            positive_cell: (row, col),
        }
    }

    #[test]
    fn target_map_shape_and_peak() {
        let t = TrainTarget::new(BBox::new(0.40, 0.70, 0.25, 0.2), 8).unwrap();
        assert_eq!(t.positive_cell, (5, 3));
        assert_eq!(t.cls_map.data()[t.positive_index()], 1.0);
        assert!(t.cls_map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(t.cls_map.data()[5 * 8 + 4] < 1.0);
        let edge = TrainTarget::new(BBox::new(1.0, 1.0, 0.1, 0.1), 8).unwrap();
        assert_eq!(edge.positive_cell, (7, 7));
        assert!(TrainTarget::new(BBox::new(0.5, 0.5, 0.0, 0.1), 8).is_err());
        // a small box gets radius 0: sigma 1/6 leaves neighbors near zero
        let tiny = TrainTarget::new(BBox::new(0.5, 0.5, 0.05, 0.05), 8).unwrap();
        assert!(tiny.cls_map.data()[4 * 8 + 5] < 1e-7);
        assert!(gaussian_radius(8.0, 8.0, 0.7) > 1.0);
    }

    #[test]
    fn focal_examples() {
        let target = one_hot_target(2, 0, 1);
        let mut g = Graph::new();
        let p = g.constant(&Tensor::full(&[2, 2], 0.5));
        let l = focal_loss(&mut g, p, &target).unwrap();
        // 4 cells each contribute 0.25 * ln 2
        assert!((g.item(l) - 2f64.ln()).abs() < 1e-12);

        let perfect = g.constant(&Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let l = focal_loss(&mut g, perfect, &target).unwrap();
        assert!(g.item(l) >= 0.0 && g.item(l) < 1e-12);

        let wrong = g.constant(&Tensor::zeros(&[3, 3]));
        assert!(focal_loss(&mut g, wrong, &target).is_err());
    }

    #[test]
    fn focal_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let b = BBox::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4));
            let target = TrainTarget::new(b, 4).unwrap();
            let point = Tensor::new(&[4, 4], (0..16).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
            let r = grad_check(|g, x| focal_loss(g, x, &target), &point, 1e-4).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    fn box_var(g: &mut Graph, b: &BBox) -> Var {
        g.leaf(&Tensor::vector(b.to_array().to_vec()).with_requires_grad(true))
    }

    #[test]
    fn giou_examples() {
        let mut g = Graph::new();
        let gt = BBox::new(0.5, 0.5, 0.2, 0.3);
        let p = box_var(&mut g, &gt);
        let l = giou_loss(&mut g, p, &gt).unwrap();
        assert!(g.item(l).abs() < 1e-15);

        // unit squares touching along an edge: IoU 0 and the hull equals the union
        let a = BBox::from_top_left(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_top_left(1.0, 0.0, 1.0, 1.0);
        let p = box_var(&mut g, &a);
        let l = giou_loss(&mut g, p, &b).unwrap();
        assert!((g.item(l) - 1.0).abs() < 1e-15);

        // far apart: loss approaches 2
        let c = BBox::from_top_left(100.0, 100.0, 1.0, 1.0);
        let p = box_var(&mut g, &a);
        let l = giou_loss(&mut g, p, &c).unwrap();
        assert!(g.item(l) > 1.9 && g.item(l) <= 2.0);

        assert!(giou_loss(&mut g, p, &BBox::new(0.5, 0.5, 0.0, 0.2)).is_err());
    }

    #[test]
    fn giou_matches_direct_formula_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 20 {
            let gt = BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4));
            let pred = BBox::new(gt.cx + rng.gen_range(-0.15..0.15), gt.cy + rng.gen_range(-0.15..0.15), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4));
            // stay away from coincident edges, where min/max have kinks
            let (a, b) = (pred.corners(), gt.corners());
            let gaps = [a.0 - b.0, a.1 - b.1, a.2 - b.2, a.3 - b.3];
            if gaps.iter().any(|d| d.abs() < 1e-3) || pred.iou(&gt) == 0.0 {
                continue;
            }
            let (hx1, hy1, hx2, hy2) = (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3));
            let hull = (hx2 - hx1) * (hy2 - hy1);
            let inter = (a.2.min(b.2) - a.0.max(b.0)).max(0.0) * (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
            let union = pred.area() + gt.area() - inter;
            let expect = 1.0 - (inter / union - (hull - union) / hull);
            let mut g = Graph::new();
            let p = box_var(&mut g, &pred);
            let l = giou_loss(&mut g, p, &gt).unwrap();
            assert!((g.item(l) - expect).abs() < 1e-12);
            assert!((0.0..=2.0).contains(&g.item(l)));

            let point = Tensor::vector(pred.to_array().to_vec());
            let r = grad_check(|g, x| giou_loss(g, x, &gt), &point, 1e-3).unwrap();
            assert!(r.passed, "{r:?}");
            checked += 1;
        }
    }

    #[test]
    fn l1_examples_and_gradients() {
        let gt = BBox::new(0.5, 0.5, 0.2, 0.3);
        let mut g = Graph::new();
        let p = box_var(&mut g, &gt);
        let l = l1_loss(&mut g, p, &gt).unwrap();
        assert_eq!(g.item(l), 0.0);
        let p = box_var(&mut g, &BBox::new(0.5, 0.5, 0.3, 0.3));
        let l = l1_loss(&mut g, p, &gt).unwrap();
        assert!((g.item(l) - 0.025).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let point = Tensor::vector((0..4).map(|_| rng.gen_range(0.0..1.0)).collect());
            if point.data().iter().zip(gt.to_array()).any(|(a, b)| (a - b).abs() < 1e-3) {
                continue;
            }
            let r = grad_check(|g, x| l1_loss(g, x, &gt), &point, 1e-4).unwrap();
            assert!(r.passed, "{r:?}");
            let mut g = Graph::new();
            let x = g.constant(&point);
            let l = l1_loss(&mut g, x, &gt).unwrap();
            assert!((0.0..=1.0).contains(&g.item(l)));
        }
    }

    fn terms(g: &mut Graph, v: [f64; 5]) -> LossTerms {
        let vars: Vec<Var> = v.iter().map(|&x| g.leaf(&Tensor::scalar(x).with_requires_grad(true))).collect();
        LossTerms {
            cls: vars[0],
            iou: vars[1],
            l1: vars[2],
            blur: vars[3],
            sparsity: vars[4],
        }
    }

    #[test]
    fn overall_examples() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let t = terms(&mut g, [0.0; 5]);
        let l = overall_loss(&mut g, &t, &w).unwrap();
        assert_eq!(g.item(l), 0.0);
        let t = terms(&mut g, [1.0; 5]);
        let l = overall_loss(&mut g, &t, &w).unwrap();
        assert!((g.item(l) - 1008.0001).abs() < 1e-9);
        g.backward(l).unwrap();
        let grads: Vec<f64> = [t.cls, t.iou, t.l1, t.blur, t.sparsity].iter().map(|&v| g.grad(v).unwrap()[0]).collect();
        assert_eq!(grads, vec![1.0, 2.0, 5.0, 1e-4, 1e3]);

        let v = [0.3, 0.7, 0.1, 12.0, 0.02];
        let t1 = terms(&mut g, v);
        let t2 = terms(&mut g, v.map(|x| 2.0 * x));
        let (a, b) = (overall_loss(&mut g, &t1, &w).unwrap(), overall_loss(&mut g, &t2, &w).unwrap());
        assert!((2.0 * g.item(a) - g.item(b)).abs() < 1e-12);

        let t = terms(&mut g, [1.0, f64::NAN, 0.0, 0.0, 0.0]);
        assert!(matches!(overall_loss(&mut g, &t, &w), Err(Error::NonFinite(_))));
    }
}
