//! Training objective: weighted focal classification loss plus GIoU and L1
//! box regression, `L = L_cls + λ_iou·(1 − GIoU) + λ_L1·L1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::head::{BoxN, HeadMaps, HeadOutput};
use crate::tensor::Tensor;

pub const FOCAL_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l1: f32,
    pub lambda_iou: f32,
    pub focal_alpha: f32,
    pub focal_beta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_l1: 5.0, lambda_iou: 2.0, focal_alpha: 2.0, focal_beta: 4.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_l1, self.lambda_iou, self.focal_alpha, self.focal_beta].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::arg("loss_weights", "weights must be nonnegative"));
        }
        Ok(())
    }
}

/// CenterNet-style Gaussian radius for a box of `h×w` cells so that a
/// corner jitter within the radius keeps IoU ≥ `min_overlap`.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Ground truth for one search image.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTarget {
    pub bbox: BoxN,
    pub grid: (usize, usize),
    /// Row-major `[h×w]` map, exactly 1 at `center` only.
    pub heatmap: Vec<f32>,
    pub center: (usize, usize),
}

impl GtTarget {
    pub fn new(bbox: BoxN, grid: (usize, usize)) -> Result<Self> {
        if !bbox.is_valid() {
            return Err(Error::arg("gt_box", format!("{bbox:?} is not a valid box")));
        }
        let (gh, gw) = grid;
        let ci = ((bbox.cy * gh as f32).floor() as usize).min(gh - 1);
        let cj = ((bbox.cx * gw as f32).floor() as usize).min(gw - 1);
        let radius = gaussian_radius(bbox.h as f64 * gh as f64, bbox.w as f64 * gw as f64, 0.7).floor().max(0.0) as i64;
        let sigma = (2 * radius + 1) as f64 / 6.0;
        let mut heatmap = vec![0.0f32; gh * gw];
        for i in 0..gh as i64 {
            for j in 0..gw as i64 {
                let (di, dj) = (i - ci as i64, j - cj as i64);
                if di.abs() > radius || dj.abs() > radius {
                    continue;
                }
                let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                if v > f64::from(f32::EPSILON) {
                    heatmap[i as usize * gw + j as usize] = v as f32;
                }
            }
        }
        heatmap[ci * gw + cj] = 1.0;
        Ok(GtTarget { bbox, grid, heatmap, center: (ci, cj) })
    }

    pub fn center_cell(&self) -> usize {
        self.center.0 * self.grid.1 + self.center.1
    }
}

/// Weighted focal value:
/// `-(1/N_pos) Σ [gt=1] (1-p)^α ln p + [gt<1] (1-gt)^β p^α ln(1-p)`,
/// with `p` clamped into `[eps, 1-eps]`.
pub fn focal_value(pred: &[f32], gt: &[f32], alpha: f32, beta: f32, eps: f32) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("focal_loss", format!("{} predictions vs {} targets", pred.len(), gt.len())));
    }
    let num_pos = gt.iter().filter(|&&v| v == 1.0).count();
    if num_pos == 0 {
        return Err(Error::arg("gt", "heatmap has no positive cell"));
    }
    let (a, b, e) = (alpha as f64, beta as f64, eps as f64);
    let mut total = 0.0;
    for (&p, &t) in pred.iter().zip(gt) {
        let p = (p as f64).clamp(e, 1.0 - e);
        if t == 1.0 {
            total -= (1.0 - p).powf(a) * p.ln();
        } else {
            total -= (1.0 - t as f64).powf(b) * p.powf(a) * (1.0 - p).ln();
        }
    }
    Ok(total / num_pos as f64)
}

/// Derivative of [`focal_value`] w.r.t. each prediction (zero where clamped).
pub fn focal_grad(pred: &[f32], gt: &[f32], alpha: f32, beta: f32, eps: f32) -> Vec<f64> {
    let num_pos = gt.iter().filter(|&&v| v == 1.0).count().max(1) as f64;
    let (a, b, e) = (alpha as f64, beta as f64, eps as f64);
    pred.iter()
        .zip(gt)
        .map(|(&p, &t)| {
            let p = p as f64;
            if p < e || p > 1.0 - e {
                return 0.0;
            }
            let d = if t == 1.0 {
                a * (1.0 - p).powf(a - 1.0) * p.ln() - (1.0 - p).powf(a) / p
            } else {
                let wt = (1.0 - t as f64).powf(b);
                -wt * (a * p.powf(a - 1.0) * (1.0 - p).ln() - p.powf(a) / (1.0 - p))
            };
            d / num_pos
        })
        .collect()
}

pub fn iou(a: &BoxN, b: &BoxN) -> f64 {
    a.iou(b)
}

/// Generalised IoU: `IoU − (hull − union)/hull`.
pub fn giou(a: &BoxN, b: &BoxN) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::arg("box", "zero-area box"));
    }
    let (loss, _) = giou_loss_and_grad(a.to_array(), b.to_array());
    Ok(1.0 - loss)
}

/// `1 − GIoU(pred, gt)` and its gradient w.r.t. `pred = (cx, cy, w, h)`.
pub fn giou_loss_and_grad(pred: [f32; 4], gt: [f32; 4]) -> (f64, [f64; 4]) {
    let c = |b: [f32; 4]| {
        let (cx, cy, w, h) = (b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    };
    let (p, t) = (c(pred), c(gt));
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let area_p = pw * ph;
    let area_t = (t[2] - t[0]) * (t[3] - t[1]);

    let iw_raw = p[2].min(t[2]) - p[0].max(t[0]);
    let ih_raw = p[3].min(t[3]) - p[1].max(t[1]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let cw = p[2].max(t[2]) - p[0].min(t[0]);
    let ch = p[3].max(t[3]) - p[1].min(t[1]);
    let hull = cw * ch;
    let iou = inter / union;
    let loss = 2.0 - iou - union / hull;

    // Partials w.r.t. corners (x1, y1, x2, y2) of the prediction.
    let mut d_inter = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if p[0] >= t[0] {
            d_inter[0] = -ih;
        }
        if p[2] <= t[2] {
            d_inter[2] = ih;
        }
        if p[1] >= t[1] {
            d_inter[1] = -iw;
        }
        if p[3] <= t[3] {
            d_inter[3] = iw;
        }
    }
    let d_area = [-ph, -pw, ph, pw];
    let mut d_hull = [0.0; 4];
    if p[0] <= t[0] {
        d_hull[0] = -ch;
    }
    if p[2] >= t[2] {
        d_hull[2] = ch;
    }
    if p[1] <= t[1] {
        d_hull[1] = -cw;
    }
    if p[3] >= t[3] {
        d_hull[3] = cw;
    }
    let mut d_corner = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * hull - union * d_hull[k]) / (hull * hull);
        d_corner[k] = -d_iou - d_ratio;
    }
    // x1 = cx − w/2, x2 = cx + w/2 (same for y).
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        (d_corner[2] - d_corner[0]) / 2.0,
        (d_corner[3] - d_corner[1]) / 2.0,
    ];
    (loss, grad)
}

/// Loss terms on the tape; `total` is the one to differentiate.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
}

/// Predicted box `((j + ox)/w, (i + oy)/h, sw, sh)` read at the
/// ground-truth centre cell, on the tape.
pub fn box_at_cell(g: &mut Graph, out: &HeadOutput, cell: usize) -> Result<Var> {
    let (gh, gw) = out.grid;
    let (i, j) = (cell / gw, cell % gw);
    let off = g.select_rows(out.offset, &[cell])?;
    let size = g.select_rows(out.size, &[cell])?;
    let raw = g.concat_cols(&[off, size])?;
    let scale = g.constant(Tensor::new([4], vec![1.0 / gw as f32, 1.0 / gh as f32, 1.0, 1.0])?);
    let shift = g.constant(Tensor::new([4], vec![j as f32 / gw as f32, i as f32 / gh as f32, 0.0, 0.0])?);
    let scaled = g.mul_row(raw, scale)?;
    g.add_row(scaled, shift)
}

pub fn total_loss(g: &mut Graph, out: &HeadOutput, gt: &GtTarget, w: &LossWeights) -> Result<LossTerms> {
    if out.grid != gt.grid {
        return Err(Error::shape("total_loss", format!("head grid {:?} vs target grid {:?}", out.grid, gt.grid)));
    }
    let cls = g.focal_loss(out.cls, &gt.heatmap, w.focal_alpha, w.focal_beta, FOCAL_EPS)?;
    let pred = box_at_cell(g, out, gt.center_cell())?;
    let target = gt.bbox.to_array();
    let giou = g.giou_loss(pred, target)?;
    let l1 = g.l1_loss(pred, &target)?;
    let a = g.scale(giou, w.lambda_iou);
    let b = g.scale(l1, w.lambda_l1);
    let s = g.add(cls, a)?;
    let total = g.add(s, b)?;
    Ok(LossTerms { total, cls, giou, l1 })
}

/// Same objective evaluated directly on maps, without a tape.
pub fn total_loss_value(maps: &HeadMaps, gt: &GtTarget, w: &LossWeights) -> Result<f64> {
    let cls = focal_value(&maps.cls, &gt.heatmap, w.focal_alpha, w.focal_beta, FOCAL_EPS)?;
    let cell = gt.center_cell();
    let (gh, gw) = maps.grid;
    let (i, j) = (cell / gw, cell % gw);
    let (ox, oy) = maps.offset_at(cell);
    let (sw, sh) = maps.size_at(cell);
    let pred = [(j as f32 + ox) / gw as f32, (i as f32 + oy) / gh as f32, sw, sh];
    let target = gt.bbox.to_array();
    let (giou_loss, _) = giou_loss_and_grad(pred, target);
    let l1 = pred.iter().zip(&target).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / 4.0;
    Ok(cls + w.lambda_iou as f64 * giou_loss + w.lambda_l1 as f64 * l1)
}
