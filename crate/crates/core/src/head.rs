//! Fully convolutional prediction head and box decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Normalised `(cx, cy, w, h)` box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxN {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BoxN {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Result<Self> {
        let b = BoxN { cx, cy, w, h };
        if !b.is_valid() {
            return Err(Error::arg("box", format!("{b:?} outside the unit square convention")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        unit(self.cx) && unit(self.cy) && self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        let (cx, cy, w, h) = (self.cx as f64, self.cy as f64, self.w as f64, self.h as f64);
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    pub fn iou(&self, other: &BoxN) -> f64 {
        let (a, b) = (self.corners(), other.corners());
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clamp into the valid range; sizes are kept strictly positive.
    pub fn clamped(self) -> BoxN {
        BoxN {
            cx: self.cx.clamp(0.0, 1.0),
            cy: self.cy.clamp(0.0, 1.0),
            w: self.w.clamp(1e-6, 1.0),
            h: self.h.clamp(1e-6, 1.0),
        }
    }
}

/// Head outputs as plain maps over an `h×w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub grid: (usize, usize),
    /// `[h×w]`, row-major, in `[0, 1]`.
    pub cls: Vec<f32>,
    /// `[2×h×w]`: x offsets then y offsets.
    pub offset: Vec<f32>,
    /// `[2×h×w]`: widths then heights.
    pub size: Vec<f32>,
}

impl HeadMaps {
    pub fn new(grid: (usize, usize), cls: Vec<f32>, offset: Vec<f32>, size: Vec<f32>) -> Result<Self> {
        let n = grid.0 * grid.1;
        if cls.len() != n || offset.len() != 2 * n || size.len() != 2 * n {
            return Err(Error::shape("head_maps", format!("map sizes do not match {}×{} grid", grid.0, grid.1)));
        }
        Ok(HeadMaps { grid, cls, offset, size })
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn offset_at(&self, cell: usize) -> (f32, f32) {
        (self.offset[cell], self.offset[self.cells() + cell])
    }

    pub fn size_at(&self, cell: usize) -> (f32, f32) {
        (self.size[cell], self.size[self.cells() + cell])
    }

    /// Box read at a given cell.
    pub fn box_at(&self, cell: usize) -> BoxN {
        let (gh, gw) = self.grid;
        let (i, j) = (cell / gw, cell % gw);
        let (ox, oy) = self.offset_at(cell);
        let (w, h) = self.size_at(cell);
        BoxN { cx: (j as f32 + ox) / gw as f32, cy: (i as f32 + oy) / gh as f32, w, h }.clamped()
    }
}

/// Peak of the classification map (first in row-major order on ties) and
/// the box read there.
pub fn decode(maps: &HeadMaps) -> (BoxN, f32) {
    let mut best = 0;
    for (i, &v) in maps.cls.iter().enumerate() {
        if v > maps.cls[best] {
            best = i;
        }
    }
    (maps.box_at(best), maps.cls[best])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Conv-norm-ReLU stages per branch.
    pub layers: usize,
    pub dim: usize,
    pub hidden: usize,
    pub grid: (usize, usize),
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { layers: 3, dim: 64, hidden: 64, grid: (14, 14) }
    }
}

/// 3×3 convolution over a token grid, realised as unfold + matmul.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub lin: Linear,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Conv3x3 { lin: Linear::new(store, name, 9 * cin, cout, 2f32.sqrt(), rng) }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, grid: (usize, usize)) -> Result<Var> {
        let cols = g.im2col3x3(x, grid.0, grid.1)?;
        self.lin.forward(g, p, cols)
    }
}

/// Per-channel normalisation standing in for batch norm. Training
/// normalises each channel over the spatial grid of the current sample and
/// reports those statistics so the running averages can be updated;
/// evaluation uses the frozen running statistics.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const NORM_EPS: f32 = 1e-5;
pub const NORM_MOMENTUM: f32 = 0.1;

/// Observed per-channel statistics, to be folded into running averages.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
pub enum NormMode<'a> {
    Train(&'a mut Vec<StatUpdate>),
    Eval,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        ChannelNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled([dim], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([dim]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::filled([dim], 1.0), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, mode: &mut NormMode<'_>) -> Result<Var> {
        let normed = match mode {
            NormMode::Train(updates) => {
                let xt = g.value(x);
                let (n, c) = (xt.rows(), xt.cols());
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for r in xt.data().chunks(c) {
                    r.iter().zip(&mut mean).for_each(|(v, m)| *m += *v as f64);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for r in xt.data().chunks(c) {
                    r.iter().zip(&mean).zip(&mut var).for_each(|((v, m), s)| *s += (*v as f64 - m).powi(2));
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                updates.push(StatUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean: mean.iter().map(|&v| v as f32).collect(),
                    var: var.iter().map(|&v| v as f32).collect(),
                });
                let t = g.transpose(x)?;
                let t = g.normalize_rows(t, NORM_EPS);
                g.transpose(t)?
            }
            NormMode::Eval => {
                let mean = p.get(self.running_mean).data();
                let var = p.get(self.running_var).data();
                let scale: Vec<f32> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                let shift: Vec<f32> = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
                let c = scale.len();
                let s = g.constant(Tensor::new([c], scale)?);
                let b = g.constant(Tensor::new([c], shift)?);
                let y = g.mul_row(x, s)?;
                g.add_row(y, b)?
            }
        };
        let gamma = g.param(p, self.gamma);
        let beta = g.param(p, self.beta);
        let y = g.mul_row(normed, gamma)?;
        g.add_row(y, beta)
    }
}

/// Fold observed statistics into the running averages.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        for (r, v) in store.get_mut(u.mean_id).data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v;
        }
        for (r, v) in store.get_mut(u.var_id).data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub convs: Vec<(Conv3x3, ChannelNorm)>,
    pub out: Linear,
}

impl Branch {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &HeadConfig, out: usize, rng: &mut R) -> Self {
        let convs = (0..cfg.layers)
            .map(|l| {
                let cin = if l == 0 { cfg.dim } else { cfg.hidden };
                (
                    Conv3x3::new(store, &format!("{name}.conv{l}"), cin, cfg.hidden, rng),
                    ChannelNorm::new(store, &format!("{name}.norm{l}"), cfg.hidden),
                )
            })
            .collect();
        let last = if cfg.layers == 0 { cfg.dim } else { cfg.hidden };
        Branch { convs, out: Linear::new(store, &format!("{name}.out"), last, out, 1.0, rng) }
    }

    fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, grid: (usize, usize), mode: &mut NormMode<'_>) -> Result<Var> {
        let mut h = x;
        for (conv, norm) in &self.convs {
            h = conv.forward(g, p, h, grid)?;
            h = norm.forward(g, p, h, mode)?;
            h = g.relu(h);
        }
        let o = self.out.forward(g, p, h)?;
        Ok(g.sigmoid(o))
    }
}

/// Head outputs still on the tape: `cls [hw×1]`, `offset [hw×2]`, `size [hw×2]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub cls: Var,
    pub offset: Var,
    pub size: Var,
    pub grid: (usize, usize),
}

impl HeadOutput {
    pub fn maps(&self, g: &Graph) -> HeadMaps {
        let n = self.grid.0 * self.grid.1;
        let channel_major = |t: &Tensor| {
            let mut out = vec![0.0; 2 * n];
            for i in 0..n {
                out[i] = t.at(i, 0);
                out[n + i] = t.at(i, 1);
            }
            out
        };
        HeadMaps {
            grid: self.grid,
            cls: g.value(self.cls).data().to_vec(),
            offset: channel_major(g.value(self.offset)),
            size: channel_major(g.value(self.size)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub cfg: HeadConfig,
    pub cls: Branch,
    pub offset: Branch,
    pub size: Branch,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: HeadConfig, rng: &mut R) -> Self {
        let cls = Branch::new(store, &format!("{name}.cls"), &cfg, 1, rng);
        let offset = Branch::new(store, &format!("{name}.offset"), &cfg, 2, rng);
        let size = Branch::new(store, &format!("{name}.size"), &cfg, 2, rng);
        // Start with a low-confidence classification prior.
        store.get_mut(cls.out.b).data_mut().fill(-2.19);
        Head { cfg, cls, offset, size }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, features: Var, mode: &mut NormMode<'_>) -> Result<HeadOutput> {
        let (gh, gw) = self.cfg.grid;
        let n = g.value(features).rows();
        if n != gh * gw {
            return Err(Error::shape("head", format!("{n} tokens vs {gh}×{gw} grid")));
        }
        Ok(HeadOutput {
            cls: self.cls.forward(g, p, features, self.cfg.grid, mode)?,
            offset: self.offset.forward(g, p, features, self.cfg.grid, mode)?,
            size: self.size.forward(g, p, features, self.cfg.grid, mode)?,
            grid: self.cfg.grid,
        })
    }

    pub fn zero_outputs(&self, store: &mut ParamStore) {
        for b in [&self.cls, &self.offset, &self.size] {
            b.out.zero(store);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn maps_with_peak(grid: (usize, usize), cell: usize) -> HeadMaps {
        let n = grid.0 * grid.1;
        let mut cls = vec![0.1; n];
        cls[cell] = 0.9;
        HeadMaps::new(grid, cls, vec![0.0; 2 * n], vec![0.25; 2 * n]).unwrap()
    }

    #[test]
    fn decode_single_peak() {
        let m = maps_with_peak((14, 14), 7 * 14 + 7);
        let (b, s) = decode(&m);
        assert_eq!(b, BoxN { cx: 0.5, cy: 0.5, w: 0.25, h: 0.25 });
        assert_eq!(s, 0.9);
    }

    #[test]
    fn decode_uniform_takes_first_cell() {
        let m = HeadMaps::new((4, 4), vec![0.5; 16], vec![0.0; 32], vec![0.5; 32]).unwrap();
        let (b, _) = decode(&m);
        assert_eq!((b.cx, b.cy), (0.0, 0.0));
    }

    #[test]
    fn half_offsets_give_cell_midpoints() {
        let mut m = maps_with_peak((4, 4), 6);
        m.offset.iter_mut().for_each(|v| *v = 0.5);
        let (b, _) = decode(&m);
        assert_eq!((b.cx, b.cy), (2.5 / 4.0, 1.5 / 4.0));
    }

    #[test]
    fn head_shapes_and_zero_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = HeadConfig { layers: 1, dim: 8, hidden: 8, grid: (14, 14) };
        let head = Head::new(&mut store, "head", cfg, &mut rng);
        head.zero_outputs(&mut store);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([196, 8], 1.0, &mut rng));
        let out = head.forward(&mut g, &store, x, &mut NormMode::Eval).unwrap();
        let maps = out.maps(&g);
        assert_eq!((maps.cls.len(), maps.offset.len(), maps.size.len()), (196, 392, 392));
        assert!(maps.cls.iter().all(|&v| v == 0.5));
        let bad = g.constant(Tensor::randn([195, 8], 1.0, &mut rng));
        assert!(head.forward(&mut g, &store, bad, &mut NormMode::Eval).is_err());
    }

    #[test]
    fn eval_norm_with_unit_stats_is_affine() {
        let mut store = ParamStore::new();
        let norm = ChannelNorm::new(&mut store, "n", 3);
        store.get_mut(norm.gamma).data_mut().copy_from_slice(&[2.0, 1.0, 0.5]);
        store.get_mut(norm.beta).data_mut().copy_from_slice(&[0.0, 1.0, -1.0]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = norm.forward(&mut g, &store, xv, &mut NormMode::Eval).unwrap();
        let s = 1.0 / (1.0 + NORM_EPS).sqrt();
        let want = [2.0 * s, 2.0 * s + 1.0, 1.5 * s - 1.0, -2.0 * s, 1.0, 2.0 * s - 1.0];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn box_validation() {
        assert!(BoxN::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BoxN::new(1.1, 0.5, 0.1, 0.1).is_err());
        assert!(BoxN::new(0.5, 0.5, 1.0, 1.0).is_ok());
    }
}
