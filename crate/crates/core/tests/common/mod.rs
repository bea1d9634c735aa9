//! Independent oracles and the finite-difference gradient checker shared by
//! the integration tests.

#![allow(dead_code)]

use etctrack::autodiff::{Graph, Var};
use etctrack::head::BoxN;
use etctrack::params::{ParamId, ParamStore};
use etctrack::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exact `floor(r·n)` via the binary expansion of `r` (no float product).
pub fn floor_rate_oracle(r: f64, n: usize) -> u64 {
    assert!(r > 0.0 && r < 1.0);
    let bits = r.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let (mantissa, e) = if exp == 0 {
        (bits & ((1 << 52) - 1), -1074)
    } else {
        ((bits & ((1 << 52) - 1)) | (1 << 52), exp - 1075)
    };
    // r = mantissa · 2^e with e < 0 for r < 1.
    let prod = mantissa as u128 * n as u128;
    let shift = (-e) as u32;
    if shift >= 128 {
        0
    } else {
        (prod >> shift) as u64
    }
}

/// Partition by exhaustive ranking: sort (−score, index) and take the top `k`.
pub fn partition_oracle(scores: &[f32], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let mut a = order[..k].to_vec();
    let mut b = order[k..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Exhaustive cosine argmax over all targets. Exact ties (to 1e-12) go to
/// the lowest original index; zero-norm targets lose to any nonzero target;
/// with no nonzero target the lowest index wins.
pub fn merge_oracle(tokens: &[Vec<f32>], a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let mut targets = a.to_vec();
    targets.sort_unstable();
    let mut out = Vec::new();
    for &s in b {
        let sn = norm(&tokens[s]);
        let mut cands: Vec<(f64, usize)> = Vec::new();
        for &t in &targets {
            let tn = norm(&tokens[t]);
            if tn == 0.0 {
                continue;
            }
            let dot: f64 = tokens[s].iter().zip(&tokens[t]).map(|(&x, &y)| x as f64 * y as f64).sum();
            let cos = if sn == 0.0 { 0.0 } else { dot / (sn * tn) };
            cands.push((cos, t));
        }
        let best = if cands.is_empty() {
            targets[0]
        } else {
            let top = cands.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
            cands.iter().filter(|c| (top - c.0).abs() <= 1e-12).map(|c| c.1).min().unwrap()
        };
        out.push((s, best));
    }
    out.sort_unstable();
    out
}

/// GIoU by counting `res`-spaced sample points over the unit square.
pub fn giou_raster(a: &BoxN, b: &BoxN, res: f64) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    let hull = [ca[0].min(cb[0]), ca[1].min(cb[1]), ca[2].max(cb[2]), ca[3].max(cb[3])];
    let n = (1.0 / res).round() as usize;
    let inside = |c: &[f64; 4], x: f64, y: f64| x >= c[0] && x < c[2] && y >= c[1] && y < c[3];
    let (mut na, mut nb, mut ni, mut nh) = (0u64, 0u64, 0u64, 0u64);
    for iy in 0..n {
        let y = (iy as f64 + 0.5) * res;
        for ix in 0..n {
            let x = (ix as f64 + 0.5) * res;
            let (ia, ib) = (inside(&ca, x, y), inside(&cb, x, y));
            na += ia as u64;
            nb += ib as u64;
            ni += (ia && ib) as u64;
            nh += inside(&hull, x, y) as u64;
        }
    }
    let union = (na + nb - ni) as f64;
    ni as f64 / union - (nh as f64 - union) / nh as f64
}

/// Norm-wise relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` of a whole
/// gradient vector.
pub fn grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = l2(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = l2(&mut analytic.iter().copied()).max(l2(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Largest per-element error, each entry judged against
/// `max(|a|, |n|, 1% of the largest entry)`. Diagnostic only: in f32 it is
/// dominated by rounding on the smallest entries.
pub fn grad_error_elementwise(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Scalar probe of a graph output: `Σ w ⊙ y` with fixed weights.
fn reduce(g: &mut Graph, y: Var, weights: &[f32]) -> Var {
    if g.value(y).numel() == 1 {
        y
    } else {
        g.weighted_sum(y, weights).unwrap()
    }
}

pub struct GradCheck {
    pub step: f32,
    /// Parameter entries probed per instance (all if 0).
    pub param_samples: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-3, param_samples: 24 }
    }
}

impl GradCheck {
    /// `(norm-wise, element-wise)` error between the tape gradient and
    /// central differences over every input element and a sample of
    /// trainable parameter entries.
    pub fn run<F>(&self, inputs: &[Tensor], store: &ParamStore, seed: u64, f: F) -> (f64, f64)
    where
        F: Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
    {
        let mut r = rng(seed ^ 0xF00D);
        // The probe is accumulated in f64 so rounding of the sum does not
        // swamp the finite difference.
        let eval = |inputs: &[Tensor], store: &ParamStore, weights: &[f32]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = f(&mut g, store, &vars);
            let out = g.value(y).data();
            if out.len() == 1 {
                out[0] as f64
            } else {
                out.iter().zip(weights).map(|(&v, &w)| v as f64 * w as f64).sum()
            }
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone().with_requires_grad(true))).collect();
        let y = f(&mut g, store, &vars);
        let weights: Vec<f32> = (0..g.value(y).numel()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s = reduce(&mut g, y, &weights);
        let grads = g.backward(s).unwrap();

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (idx, v) in vars.iter().enumerate() {
            let ga = grads.get(&g, *v).unwrap_or_else(|| Tensor::zeros(inputs[idx].shape().to_vec()));
            for k in 0..inputs[idx].numel() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let x = inputs[idx].data()[k];
                plus[idx].data_mut()[k] = x + self.step;
                minus[idx].data_mut()[k] = x - self.step;
                let dx = (plus[idx].data()[k] - minus[idx].data()[k]) as f64;
                numeric.push((eval(&plus, store, &weights) - eval(&minus, store, &weights)) / dx);
                analytic.push(ga.data()[k] as f64);
            }
        }

        let pgrads = grads.params(&g);
        let trainable: Vec<(ParamId, &Tensor)> =
            pgrads.iter().filter(|(id, _)| store.entry(*id).trainable).map(|(id, t)| (*id, t)).collect();
        let total: usize = trainable.iter().map(|(_, t)| t.numel()).sum();
        if total > 0 {
            let picks: Vec<usize> = if self.param_samples == 0 || self.param_samples >= total {
                (0..total).collect()
            } else {
                (0..self.param_samples).map(|_| r.gen_range(0..total)).collect()
            };
            for flat in picks {
                let (mut pi, mut k) = (0, flat);
                while k >= trainable[pi].1.numel() {
                    k -= trainable[pi].1.numel();
                    pi += 1;
                }
                let (id, ga) = trainable[pi];
                let mut plus = store.clone();
                let mut minus = store.clone();
                let x = store.get(id).data()[k];
                plus.get_mut(id).data_mut()[k] = x + self.step;
                minus.get_mut(id).data_mut()[k] = x - self.step;
                let dx = (plus.get(id).data()[k] - minus.get(id).data()[k]) as f64;
                numeric.push((eval(inputs, &plus, &weights) - eval(inputs, &minus, &weights)) / dx);
                analytic.push(ga.data()[k] as f64);
            }
        }
        (grad_error(&analytic, &numeric), grad_error_elementwise(&analytic, &numeric))
    }
}

/// Gaussian tensor with entries pushed at least `margin` away from zero.
pub fn randn_away_from_zero(shape: &[usize], margin: f32, r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape.to_vec(), 1.0, r);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin } * 2.0;
        }
    }
    t
}

/// Random valid box fully inside the unit square.
pub fn random_box(r: &mut ChaCha8Rng, min: f32, max: f32) -> BoxN {
    let w = r.gen_range(min..max);
    let h = r.gen_range(min..max);
    let cx = r.gen_range(w / 2.0..1.0 - w / 2.0);
    let cy = r.gen_range(h / 2.0..1.0 - h / 2.0);
    BoxN { cx, cy, w, h }
}
