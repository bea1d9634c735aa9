//! Toy training loop and held-out evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::crop::{crop_resize, CropWindow, CROP_FACTOR};
use crate::harness::scenario::{generate_scenario, render_frame, ScenarioSpec};
use crate::harness::track::{template_crop, track_sequence, ModelTracker, TrackResult};
use crate::head::{apply_stat_updates, NormMode};
use crate::losses::{total_loss, GtTarget};
use crate::model::Etctrack;
use crate::optim::Adam;
use crate::tensor::Tensor;

const TRAIN_SALT: u64 = 0x7EA1_0000;
const EVAL_SALT: u64 = 0xE7A1_0000_0000;

/// One training sample: templates plus jittered search crops with targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub templates: Vec<Tensor>,
    pub searches: Vec<(Tensor, GtTarget)>,
}

/// Templates are the first frame plus frames drawn uniformly from those
/// before the earliest search frame, in frame order.
pub fn sample(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let m = &cfg.model;
    let spec = ScenarioSpec::random(rng.gen(), &cfg.scenario);
    let n = spec.frames;
    let search_frames: Vec<usize> = (0..cfg.train.search_per_step).map(|_| rng.gen_range(1..n)).collect();
    let horizon = *search_frames.iter().min().expect("at least one search frame");
    let mut tmpl_frames = vec![0];
    let mut extra: Vec<usize> = (1..m.templates).map(|_| rng.gen_range(0..horizon)).collect();
    extra.sort_unstable();
    tmpl_frames.extend(extra);

    let templates = tmpl_frames
        .iter()
        .map(|&t| Ok(template_crop(&render_frame(&spec, t)?, &spec.box_at(t), m.template_size)))
        .collect::<Result<Vec<_>>>()?;
    let dims = (spec.frame_size, spec.frame_size);
    let grid = m.search_grid();
    let mut searches = Vec::with_capacity(search_frames.len());
    for &t in &search_frames {
        let gt = spec.box_at(t);
        let scale = (gt.w * gt.h).sqrt();
        let shift = cfg.train.jitter_shift * scale;
        let jittered = crate::head::BoxN {
            cx: gt.cx + rng.gen_range(-shift..=shift),
            cy: gt.cy + rng.gen_range(-shift..=shift),
            ..gt
        };
        let s = cfg.train.jitter_scale;
        let factor = CROP_FACTOR * rng.gen_range(-s..=s).exp();
        let window = CropWindow::around(&jittered, dims, factor);
        let crop = crop_resize(&render_frame(&spec, t)?, &window, m.search_size);
        let target = GtTarget::new(window.box_to_crop(&gt, dims).clamped(), grid)?;
        searches.push((crop, target));
    }
    Ok(Sample { templates, searches })
}

/// Linear warm-up then cosine decay to a tenth of the base rate.
pub fn learning_rate(cfg: &RunConfig, step: usize) -> f32 {
    let base = cfg.train.adam.lr;
    let warm = cfg.train.warmup;
    if step < warm {
        return base * (step + 1) as f32 / warm as f32;
    }
    let span = cfg.train.steps.saturating_sub(warm).max(1);
    let p = ((step - warm) as f32 / span as f32).min(1.0);
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * p).cos()))
}

/// Run `cfg.train.steps` optimisation steps; returns the per-step loss.
pub fn train_toy(model: &mut Etctrack, cfg: &RunConfig, mut on_step: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_SALT);
    let mut opt = Adam::new(cfg.train.adam);
    let mut losses = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let batch = sample(cfg, &mut rng)?;
        let mut g = Graph::new();
        let mut stats = Vec::new();
        let comp = model.compress_templates(&mut g, &batch.templates, cfg.keep_rate)?;
        let mut total = None;
        for (search, target) in &batch.searches {
            let out = model.search_forward(&mut g, &comp, search, &mut NormMode::Train(&mut stats))?;
            let terms = total_loss(&mut g, &out, target, &cfg.train.loss)?;
            total = Some(match total {
                None => terms.total,
                Some(acc) => g.add(acc, terms.total)?,
            });
        }
        let total = total.expect("at least one search crop");
        let loss = g.scale(total, 1.0 / batch.searches.len() as f32);
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = g.backward(loss)?.params(&g);
        opt.step(&mut model.store, &grads, learning_rate(cfg, step));
        apply_stat_updates(&mut model.store, &stats);
        losses.push(value);
        on_step(step, value);
    }
    Ok(losses)
}

/// Held-out scenario `i`, disjoint from the training stream by seed salt.
pub fn eval_spec(cfg: &RunConfig, i: usize) -> ScenarioSpec {
    ScenarioSpec::random(cfg.seed ^ EVAL_SALT ^ (i as u64).wrapping_mul(0x9E37_79B9), &cfg.scenario)
}

/// Track each held-out scenario in order.
pub fn evaluate(model: &Etctrack, cfg: &RunConfig) -> Result<Vec<TrackResult>> {
    let tracker = ModelTracker { model, keep_rate: cfg.keep_rate };
    (0..cfg.eval_scenarios)
        .map(|i| track_sequence(&tracker, &generate_scenario(&eval_spec(cfg, i))?, cfg.tau))
        .collect()
}

/// Mean over early and late windows of `frac` of the curve.
pub fn loss_windows(losses: &[f64], frac: f64) -> (f64, f64) {
    let k = ((losses.len() as f64 * frac).round() as usize).max(1).min(losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..k]), mean(&losses[losses.len() - k..]))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig { tcm_depth: 1, num_hiblocks: 1, inner_blocks: 1, head_layers: 1, ..ModelConfig::toy() };
        cfg.scenario.frames = 6;
        cfg.train.steps = 3;
        cfg
    }

    #[test]
    fn zero_lr_keeps_loss_constant_for_fixed_batch() {
        let mut cfg = tiny();
        cfg.train.adam.lr = 0.0;
        let mut model = Etctrack::new(cfg.model.clone(), 1).unwrap();
        let before = model.store.clone();
        train_toy(&mut model, &cfg, |_, _| {}).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            if a.trainable {
                assert_eq!(a.value, b.value);
            }
        }
    }

    #[test]
    fn sample_targets_have_peak() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample(&cfg, &mut rng).unwrap();
        assert_eq!(s.templates.len(), 5);
        assert_eq!(s.searches.len(), 2);
        for (img, gt) in &s.searches {
            assert_eq!(img.shape(), &[3, 64, 64]);
            assert_eq!(gt.heatmap[gt.center_cell()], 1.0);
        }
    }

    #[test]
    fn windows() {
        let l: Vec<f64> = (0..10).map(|v| v as f64).collect();
        assert_eq!(loss_windows(&l, 0.1), (0.0, 9.0));
    }
}
