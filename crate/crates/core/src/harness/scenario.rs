//! Seeded synthetic sequences: a textured square moving on a straight line
//! over a flat background, with optional static distractors and noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::BoxN;
use crate::tensor::Tensor;
use crate::tokenizer::CHANNELS;

/// Ranges from which random scenarios are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub frame_size: usize,
    pub frames: usize,
    pub min_size: f32,
    pub max_size: f32,
    /// Largest start-to-end displacement per axis.
    pub max_travel: f32,
    pub distractors: usize,
    pub noise: f32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            frame_size: 128,
            frames: 30,
            min_size: 0.12,
            max_size: 0.22,
            max_travel: 0.4,
            distractors: 2,
            noise: 0.05,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 8 || self.frames == 0 {
            return Err(Error::Config("scenario needs frame_size ≥ 8 and at least one frame".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size < 0.5) {
            return Err(Error::Config("scenario sizes must satisfy 0 < min_size ≤ max_size < 0.5".into()));
        }
        if !(self.max_travel >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("max_travel and noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One fully specified sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub frames: usize,
    pub frame_size: usize,
    /// Target centre at the first and last frame.
    pub start: [f32; 2],
    pub end: [f32; 2],
    /// Normalised `(w, h)` of the target.
    pub size: [f32; 2],
    pub distractors: usize,
    pub noise: f32,
}

impl ScenarioSpec {
    /// Rejects trajectories whose box leaves the unit square. The path is
    /// linear, so checking both endpoints covers every frame.
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frame_size < 8 {
            return Err(Error::arg("scenario", "needs at least one frame of side ≥ 8"));
        }
        if !(self.size[0] > 0.0 && self.size[1] > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::arg("scenario", "target size must be positive and noise nonnegative"));
        }
        for c in [self.start, self.end] {
            for a in 0..2 {
                let half = self.size[a] / 2.0;
                if !(c[a] - half >= 0.0 && c[a] + half <= 1.0) {
                    return Err(Error::arg("scenario", format!("box at {c:?} with size {:?} leaves the frame", self.size)));
                }
            }
        }
        Ok(())
    }

    pub fn random(seed: u64, cfg: &ScenarioConfig) -> ScenarioSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE7_A810);
        let size = [rng.gen_range(cfg.min_size..=cfg.max_size), rng.gen_range(cfg.min_size..=cfg.max_size)];
        let mut start = [0.0; 2];
        let mut end = [0.0; 2];
        for a in 0..2 {
            let (lo, hi) = (size[a] / 2.0 + 0.02, 1.0 - size[a] / 2.0 - 0.02);
            start[a] = rng.gen_range(lo..hi);
            let travel = rng.gen_range(-cfg.max_travel..=cfg.max_travel);
            end[a] = (start[a] + travel).clamp(lo, hi);
        }
        ScenarioSpec {
            seed,
            frames: cfg.frames,
            frame_size: cfg.frame_size,
            start,
            end,
            size,
            distractors: cfg.distractors,
            noise: cfg.noise,
        }
    }

    /// Ground truth at frame `t`, linearly interpolated.
    pub fn box_at(&self, t: usize) -> BoxN {
        let s = if self.frames > 1 { t as f32 / (self.frames - 1) as f32 } else { 0.0 };
        let lerp = |a: usize| self.start[a] + (self.end[a] - self.start[a]) * s;
        BoxN { cx: lerp(0), cy: lerp(1), w: self.size[0], h: self.size[1] }
    }
}

/// Per-scenario colours and distractor placement.
#[derive(Clone, Debug, PartialEq)]
struct Appearance {
    background: [f32; 3],
    target: [f32; 3],
    core: [f32; 3],
    distractors: Vec<([f32; 4], [f32; 3])>,
}

impl Appearance {
    fn new(spec: &ScenarioSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xA11E_A2A0);
        let background = [0.0; 3].map(|_: f32| rng.gen_range(0.05..0.3));
        let target = bright_colour(&mut rng);
        let core = target.map(|c| 1.0 - c);
        let distractors = (0..spec.distractors)
            .map(|_| {
                let w = rng.gen_range(0.06..0.14f32);
                let h = rng.gen_range(0.06..0.14f32);
                let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
                let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
                ([cx, cy, w, h], bright_colour(&mut rng))
            })
            .collect();
        Appearance { background, target, core, distractors }
    }
}

fn bright_colour<R: Rng>(rng: &mut R) -> [f32; 3] {
    let mut c = [0.0; 3].map(|_: f32| rng.gen_range(0.2..0.7));
    c[rng.gen_range(0..3)] = rng.gen_range(0.85..1.0);
    c
}

/// Fraction of pixel `(x, y)` covered by the box with pixel-space corners.
fn coverage(x: usize, y: usize, c: [f32; 4]) -> f32 {
    let ox = (c[2].min(x as f32 + 1.0) - c[0].max(x as f32)).max(0.0);
    let oy = (c[3].min(y as f32 + 1.0) - c[1].max(y as f32)).max(0.0);
    ox * oy
}

fn paint(img: &mut [f32], side: usize, b: [f32; 4], colour: [f32; 3]) {
    let s = side as f32;
    let c = [(b[0] - b[2] / 2.0) * s, (b[1] - b[3] / 2.0) * s, (b[0] + b[2] / 2.0) * s, (b[1] + b[3] / 2.0) * s];
    let x0 = c[0].floor().max(0.0) as usize;
    let y0 = c[1].floor().max(0.0) as usize;
    let x1 = (c[2].ceil() as usize).min(side);
    let y1 = (c[3].ceil() as usize).min(side);
    for y in y0..y1 {
        for x in x0..x1 {
            let a = coverage(x, y, c);
            if a <= 0.0 {
                continue;
            }
            for (ch, &col) in colour.iter().enumerate() {
                let p = &mut img[ch * side * side + y * side + x];
                *p = (1.0 - a) * *p + a * col;
            }
        }
    }
}

/// Render frame `t`. Frames are independent of one another, so any subset
/// can be rendered on its own with identical pixels.
pub fn render_frame(spec: &ScenarioSpec, t: usize) -> Result<Tensor> {
    spec.validate()?;
    if t >= spec.frames {
        return Err(Error::arg("frame", format!("index {t} beyond {} frames", spec.frames)));
    }
    Ok(render_with(spec, &Appearance::new(spec), t))
}

fn render_with(spec: &ScenarioSpec, look: &Appearance, t: usize) -> Tensor {
    let side = spec.frame_size;
    let mut img = vec![0.0f32; CHANNELS * side * side];
    for (ch, plane) in img.chunks_mut(side * side).enumerate() {
        plane.fill(look.background[ch]);
    }
    for (b, col) in &look.distractors {
        paint(&mut img, side, *b, *col);
    }
    let gt = spec.box_at(t);
    paint(&mut img, side, gt.to_array(), look.target);
    paint(&mut img, side, [gt.cx, gt.cy, gt.w * 0.4, gt.h * 0.4], look.core);
    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ t as u64);
        let normal = Normal::new(0.0, spec.noise).expect("noise std is validated nonnegative");
        img.iter_mut().for_each(|p| *p += normal.sample(&mut rng));
    }
    Tensor::new([CHANNELS, side, side], img).expect("frame buffer matches its shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScenario {
    pub spec: ScenarioSpec,
    pub frames: Vec<Tensor>,
    pub boxes: Vec<BoxN>,
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<SyntheticScenario> {
    spec.validate()?;
    let look = Appearance::new(spec);
    let frames = (0..spec.frames).map(|t| render_with(spec, &look, t)).collect();
    let boxes = (0..spec.frames).map(|t| spec.box_at(t)).collect();
    Ok(SyntheticScenario { spec: spec.clone(), frames, boxes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ScenarioSpec {
        ScenarioSpec {
            seed: 3,
            frames: 30,
            frame_size: 64,
            start: [0.2, 0.2],
            end: [0.8, 0.8],
            size: [0.2, 0.2],
            distractors: 1,
            noise: 0.05,
        }
    }

    #[test]
    fn linear_centres() {
        let s = spec();
        let b = s.box_at(29);
        assert!((b.cx - 0.8).abs() < 1e-6 && (b.cy - 0.8).abs() < 1e-6);
        let mid = s.box_at(10);
        assert!((mid.cx - (0.2 + 0.6 * 10.0 / 29.0)).abs() < 1e-6);
    }

    #[test]
    fn static_noise_free_frames_identical() {
        let s = ScenarioSpec { end: [0.2, 0.2], noise: 0.0, ..spec() };
        let sc = generate_scenario(&s).unwrap();
        assert!(sc.frames.iter().all(|f| *f == sc.frames[0]));
    }

    #[test]
    fn deterministic_and_random_access() {
        let a = generate_scenario(&spec()).unwrap();
        let b = generate_scenario(&spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(render_frame(&spec(), 7).unwrap(), a.frames[7]);
    }

    #[test]
    fn leaving_frame_rejected() {
        let s = ScenarioSpec { end: [0.95, 0.5], ..spec() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn random_specs_are_valid() {
        let cfg = ScenarioConfig::default();
        for seed in 0..200 {
            ScenarioSpec::random(seed, &cfg).validate().unwrap();
        }
    }
}
