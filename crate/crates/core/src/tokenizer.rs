//! Patch tokenisation of frames and assembly of multi-frame template stacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Frame geometry. Height and width must be multiples of the patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl FrameSpec {
    pub fn square(side: usize, patch: usize) -> Self {
        FrameSpec { height: side, width: side, patch }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::arg("frame", format!("degenerate geometry {self:?}")));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::arg(
                "frame",
                format!("{}×{} not divisible by patch {}", self.height, self.width, self.patch),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Tokens per frame, `(H/P)·(W/P)`.
    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }
}

/// Rearrange a `[3×H×W]` frame into `[L × 3P²]` patch rows (row-major patch
/// order; channel, then patch row, then patch column within a row).
pub fn patchify(frame: &Tensor, spec: &FrameSpec) -> Result<Tensor> {
    spec.validate()?;
    if frame.shape() != [CHANNELS, spec.height, spec.width] {
        return Err(Error::shape(
            "patchify",
            format!("frame {:?} vs spec {}×{}", frame.shape(), spec.height, spec.width),
        ));
    }
    let (gh, gw) = spec.grid();
    let p = spec.patch;
    let src = frame.data();
    let mut out = Vec::with_capacity(gh * gw * spec.patch_dim());
    for pi in 0..gh {
        for pj in 0..gw {
            for c in 0..CHANNELS {
                for dy in 0..p {
                    let y = pi * p + dy;
                    let base = c * spec.height * spec.width + y * spec.width + pj * p;
                    out.extend_from_slice(&src[base..base + p]);
                }
            }
        }
    }
    Tensor::new([gh * gw, spec.patch_dim()], out)
}

/// Linear patch projection plus a learnable per-position embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub spec: FrameSpec,
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: FrameSpec, dim: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let pos = store.add(format!("{name}.pos"), Tensor::randn([spec.tokens(), dim], 0.02, rng), true);
        Ok(PatchEmbed { spec, pos })
    }
}

/// `tokens = patchify(frame) @ W + b + pos`, shape `[L×C]`.
pub fn embed_frame(g: &mut Graph, p: &ParamStore, frame: &Tensor, proj: &Linear, embed: &PatchEmbed) -> Result<Var> {
    let patches = patchify(frame, &embed.spec)?;
    if patches.cols() != proj.in_dim {
        return Err(Error::shape(
            "embed_frame",
            format!("patch dim {} vs projection input {}", patches.cols(), proj.in_dim),
        ));
    }
    let x = g.constant(patches);
    let t = proj.forward(g, p, x)?;
    let pos = g.param(p, embed.pos);
    g.add(t, pos)
}

/// Learnable per-frame offset `E_temp`, stored as `[T×1×C]`.
#[derive(Clone, Debug)]
pub struct TemporalEmbedding {
    pub table: ParamId,
    pub frames: usize,
    pub dim: usize,
}

impl TemporalEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, frames: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn([frames, 1, dim], 0.02, rng), true);
        TemporalEmbedding { table, frames, dim }
    }
}

/// Template tokens of `T` frames flattened along time and space.
#[derive(Clone, Copy, Debug)]
pub struct TokenStack {
    pub tokens: Var,
    pub frames: usize,
    pub per_frame: usize,
}

impl TokenStack {
    pub fn len(&self) -> usize {
        self.frames * self.per_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_of(&self, i: usize) -> usize {
        i / self.per_frame
    }
}

/// Row `t·L + l` of the result is `frames[t][l] + E_temp[t]`.
pub fn stack_templates(g: &mut Graph, p: &ParamStore, frames: &[Var], temporal: &TemporalEmbedding) -> Result<TokenStack> {
    if frames.len() != temporal.frames {
        return Err(Error::arg(
            "frames",
            format!("{} template frames but temporal embedding has {} rows", frames.len(), temporal.frames),
        ));
    }
    let (l, c) = {
        let t = g.value(frames[0]);
        (t.rows(), t.cols())
    };
    for &f in frames {
        let t = g.value(f);
        if t.rows() != l || t.cols() != c {
            return Err(Error::shape("stack_templates", format!("frame {:?} vs [{l}, {c}]", t.shape())));
        }
    }
    if c != temporal.dim {
        return Err(Error::shape("stack_templates", format!("token width {c} vs embedding {}", temporal.dim)));
    }
    let tokens = g.concat_rows(frames)?;
    let table = g.param(p, temporal.table);
    let table = g.reshape(table, &[temporal.frames, c])?;
    let frame_of: Vec<usize> = (0..frames.len() * l).map(|i| i / l).collect();
    let offsets = g.select_rows(table, &frame_of)?;
    let tokens = g.add(tokens, offsets)?;
    Ok(TokenStack { tokens, frames: frames.len(), per_frame: l })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_counts_follow_patch_grid() {
        assert_eq!(FrameSpec::square(112, 16).tokens(), 49);
        assert_eq!(FrameSpec::square(224, 16).tokens(), 196);
        assert!(FrameSpec::square(100, 16).validate().is_err());
        assert!(FrameSpec { height: 64, width: 60, patch: 8 }.validate().is_err());
    }

    #[test]
    fn patchify_layout() {
        // 2×4 frame, patch 2 → two patches side by side.
        let spec = FrameSpec { height: 2, width: 4, patch: 2 };
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let frame = Tensor::new([3, 2, 4], data).unwrap();
        let p = patchify(&frame, &spec).unwrap();
        assert_eq!(p.shape(), &[2, 12]);
        assert_eq!(p.row(0)[..4], [0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1)[..4], [2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(1)[4..8], [10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_frame_yields_positional_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let spec = FrameSpec::square(32, 16);
        let proj = Linear::new(&mut store, "proj", spec.patch_dim(), 8, 1.0, &mut rng);
        let embed = PatchEmbed::new(&mut store, "pe", spec, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let t = embed_frame(&mut g, &store, &Tensor::zeros([3, 32, 32]), &proj, &embed).unwrap();
        assert_eq!(g.value(t).data(), store.get(embed.pos).data());
    }
}
