//! Adaptive token compression of multi-frame template tokens.
//!
//! The template stack is contextualised by a stack of self-attention blocks
//! (the token correlation module), scored with a frozen random projection,
//! split by keep rate into preserved targets and redundant sources, and every
//! source is added onto the target it is most cosine-similar to. Merging is
//! purely additive, so the row sum of the stack is conserved.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::TransformerBlock;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::TokenStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcmConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
}

impl Default for TcmConfig {
    fn default() -> Self {
        TcmConfig { depth: 8, heads: 4, dim: 64 }
    }
}

impl TcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::arg("tcm.depth", "must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::arg("tcm.heads", format!("{} does not divide {}", self.heads, self.dim)));
        }
        Ok(())
    }
}

/// Token correlation module: pre-norm self-attention blocks over all
/// template tokens jointly, with no mask.
#[derive(Clone, Debug)]
pub struct Tcm {
    pub cfg: TcmConfig,
    pub blocks: Vec<TransformerBlock>,
}

impl Tcm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: TcmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), cfg.dim, cfg.heads, rng))
            .collect::<Result<_>>()?;
        Ok(Tcm { cfg, blocks })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        self.blocks.iter().try_fold(x, |x, b| b.forward(g, p, x))
    }
}

/// Frozen Gaussian projection producing one importance score per token.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreProjector {
    pub seed: u64,
    pub w: Vec<f32>,
}

impl ScoreProjector {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5C0_7E5C);
        let w = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        ScoreProjector { seed, w }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// `S[i] = tokens[i] · w`.
pub fn score(tokens: &Tensor, proj: &ScoreProjector) -> Result<Vec<f32>> {
    score_counted(tokens, proj, &mut 0)
}

fn score_counted(tokens: &Tensor, proj: &ScoreProjector, macs: &mut u64) -> Result<Vec<f32>> {
    if tokens.cols() != proj.dim() {
        return Err(Error::shape("score", format!("token width {} vs projector {}", tokens.cols(), proj.dim())));
    }
    *macs += tokens.numel() as u64;
    Ok((0..tokens.rows())
        .map(|i| {
            let s: f64 = tokens.row(i).iter().zip(&proj.w).map(|(&a, &b)| a as f64 * b as f64).sum();
            s as f32
        })
        .collect())
}

/// `floor(r · total)`, the number of preserved tokens.
pub fn keep_count(r: f64, total: usize) -> Result<usize> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::arg("keep_rate", format!("{r} not in (0, 1)")));
    }
    let k = (r * total as f64).floor() as usize;
    if k == 0 {
        return Err(Error::arg("keep_rate", format!("floor({r}·{total}) = 0 would discard every token")));
    }
    Ok(k)
}

/// Split token indices into the preserved set `A` (top `floor(r·total)`
/// scores, equal scores won by the lower index) and the source set `B`.
/// Both are returned in ascending index order.
pub fn partition(scores: &[f32], r: f64, total: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if scores.len() != total {
        return Err(Error::shape("partition", format!("{} scores for {total} tokens", scores.len())));
    }
    let k = keep_count(r, total)?;
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut a = order[..k].to_vec();
    let mut b = order[k..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

fn norm(v: &[f32], macs: &mut u64) -> f64 {
    *macs += v.len() as u64;
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Index into `targets` of the most cosine-similar target for `source`.
/// Zero-norm targets are never chosen while a nonzero one exists; a
/// zero-norm source has similarity 0 to everything; ties go to the lowest
/// position.
fn best_target(
    source: &[f32],
    source_norm: f64,
    targets: &[&[f32]],
    target_norms: &[f64],
    macs: &mut u64,
) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (j, (t, &tn)) in targets.iter().zip(target_norms).enumerate() {
        if tn == 0.0 {
            continue;
        }
        let sim = if source_norm == 0.0 {
            0.0
        } else {
            *macs += source.len() as u64;
            let dot: f64 = source.iter().zip(t.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
            dot / (source_norm * tn)
        };
        if best.map_or(true, |(_, s)| sim > s) {
            best = Some((j, sim));
        }
    }
    best.map_or(0, |(j, _)| j)
}

/// Where every input row goes in the compressed output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergePlan {
    /// Preserved original indices, ascending. Output row `k` is `kept_idx[k]`.
    pub kept_idx: Vec<usize>,
    /// Source original index → preserved original index it is merged into.
    pub assignment: BTreeMap<usize, usize>,
    /// Output row receiving each input row.
    pub slot_of_row: Vec<usize>,
}

impl MergePlan {
    /// The identity plan: every token kept, nothing merged.
    pub fn identity(total: usize) -> Self {
        MergePlan {
            kept_idx: (0..total).collect(),
            assignment: BTreeMap::new(),
            slot_of_row: (0..total).collect(),
        }
    }
}

/// Greedy cosine matching of every source in `b` against the pre-merge
/// targets in `a`.
pub fn plan_merge(tokens: &Tensor, a: &[usize], b: &[usize]) -> Result<MergePlan> {
    plan_merge_counted(tokens, a, b, &mut 0)
}

fn plan_merge_counted(tokens: &Tensor, a: &[usize], b: &[usize], macs: &mut u64) -> Result<MergePlan> {
    let n = tokens.rows();
    let mut seen = vec![false; n];
    for &i in a.iter().chain(b) {
        if i >= n || seen[i] {
            return Err(Error::arg("partition", format!("index {i} repeated or out of range for {n} tokens")));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::arg("partition", "A and B do not cover every token"));
    }
    if a.is_empty() {
        return Err(Error::arg("partition", "no preserved tokens"));
    }
    let mut kept_idx = a.to_vec();
    kept_idx.sort_unstable();
    let targets: Vec<&[f32]> = kept_idx.iter().map(|&i| tokens.row(i)).collect();
    let target_norms: Vec<f64> = targets.iter().map(|t| norm(t, macs)).collect();
    let mut slot_of_row = vec![0; n];
    for (k, &i) in kept_idx.iter().enumerate() {
        slot_of_row[i] = k;
    }
    let mut assignment = BTreeMap::new();
    for &i in b {
        let src = tokens.row(i);
        let src_norm = norm(src, macs);
        let k = best_target(src, src_norm, &targets, &target_norms, macs);
        slot_of_row[i] = k;
        assignment.insert(i, kept_idx[k]);
    }
    Ok(MergePlan { kept_idx, assignment, slot_of_row })
}

/// Multiplies spent selecting tokens for generic (nonzero) inputs: scoring
/// every token, all token norms, and one dot product per (source, target)
/// pair.
pub fn selection_macs(total: usize, kept: usize, dim: usize) -> u64 {
    let merged = total - kept;
    (2 * total * dim + merged * kept * dim) as u64
}

/// Merge outside of any graph: `a'_j = a_j + Σ_{i∈Ω_j} b_i`.
pub fn guided_merge(tokens: &Tensor, a: &[usize], b: &[usize]) -> Result<(Tensor, MergePlan)> {
    let plan = plan_merge(tokens, a, b)?;
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let y = g.segment_sum(x, &plan.slot_of_row, plan.kept_idx.len())?;
    Ok((g.value(y).clone(), plan))
}

/// Compressed template with its provenance.
#[derive(Clone, Debug)]
pub struct CompressionResult {
    pub compressed: Var,
    pub context: Var,
    pub plan: MergePlan,
    pub scores: Vec<f32>,
    pub keep_rate: f64,
    pub frames: usize,
    pub per_frame: usize,
}

impl CompressionResult {
    pub fn kept(&self) -> usize {
        self.plan.kept_idx.len()
    }

    pub fn record(&self, grid: (usize, usize)) -> CompressionRecord {
        let mut kept = vec![false; self.frames * self.per_frame];
        for &i in &self.plan.kept_idx {
            kept[i] = true;
        }
        let (gh, gw) = grid;
        let grids = (0..self.frames)
            .map(|t| {
                (0..gh)
                    .map(|i| (0..gw).map(|j| kept[t * self.per_frame + i * gw + j] as u8).collect())
                    .collect()
            })
            .collect();
        CompressionRecord {
            kept_idx: self.plan.kept_idx.clone(),
            assignment: self.plan.assignment.iter().map(|(&s, &t)| [s, t]).collect(),
            scores: self.scores.clone(),
            r: self.keep_rate,
            t: self.frames,
            l: self.per_frame,
            grid: grids,
        }
    }
}

/// Serialisable form of a [`CompressionResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionRecord {
    pub kept_idx: Vec<usize>,
    /// `[source, target]` pairs in ascending source order.
    pub assignment: Vec<[usize; 2]>,
    pub scores: Vec<f32>,
    pub r: f64,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "L")]
    pub l: usize,
    /// Per frame, per grid row: 1 = kept, 0 = eliminated.
    pub grid: Vec<Vec<Vec<u8>>>,
}

impl CompressionRecord {
    /// Kept/eliminated grids, one grid row per line, frames stacked in order.
    pub fn grid_csv(&self) -> String {
        let mut out = String::new();
        for frame in &self.grid {
            for row in frame {
                let line: Vec<String> = row.iter().map(u8::to_string).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        out
    }
}

/// Contextualise, score, partition and merge. With `keep_rate == None`
/// the compression step is bypassed and every contextualised token is kept.
pub fn compress(
    g: &mut Graph,
    p: &ParamStore,
    stack: &TokenStack,
    tcm: &Tcm,
    proj: &ScoreProjector,
    keep_rate: Option<f64>,
) -> Result<CompressionResult> {
    let context = tcm.forward(g, p, stack.tokens)?;
    let total = stack.len();
    let ctx = g.value(context).clone();
    let Some(r) = keep_rate else {
        return Ok(CompressionResult {
            compressed: context,
            context,
            plan: MergePlan::identity(total),
            scores: Vec::new(),
            keep_rate: 1.0,
            frames: stack.frames,
            per_frame: stack.per_frame,
        });
    };
    let mut macs = 0;
    let scores = score_counted(&ctx, proj, &mut macs)?;
    let (a, b) = partition(&scores, r, total)?;
    let plan = plan_merge_counted(&ctx, &a, &b, &mut macs)?;
    g.count_macs(macs);
    let compressed = g.segment_sum(context, &plan.slot_of_row, a.len())?;
    Ok(CompressionResult {
        compressed,
        context,
        plan,
        scores,
        keep_rate: r,
        frames: stack.frames,
        per_frame: stack.per_frame,
    })
}
