//! Hierarchical interaction encoder.
//!
//! Each block runs four stages over the compressed template `z` (K rows) and
//! the search tokens `x` (N_x rows):
//!
//! ```text
//! z'  = z + CrossAttn(q = z, kv = x)
//! [z'', x'] = split(BackboneBlocks(concat(z', x)))
//! x'' = x' + CrossAttn(q = x', kv = z'')
//! out = ConvFFN(x'')
//! ```
//!
//! The block emits `(z'', out)`; stacked blocks thread both forward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atc::CompressionResult;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiBlockConfig {
    /// Backbone blocks inside each interaction block (M).
    pub inner_blocks: usize,
    pub heads: usize,
    pub dim: usize,
    /// Search token grid `(H_x/P, W_x/P)`.
    pub search_grid: (usize, usize),
    pub num_hiblocks: usize,
    pub ffn_ratio: usize,
    /// When false, both cross-attention stages are skipped (ablation).
    pub cross_attention: bool,
}

impl Default for HiBlockConfig {
    fn default() -> Self {
        HiBlockConfig {
            inner_blocks: 4,
            heads: 4,
            dim: 64,
            search_grid: (14, 14),
            num_hiblocks: 3,
            ffn_ratio: 4,
            cross_attention: true,
        }
    }
}

impl HiBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_blocks == 0 {
            return Err(Error::arg("encoder.inner_blocks", "must be at least 1"));
        }
        if self.num_hiblocks == 0 {
            return Err(Error::arg("encoder.num_hiblocks", "must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::arg("encoder.heads", format!("{} does not divide {}", self.heads, self.dim)));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::arg("encoder.ffn_ratio", "must be positive"));
        }
        Ok(())
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid.0 * self.search_grid.1
    }
}

/// Template and search token sets flowing between blocks.
#[derive(Clone, Copy, Debug)]
pub struct EncoderState {
    pub template: Var,
    pub search: Var,
}

/// Pre-normalised cross-attention; queries and keys/values get their own norm.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(CrossAttention {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
        })
    }

    /// Attention output only (no residual).
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, q: Var, kv: Var) -> Result<Var> {
        let qn = self.ln_q.forward(g, p, q)?;
        let kvn = self.ln_kv.forward(g, p, kv)?;
        self.attn.forward(g, p, qn, kvn)
    }
}

/// Convolutional feed-forward on the search grid:
/// `x + Proj(GELU(DWConv3x3(Expand(LN x))))`.
#[derive(Clone, Debug)]
pub struct ConvFfn {
    pub ln: LayerNorm,
    pub expand: Linear,
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub project: Linear,
}

impl ConvFfn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, rng: &mut R) -> Self {
        let hidden = dim * ratio;
        ConvFfn {
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim),
            expand: Linear::new(store, &format!("{name}.expand"), dim, hidden, 1.0, rng),
            dw_kernel: store.add(format!("{name}.dw.w"), Tensor::randn([9, hidden], 1.0 / 3.0, rng), true),
            dw_bias: store.add(format!("{name}.dw.b"), Tensor::zeros([hidden]), true),
            project: Linear::new(store, &format!("{name}.project"), hidden, dim, 0.5, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, grid: (usize, usize)) -> Result<Var> {
        let n = g.value(x).rows();
        if n != grid.0 * grid.1 {
            return Err(Error::shape("conv_ffn", format!("{n} tokens vs {}×{} grid", grid.0, grid.1)));
        }
        let h = self.ln.forward(g, p, x)?;
        let h = self.expand.forward(g, p, h)?;
        let k = g.param(p, self.dw_kernel);
        let b = g.param(p, self.dw_bias);
        let h = g.depthwise_conv3x3(h, k, grid.0, grid.1)?;
        let h = g.add_row(h, b)?;
        let h = g.gelu(h);
        let h = self.project.forward(g, p, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct HiBlock {
    pub template_query: Option<CrossAttention>,
    pub backbone: Vec<TransformerBlock>,
    pub search_query: Option<CrossAttention>,
    pub conv_ffn: ConvFfn,
}

impl HiBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &HiBlockConfig, rng: &mut R) -> Result<Self> {
        let cross = |store: &mut ParamStore, n: &str, rng: &mut R| -> Result<Option<CrossAttention>> {
            if cfg.cross_attention {
                Ok(Some(CrossAttention::new(store, &format!("{name}.{n}"), cfg.dim, cfg.heads, rng)?))
            } else {
                Ok(None)
            }
        };
        let template_query = cross(store, "xattn_z", rng)?;
        let backbone = (0..cfg.inner_blocks)
            .map(|i| TransformerBlock::new(store, &format!("{name}.blocks.{i}"), cfg.dim, cfg.heads, rng))
            .collect::<Result<_>>()?;
        let search_query = cross(store, "xattn_x", rng)?;
        let conv_ffn = ConvFfn::new(store, &format!("{name}.convffn"), cfg.dim, cfg.ffn_ratio, rng);
        Ok(HiBlock { template_query, backbone, search_query, conv_ffn })
    }

    /// Stage 1: `z' = z + CrossAttn(z, x, x)`.
    pub fn enrich_template(&self, g: &mut Graph, p: &ParamStore, z: Var, x: Var) -> Result<Var> {
        match &self.template_query {
            Some(ca) => {
                let d = ca.forward(g, p, z, x)?;
                g.add(z, d)
            }
            None => Ok(z),
        }
    }

    /// Stage 2: joint backbone blocks over `concat(z', x)`, split back.
    pub fn joint(&self, g: &mut Graph, p: &ParamStore, z: Var, x: Var) -> Result<(Var, Var)> {
        let k = g.value(z).rows();
        let n = g.value(x).rows();
        let mut h = g.concat_rows(&[z, x])?;
        for b in &self.backbone {
            h = b.forward(g, p, h)?;
        }
        Ok((g.slice_rows(h, 0, k)?, g.slice_rows(h, k, n)?))
    }

    /// Stage 3: `x'' = x' + CrossAttn(x', z'', z'')`.
    pub fn guide_search(&self, g: &mut Graph, p: &ParamStore, x: Var, z: Var) -> Result<Var> {
        match &self.search_query {
            Some(ca) => {
                let d = ca.forward(g, p, x, z)?;
                g.add(x, d)
            }
            None => Ok(x),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, state: EncoderState, grid: (usize, usize)) -> Result<EncoderState> {
        let (k_in, n_in) = (g.value(state.template).rows(), g.value(state.search).rows());
        if n_in != grid.0 * grid.1 {
            return Err(Error::shape("hiblock", format!("{n_in} search tokens vs {}×{} grid", grid.0, grid.1)));
        }
        if g.value(state.template).cols() != g.value(state.search).cols() {
            return Err(Error::shape("hiblock", "template and search widths differ"));
        }
        let z1 = self.enrich_template(g, p, state.template, state.search)?;
        let (z2, x1) = self.joint(g, p, z1, state.search)?;
        let x2 = self.guide_search(g, p, x1, z2)?;
        let out = self.conv_ffn.forward(g, p, x2, grid)?;
        debug_assert_eq!((g.value(z2).rows(), g.value(out).rows()), (k_in, n_in));
        Ok(EncoderState { template: z2, search: out })
    }

    /// Zero every residual-branch output projection.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        for ca in self.template_query.iter().chain(&self.search_query) {
            ca.attn.o.zero(store);
        }
        for b in &self.backbone {
            b.zero_outputs(store);
        }
        self.conv_ffn.project.zero(store);
    }
}

#[derive(Clone, Debug)]
pub struct HiEncoder {
    pub cfg: HiBlockConfig,
    pub blocks: Vec<HiBlock>,
}

impl HiEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: HiBlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_hiblocks)
            .map(|i| HiBlock::new(store, &format!("{name}.{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(HiEncoder { cfg, blocks })
    }

    pub fn forward_state(&self, g: &mut Graph, p: &ParamStore, state: EncoderState) -> Result<EncoderState> {
        self.blocks.iter().try_fold(state, |s, b| b.forward(g, p, s, self.cfg.search_grid))
    }

    /// Final search features for the head.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, compressed: &CompressionResult, search: Var) -> Result<Var> {
        if g.value(compressed.compressed).cols() != g.value(search).cols() {
            return Err(Error::shape("encoder", "template and search widths differ"));
        }
        let state = EncoderState { template: compressed.compressed, search };
        Ok(self.forward_state(g, p, state)?.search)
    }

    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.blocks.iter().for_each(|b| b.zero_outputs(store));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> HiBlockConfig {
        HiBlockConfig { inner_blocks: 1, heads: 2, dim: 8, search_grid: (3, 3), num_hiblocks: 1, ffn_ratio: 4, cross_attention: true }
    }

    #[test]
    fn row_counts_are_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = HiEncoder::new(&mut store, "enc", small_cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::randn([5, 8], 1.0, &mut rng));
        let x = g.constant(Tensor::randn([9, 8], 1.0, &mut rng));
        let out = enc.forward_state(&mut g, &store, EncoderState { template: z, search: x }).unwrap();
        assert_eq!(g.value(out.template).shape(), &[5, 8]);
        assert_eq!(g.value(out.search).shape(), &[9, 8]);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = HiEncoder::new(&mut store, "enc", small_cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::randn([5, 8], 1.0, &mut rng));
        let x = g.constant(Tensor::randn([8, 8], 1.0, &mut rng));
        assert!(enc.forward_state(&mut g, &store, EncoderState { template: z, search: x }).is_err());
    }

    #[test]
    fn zeroed_cross_attention_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let blk = HiBlock::new(&mut store, "b", &small_cfg(), &mut rng).unwrap();
        blk.template_query.as_ref().unwrap().attn.o.zero(&mut store);
        let mut g = Graph::new();
        let zt = Tensor::randn([4, 8], 1.0, &mut rng);
        let z = g.constant(zt.clone());
        let x = g.constant(Tensor::randn([9, 8], 1.0, &mut rng));
        let z1 = blk.enrich_template(&mut g, &store, z, x).unwrap();
        assert_eq!(g.value(z1), &zt);
    }

    #[test]
    fn conv_ffn_zero_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let ffn = ConvFfn::new(&mut store, "f", 8, 4, &mut rng);
        ffn.project.zero(&mut store);
        let xt = Tensor::randn([49, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let y = ffn.forward(&mut g, &store, x, (7, 7)).unwrap();
        assert_eq!(g.value(y), &xt);
        assert!(ffn.forward(&mut g, &store, x, (6, 8)).is_err());
    }
}
