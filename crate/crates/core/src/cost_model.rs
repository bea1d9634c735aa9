//! Closed-form multiply-accumulate accounting for the whole pipeline.
//!
//! Only matmul-like products are counted (projections, attention scores and
//! values, convolutions, token scoring and matching); norms, softmax and
//! activations are free. Every count here matches what the autodiff tape's
//! counter records for the same forward pass on generic inputs.

use serde::{Deserialize, Serialize};

use crate::atc::{keep_count, selection_macs};
use crate::error::Result;
use crate::model::{rate_option, ModelConfig};
use crate::nn::MLP_RATIO;
use crate::tokenizer::CHANNELS;

/// `(nq + 2·nk)·C² + nq·C² + 2·nq·nk·C`: Q/K/V and output projections, then
/// `QKᵀ` and `AV`. Independent of the head count.
pub fn macs_attention(nq: usize, nk: usize, dim: usize, _heads: usize) -> u64 {
    let (nq, nk, c) = (nq as u64, nk as u64, dim as u64);
    (nq + 2 * nk) * c * c + nq * c * c + 2 * nq * nk * c
}

/// Two-layer MLP with the standard expansion ratio.
pub fn macs_mlp(n: usize, dim: usize) -> u64 {
    2 * (n * dim * dim * MLP_RATIO) as u64
}

/// Pre-norm self-attention block over `n` tokens.
pub fn macs_block(n: usize, dim: usize, heads: usize) -> u64 {
    macs_attention(n, n, dim, heads) + macs_mlp(n, dim)
}

/// Expand, depthwise 3×3 over the zero-padded grid, project.
pub fn macs_conv_ffn(n: usize, dim: usize, ratio: usize) -> u64 {
    let hidden = (dim * ratio) as u64;
    let n = n as u64;
    2 * n * dim as u64 * hidden + n * 9 * hidden
}

/// Per-component MACs for one (templates, search) forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub r: f64,
    pub template_tokens: usize,
    pub kept_tokens: usize,
    pub search_tokens: usize,
    pub embed: u64,
    pub tcm: u64,
    pub atc_overhead: u64,
    pub hib_template_cross: u64,
    pub hib_backbone: u64,
    pub hib_search_cross: u64,
    pub hib_conv_ffn: u64,
    pub head: u64,
    pub total: u64,
    pub note: String,
}

const NOTE: &str = "MACs count matmul-like products only; norms, softmax and activations are excluded. \
tcm runs in every configuration; atc_overhead is token scoring, norms and cosine matching.";

impl CostReport {
    /// All interaction-encoder MACs.
    pub fn encoder(&self) -> u64 {
        self.hib_template_cross + self.hib_backbone + self.hib_search_cross + self.hib_conv_ffn
    }

    /// `(component, macs, tokens)` rows in pipeline order.
    pub fn components(&self) -> Vec<(&'static str, u64, usize)> {
        let enc_tokens = self.kept_tokens + self.search_tokens;
        vec![
            ("embed", self.embed, self.template_tokens + self.search_tokens),
            ("tcm", self.tcm, self.template_tokens),
            ("atc_overhead", self.atc_overhead, self.template_tokens),
            ("hib_template_cross", self.hib_template_cross, enc_tokens),
            ("hib_backbone", self.hib_backbone, enc_tokens),
            ("hib_search_cross", self.hib_search_cross, enc_tokens),
            ("hib_conv_ffn", self.hib_conv_ffn, self.search_tokens),
            ("head", self.head, self.search_tokens),
            ("total", self.total, self.template_tokens + self.search_tokens),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,macs,tokens,r\n");
        for (name, macs, tokens) in self.components() {
            s.push_str(&format!("{name},{macs},{tokens},{}\n", self.r));
        }
        s
    }

    /// Fractional total reduction of `self` relative to `baseline`.
    pub fn reduction_vs(&self, baseline: &CostReport) -> f64 {
        1.0 - self.total as f64 / baseline.total as f64
    }
}

/// Analytic MACs of a full forward pass at keep rate `r` (1 bypasses ATC).
pub fn macs_pipeline(cfg: &ModelConfig, r: f64) -> Result<CostReport> {
    cfg.validate()?;
    let c = cfg.dim;
    let l = cfg.template_spec().tokens();
    let n_tmpl = cfg.templates * l;
    let n_x = cfg.search_spec().tokens();
    let (kept, atc_overhead) = match rate_option(r)? {
        None => (n_tmpl, 0),
        Some(r) => {
            let k = keep_count(r, n_tmpl)?;
            (k, selection_macs(n_tmpl, k, c))
        }
    };
    let patch_dim = CHANNELS * cfg.patch * cfg.patch;
    let embed = ((n_tmpl + n_x) * patch_dim * c) as u64;
    let tcm = cfg.tcm_depth as u64 * macs_block(n_tmpl, c, cfg.heads);
    let blocks = cfg.num_hiblocks as u64;
    let (cross1, cross2) = if cfg.cross_attention {
        (macs_attention(kept, n_x, c, cfg.heads), macs_attention(n_x, kept, c, cfg.heads))
    } else {
        (0, 0)
    };
    let hib_template_cross = blocks * cross1;
    let hib_search_cross = blocks * cross2;
    let hib_backbone = blocks * cfg.inner_blocks as u64 * macs_block(kept + n_x, c, cfg.heads);
    let hib_conv_ffn = blocks * macs_conv_ffn(n_x, c, cfg.ffn_ratio);
    let head = macs_head(cfg);
    let total = embed + tcm + atc_overhead + hib_template_cross + hib_backbone + hib_search_cross + hib_conv_ffn + head;
    Ok(CostReport {
        r,
        template_tokens: n_tmpl,
        kept_tokens: kept,
        search_tokens: n_x,
        embed,
        tcm,
        atc_overhead,
        hib_template_cross,
        hib_backbone,
        hib_search_cross,
        hib_conv_ffn,
        head,
        total,
        note: NOTE.into(),
    })
}

/// Three conv branches (class 1, offset 2, size 2 outputs).
pub fn macs_head(cfg: &ModelConfig) -> u64 {
    let hw = cfg.search_spec().tokens() as u64;
    let (c, h) = (cfg.dim as u64, cfg.head_hidden as u64);
    let mut convs = 0;
    for layer in 0..cfg.head_layers {
        let cin = if layer == 0 { c } else { h };
        convs += hw * 9 * cin * h;
    }
    let last = if cfg.head_layers == 0 { c } else { h };
    3 * convs + hw * last * (1 + 2 + 2)
}
