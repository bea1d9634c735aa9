//! The full tracker: tokenizer, compressor, interaction encoder and head,
//! plus checkpoint persistence.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atc::{compress, CompressionResult, ScoreProjector, Tcm, TcmConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::head::{Head, HeadConfig, HeadOutput, NormMode};
use crate::hi_encoder::{HiBlockConfig, HiEncoder};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};
use crate::tokenizer::{embed_frame, stack_templates, FrameSpec, PatchEmbed, TemporalEmbedding};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub template_size: usize,
    pub search_size: usize,
    pub patch: usize,
    pub templates: usize,
    pub dim: usize,
    pub heads: usize,
    pub tcm_depth: usize,
    pub num_hiblocks: usize,
    pub inner_blocks: usize,
    pub ffn_ratio: usize,
    pub head_layers: usize,
    pub head_hidden: usize,
    pub cross_attention: bool,
}

impl ModelConfig {
    /// Desk-scale analogue of a ViT-B/224 tracker.
    pub fn b224() -> Self {
        ModelConfig {
            template_size: 112,
            search_size: 224,
            patch: 16,
            templates: 5,
            dim: 64,
            heads: 4,
            tcm_depth: 8,
            num_hiblocks: 3,
            inner_blocks: 4,
            ffn_ratio: 4,
            head_layers: 3,
            head_hidden: 64,
            cross_attention: true,
        }
    }

    /// Small configuration trained end to end on the synthetic task.
    pub fn toy() -> Self {
        ModelConfig {
            template_size: 32,
            search_size: 64,
            patch: 8,
            templates: 5,
            dim: 32,
            heads: 4,
            tcm_depth: 2,
            num_hiblocks: 2,
            inner_blocks: 2,
            ffn_ratio: 4,
            head_layers: 2,
            head_hidden: 32,
            cross_attention: true,
        }
    }

    pub fn template_spec(&self) -> FrameSpec {
        FrameSpec::square(self.template_size, self.patch)
    }

    pub fn search_spec(&self) -> FrameSpec {
        FrameSpec::square(self.search_size, self.patch)
    }

    pub fn search_grid(&self) -> (usize, usize) {
        self.search_spec().grid()
    }

    pub fn tcm(&self) -> TcmConfig {
        TcmConfig { depth: self.tcm_depth, heads: self.heads, dim: self.dim }
    }

    pub fn encoder(&self) -> HiBlockConfig {
        HiBlockConfig {
            inner_blocks: self.inner_blocks,
            heads: self.heads,
            dim: self.dim,
            search_grid: self.search_grid(),
            num_hiblocks: self.num_hiblocks,
            ffn_ratio: self.ffn_ratio,
            cross_attention: self.cross_attention,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig { layers: self.head_layers, dim: self.dim, hidden: self.head_hidden, grid: self.search_grid() }
    }

    pub fn validate(&self) -> Result<()> {
        self.template_spec().validate()?;
        self.search_spec().validate()?;
        if self.templates == 0 {
            return Err(Error::Config("templates must be positive".into()));
        }
        if self.head_hidden == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("head_hidden and ffn_ratio must be positive".into()));
        }
        self.tcm().validate()?;
        self.encoder().validate()
    }
}

/// Forward results of one (templates, search) pair.
#[derive(Clone, Debug)]
pub struct Forward {
    pub compression: CompressionResult,
    pub head: HeadOutput,
}

#[derive(Clone, Debug)]
pub struct Etctrack {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub projector: ScoreProjector,
    pub patch_proj: Linear,
    pub template_embed: PatchEmbed,
    pub search_embed: PatchEmbed,
    pub temporal: TemporalEmbedding,
    pub tcm: Tcm,
    pub encoder: HiEncoder,
    pub head: Head,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    projector_seed: u64,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    trainable: bool,
}

const MANIFEST_FORMAT: &str = "etctrack-checkpoint-1";

impl Etctrack {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let t_spec = cfg.template_spec();
        let s_spec = cfg.search_spec();
        let patch_proj = Linear::new(&mut store, "embed.proj", t_spec.patch_dim(), cfg.dim, 1.0, &mut rng);
        let template_embed = PatchEmbed::new(&mut store, "embed.template", t_spec, cfg.dim, &mut rng)?;
        let search_embed = PatchEmbed::new(&mut store, "embed.search", s_spec, cfg.dim, &mut rng)?;
        let temporal = TemporalEmbedding::new(&mut store, "embed.temporal", cfg.templates, cfg.dim, &mut rng);
        let tcm = Tcm::new(&mut store, "tcm", cfg.tcm(), &mut rng)?;
        let projector = ScoreProjector::new(seed, cfg.dim);
        let encoder = HiEncoder::new(&mut store, "encoder", cfg.encoder(), &mut rng)?;
        let head = Head::new(&mut store, "head", cfg.head(), &mut rng);
        Ok(Etctrack { cfg, store, projector, patch_proj, template_embed, search_embed, temporal, tcm, encoder, head })
    }

    /// Tokenize and compress a template set; `keep_rate` of 1 bypasses merging.
    pub fn compress_templates(&self, g: &mut Graph, templates: &[Tensor], keep_rate: f64) -> Result<CompressionResult> {
        if templates.len() != self.cfg.templates {
            return Err(Error::arg(
                "templates",
                format!("{} template images for a model built for {}", templates.len(), self.cfg.templates),
            ));
        }
        let frames = templates
            .iter()
            .map(|t| embed_frame(g, &self.store, t, &self.patch_proj, &self.template_embed))
            .collect::<Result<Vec<_>>>()?;
        let stack = stack_templates(g, &self.store, &frames, &self.temporal)?;
        let rate = rate_option(keep_rate)?;
        compress(g, &self.store, &stack, &self.tcm, &self.projector, rate)
    }

    /// Encode one search image against a compressed template and run the head.
    pub fn search_forward(
        &self,
        g: &mut Graph,
        compression: &CompressionResult,
        search: &Tensor,
        mode: &mut NormMode<'_>,
    ) -> Result<HeadOutput> {
        let x = self.embed_search(g, search)?;
        let feats = self.encoder.forward(g, &self.store, compression, x)?;
        self.head.forward(g, &self.store, feats, mode)
    }

    pub fn embed_search(&self, g: &mut Graph, search: &Tensor) -> Result<Var> {
        embed_frame(g, &self.store, search, &self.patch_proj, &self.search_embed)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        templates: &[Tensor],
        search: &Tensor,
        keep_rate: f64,
        mode: &mut NormMode<'_>,
    ) -> Result<Forward> {
        let compression = self.compress_templates(g, templates, keep_rate)?;
        let head = self.search_forward(g, &compression, search, mode)?;
        Ok(Forward { compression, head })
    }

    /// Write `manifest.json` plus one tensor dump per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("params"))?;
        let mut params = Vec::with_capacity(self.store.len());
        for (id, entry) in self.store.iter() {
            let file = format!("params/{:04}.tokt", id.index());
            tensor::save(&entry.value, &dir.join(&file))?;
            params.push(ManifestEntry {
                name: entry.name.clone(),
                file,
                shape: entry.value.shape().to_vec(),
                trainable: entry.trainable,
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            config: self.cfg.clone(),
            projector_seed: self.projector.seed,
            params,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
        }
        let mut model = Etctrack::new(manifest.config, manifest.projector_seed)?;
        let mut loaded = ParamStore::new();
        for e in &manifest.params {
            let t = tensor::load(&dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("{}: dump shape {:?} vs manifest {:?}", e.name, t.shape(), e.shape)));
            }
            loaded.add(e.name.clone(), t, e.trainable);
        }
        if loaded.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        model.store.load_from(&loaded)?;
        Ok(model)
    }
}

/// `None` for the ATC bypass at r = 1, otherwise the validated rate.
pub fn rate_option(keep_rate: f64) -> Result<Option<f64>> {
    if keep_rate == 1.0 {
        Ok(None)
    } else if keep_rate > 0.0 && keep_rate < 1.0 {
        Ok(Some(keep_rate))
    } else {
        Err(Error::arg("keep_rate", format!("{keep_rate} not in (0, 1]")))
    }
}
