//! Subcommand implementations writing their artifacts into an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atc::CompressionRecord;
use crate::autodiff::Graph;
use crate::cost_model::{macs_pipeline, CostReport};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::scenario::generate_scenario;
use crate::harness::track::{template_crop, track_sequence, ModelTracker};
use crate::harness::train::{eval_spec, evaluate, loss_csv, loss_windows, train_toy};
use crate::model::Etctrack;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_window_loss: f64,
    pub last_window_loss: f64,
    pub scenario_iou: Vec<f64>,
    pub mean_iou: f64,
}

/// Report at the configured rate next to the uncompressed baseline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostSummary {
    pub report: CostReport,
    pub baseline: CostReport,
    pub total_reduction: f64,
    pub encoder_savings: u64,
    pub selection_overhead: u64,
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let p = out.join(name);
    fs::write(&p, contents)?;
    Ok(p)
}

fn write_record(out: &Path, rec: &CompressionRecord) -> Result<()> {
    write(out, "compression.json", serde_json::to_string_pretty(rec)?)?;
    write(out, "compression_grid.csv", rec.grid_csv())?;
    Ok(())
}

fn model_for(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Etctrack> {
    match checkpoint {
        Some(dir) => {
            let m = Etctrack::load(dir)?;
            if m.cfg.templates != cfg.model.templates {
                return Err(Error::Config(format!(
                    "checkpoint expects {} templates, run asks for {}",
                    m.cfg.templates, cfg.model.templates
                )));
            }
            Ok(m)
        }
        None => Etctrack::new(cfg.model.clone(), cfg.seed),
    }
}

/// Train, checkpoint, then evaluate on the held-out scenarios. Scenario 0's
/// trajectory and last compression are written alongside the loss curve.
pub fn run_train(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(usize, f64)) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut model = Etctrack::new(cfg.model.clone(), cfg.seed)?;
    let losses = train_toy(&mut model, cfg, &mut progress)?;
    write(out, "loss.csv", loss_csv(&losses))?;
    model.save(&out.join("checkpoint"))?;
    let results = evaluate(&model, cfg)?;
    if let Some(first) = results.first() {
        write(out, "trajectory.csv", first.to_csv())?;
        if let Some(rec) = &first.last_record {
            write_record(out, rec)?;
        }
    }
    let scenario_iou: Vec<f64> = results.iter().map(|r| r.mean_iou()).collect();
    let mean_iou = if scenario_iou.is_empty() { 0.0 } else { scenario_iou.iter().sum::<f64>() / scenario_iou.len() as f64 };
    let (first_window_loss, last_window_loss) = if losses.is_empty() { (0.0, 0.0) } else { loss_windows(&losses, 0.1) };
    let summary = TrainSummary { steps: losses.len(), first_window_loss, last_window_loss, scenario_iou, mean_iou };
    write(out, "summary.json", serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Track held-out scenario `index` and write its trajectory.
pub fn run_track(cfg: &RunConfig, checkpoint: Option<&Path>, index: usize, out: &Path) -> Result<f64> {
    cfg.validate()?;
    let model = model_for(cfg, checkpoint)?;
    let scenario = generate_scenario(&eval_spec(cfg, index))?;
    let res = track_sequence(&ModelTracker { model: &model, keep_rate: cfg.keep_rate }, &scenario, cfg.tau)?;
    write(out, "trajectory.csv", res.to_csv())?;
    if let Some(rec) = &res.last_record {
        write_record(out, rec)?;
    }
    Ok(res.mean_iou())
}

pub fn cost_summary(cfg: &RunConfig) -> Result<CostSummary> {
    let report = macs_pipeline(&cfg.model, cfg.keep_rate)?;
    let baseline = macs_pipeline(&cfg.model, 1.0)?;
    Ok(CostSummary {
        total_reduction: report.reduction_vs(&baseline),
        encoder_savings: baseline.encoder().saturating_sub(report.encoder()),
        selection_overhead: report.atc_overhead,
        report,
        baseline,
    })
}

pub fn run_cost_report(cfg: &RunConfig, out: &Path) -> Result<CostSummary> {
    cfg.validate()?;
    let s = cost_summary(cfg)?;
    write(out, "cost.json", serde_json::to_string_pretty(&s)?)?;
    let mut csv = s.report.to_csv();
    csv.push_str(&s.baseline.to_csv().lines().skip(1).map(|l| format!("baseline_{l}\n")).collect::<String>());
    write(out, "cost.csv", csv)?;
    Ok(s)
}

/// Compress the first `T` ground-truth template crops of held-out scenario
/// `index` and dump which tokens were kept and where the rest went.
pub fn run_dump_compression(cfg: &RunConfig, checkpoint: Option<&Path>, index: usize, out: &Path) -> Result<CompressionRecord> {
    cfg.validate()?;
    let model = model_for(cfg, checkpoint)?;
    let mut spec = eval_spec(cfg, index);
    spec.frames = spec.frames.max(model.cfg.templates);
    let sc = generate_scenario(&spec)?;
    let templates: Vec<_> = (0..model.cfg.templates)
        .map(|t| template_crop(&sc.frames[t], &sc.boxes[t], model.cfg.template_size))
        .collect();
    let mut g = Graph::new();
    let comp = model.compress_templates(&mut g, &templates, cfg.keep_rate)?;
    let rec = comp.record(model.cfg.template_spec().grid());
    write_record(out, &rec)?;
    Ok(rec)
}

/// Measured MACs of one eval-mode forward pass on seeded random images.
pub fn measured_macs(model: &Etctrack, keep_rate: f64, seed: u64) -> Result<u64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = &model.cfg;
    let templates: Vec<_> = (0..c.templates)
        .map(|_| crate::tensor::Tensor::randn([3, c.template_size, c.template_size], 1.0, &mut rng))
        .collect();
    let search = crate::tensor::Tensor::randn([3, c.search_size, c.search_size], 1.0, &mut rng);
    let mut g = Graph::new();
    model.forward(&mut g, &templates, &search, keep_rate, &mut crate::head::NormMode::Eval)?;
    Ok(g.macs())
}

/// Fast internal consistency checks; `(name, passed)` per check.
pub fn run_selftest() -> Vec<(String, bool)> {
    use crate::model::ModelConfig;
    let mut out = Vec::new();
    let keep = crate::atc::keep_count(0.9, 245).ok() == Some(220) && crate::atc::keep_count(0.4, 245).ok() == Some(98);
    out.push(("keep count".to_string(), keep));

    let tiny = ModelConfig {
        template_size: 4,
        search_size: 4,
        patch: 2,
        templates: 2,
        dim: 4,
        heads: 2,
        tcm_depth: 1,
        num_hiblocks: 1,
        inner_blocks: 1,
        ffn_ratio: 2,
        head_layers: 1,
        head_hidden: 4,
        cross_attention: true,
    };
    let cost_ok = [1.0, 0.5].iter().all(|&r| {
        let analytic = macs_pipeline(&tiny, r).map(|c| c.total);
        let measured = Etctrack::new(tiny.clone(), 3).and_then(|m| measured_macs(&m, r, 4));
        matches!((analytic, measured), (Ok(a), Ok(b)) if a == b)
    });
    out.push(("cost model matches counter".to_string(), cost_ok));

    let b = crate::head::BoxN { cx: 0.4, cy: 0.5, w: 0.2, h: 0.3 };
    let giou_ok = crate::losses::giou(&b, &b).map(|v| (v - 1.0).abs() < 1e-6).unwrap_or(false);
    out.push(("giou identity".to_string(), giou_ok));

    let trend = macs_pipeline(&ModelConfig::b224(), 0.4)
        .and_then(|r| Ok((r, macs_pipeline(&ModelConfig::b224(), 1.0)?)))
        .map(|(r, base)| {
            let red = r.reduction_vs(&base);
            red > 0.05 && red < 0.4
        })
        .unwrap_or(false);
    out.push(("compute reduction at r=0.4".to_string(), trend));
    out
}
