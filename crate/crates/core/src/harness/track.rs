//! Frame-by-frame tracking with the template bank.

use crate::atc::CompressionRecord;
use crate::autodiff::Graph;
use crate::error::Result;
use crate::harness::bank::TemplateBank;
use crate::harness::crop::{crop_resize, CropWindow, CROP_FACTOR};
use crate::harness::scenario::SyntheticScenario;
use crate::head::{decode, BoxN, HeadMaps, NormMode};
use crate::model::Etctrack;
use crate::tensor::Tensor;

/// Where the current search crop sits in the frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameContext {
    pub frame: usize,
    pub window: CropWindow,
    pub frame_size: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub maps: HeadMaps,
    pub record: Option<CompressionRecord>,
}

/// Anything that maps (templates, search crop) to head maps.
pub trait TrackingModel {
    fn template_size(&self) -> usize;
    fn search_size(&self) -> usize;
    fn templates(&self) -> usize;
    fn predict(&self, templates: &[Tensor], search: &Tensor, ctx: &FrameContext) -> Result<Prediction>;
}

/// The network at a fixed keep rate, in evaluation mode.
pub struct ModelTracker<'a> {
    pub model: &'a Etctrack,
    pub keep_rate: f64,
}

impl TrackingModel for ModelTracker<'_> {
    fn template_size(&self) -> usize {
        self.model.cfg.template_size
    }

    fn search_size(&self) -> usize {
        self.model.cfg.search_size
    }

    fn templates(&self) -> usize {
        self.model.cfg.templates
    }

    fn predict(&self, templates: &[Tensor], search: &Tensor, _ctx: &FrameContext) -> Result<Prediction> {
        let mut g = Graph::new();
        let f = self.model.forward(&mut g, templates, search, self.keep_rate, &mut NormMode::Eval)?;
        Ok(Prediction {
            maps: f.head.maps(&g),
            record: Some(f.compression.record(self.model.cfg.template_spec().grid())),
        })
    }
}

/// Reads the ground truth instead of looking at pixels.
pub struct OracleTracker {
    pub boxes: Vec<BoxN>,
    pub grid: (usize, usize),
    pub template_size: usize,
    pub search_size: usize,
    pub templates: usize,
}

impl TrackingModel for OracleTracker {
    fn template_size(&self) -> usize {
        self.template_size
    }

    fn search_size(&self) -> usize {
        self.search_size
    }

    fn templates(&self) -> usize {
        self.templates
    }

    fn predict(&self, _templates: &[Tensor], _search: &Tensor, ctx: &FrameContext) -> Result<Prediction> {
        let b = ctx.window.box_to_crop(&self.boxes[ctx.frame], ctx.frame_size).clamped();
        let (gh, gw) = self.grid;
        let n = gh * gw;
        let i = ((b.cy * gh as f32).floor() as usize).min(gh - 1);
        let j = ((b.cx * gw as f32).floor() as usize).min(gw - 1);
        let cell = i * gw + j;
        let mut cls = vec![0.0; n];
        cls[cell] = 1.0;
        let mut offset = vec![0.0; 2 * n];
        offset[cell] = b.cx * gw as f32 - j as f32;
        offset[n + cell] = b.cy * gh as f32 - i as f32;
        let mut size = vec![0.0; 2 * n];
        size[cell] = b.w;
        size[n + cell] = b.h;
        Ok(Prediction { maps: HeadMaps::new(self.grid, cls, offset, size)?, record: None })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackStep {
    pub frame: usize,
    pub bbox: BoxN,
    pub score: f32,
    pub iou: f64,
}

#[derive(Clone, Debug)]
pub struct TrackResult {
    pub steps: Vec<TrackStep>,
    /// Compression provenance of the last tracked frame, if any.
    pub last_record: Option<CompressionRecord>,
}

impl TrackResult {
    /// Mean IoU over frames after the given first frame.
    pub fn mean_iou(&self) -> f64 {
        let rest = &self.steps[1.min(self.steps.len())..];
        if rest.is_empty() {
            return 1.0;
        }
        rest.iter().map(|s| s.iou).sum::<f64>() / rest.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,cx,cy,w,h,score,iou\n");
        for t in &self.steps {
            let b = t.bbox;
            s.push_str(&format!("{},{},{},{},{},{},{}\n", t.frame, b.cx, b.cy, b.w, b.h, t.score, t.iou));
        }
        s
    }
}

pub fn template_crop(frame: &Tensor, b: &BoxN, size: usize) -> Tensor {
    let dims = (frame.shape()[1], frame.shape()[2]);
    crop_resize(frame, &CropWindow::around(b, dims, CROP_FACTOR), size)
}

/// Track through every frame. Frame 0 reports the given box; later frames
/// search around the previous estimate and feed confident crops to the bank.
pub fn track_sequence(model: &dyn TrackingModel, scenario: &SyntheticScenario, tau: f32) -> Result<TrackResult> {
    let frame0 = &scenario.frames[0];
    let dims = (frame0.shape()[1], frame0.shape()[2]);
    let init = scenario.boxes[0];
    let mut bank = TemplateBank::new(model.templates(), tau, template_crop(frame0, &init, model.template_size()))?;
    let mut steps = vec![TrackStep { frame: 0, bbox: init, score: 1.0, iou: 1.0 }];
    let mut prev = init;
    let mut last_record = None;
    for (t, frame) in scenario.frames.iter().enumerate().skip(1) {
        let window = CropWindow::around(&prev, dims, CROP_FACTOR);
        let search = crop_resize(frame, &window, model.search_size());
        let ctx = FrameContext { frame: t, window, frame_size: dims };
        let pred = model.predict(&bank.templates(), &search, &ctx)?;
        let (crop_box, score) = decode(&pred.maps);
        let bbox = window.box_to_frame(&crop_box, dims).clamped();
        let iou = bbox.iou(&scenario.boxes[t]);
        if score > tau {
            bank.update(template_crop(frame, &bbox, model.template_size()), score, t);
        }
        steps.push(TrackStep { frame: t, bbox, score, iou });
        prev = bbox;
        last_record = pred.record.or(last_record);
    }
    Ok(TrackResult { steps, last_record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::{generate_scenario, ScenarioSpec};

    #[test]
    fn oracle_on_static_target_is_perfect() {
        let spec = ScenarioSpec {
            seed: 1,
            frames: 8,
            frame_size: 96,
            start: [0.5, 0.4],
            end: [0.5, 0.4],
            size: [0.2, 0.15],
            distractors: 0,
            noise: 0.0,
        };
        let sc = generate_scenario(&spec).unwrap();
        let oracle = OracleTracker { boxes: sc.boxes.clone(), grid: (8, 8), template_size: 32, search_size: 64, templates: 5 };
        let res = track_sequence(&oracle, &sc, 0.7).unwrap();
        assert_eq!(res.steps[0].bbox, sc.boxes[0]);
        assert!(res.steps.iter().all(|s| (s.iou - 1.0).abs() < 1e-5));
    }
}
