//! End-to-end checks of training, tracking and the command-line tool.

use std::path::Path;
use std::process::Command;

use etctrack::atc::MergePlan;
use etctrack::autodiff::Graph;
use etctrack::harness::config::RunConfig;
use etctrack::harness::scenario::{generate_scenario, ScenarioSpec};
use etctrack::harness::track::{track_sequence, FrameContext, ModelTracker, OracleTracker, Prediction, TrackingModel};
use etctrack::harness::train::{sample, train_toy};
use etctrack::head::NormMode;
use etctrack::losses::total_loss;
use etctrack::optim::Adam;
use etctrack::{Error, Etctrack, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 4;
    cfg.train.warmup = 2;
    cfg.eval_scenarios = 1;
    cfg.scenario.frames = 8;
    cfg
}

fn static_spec() -> ScenarioSpec {
    ScenarioSpec {
        seed: 3,
        frames: 6,
        frame_size: 128,
        start: [0.45, 0.55],
        end: [0.45, 0.55],
        size: [0.18, 0.16],
        distractors: 0,
        noise: 0.0,
    }
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let cfg = quick_config();
    let mut model = Etctrack::new(cfg.model.clone(), 5).unwrap();
    let batch = sample(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut opt = Adam::new(cfg.train.adam);
    let mut losses = Vec::new();
    for _ in 0..3 {
        let mut g = Graph::new();
        let mut stats = Vec::new();
        let comp = model.compress_templates(&mut g, &batch.templates, cfg.keep_rate).unwrap();
        let (search, target) = &batch.searches[0];
        let out = model.search_forward(&mut g, &comp, search, &mut NormMode::Train(&mut stats)).unwrap();
        let loss = total_loss(&mut g, &out, target, &cfg.train.loss).unwrap().total;
        losses.push(g.value(loss).data()[0]);
        let grads = g.backward(loss).unwrap().params(&g);
        opt.step(&mut model.store, &grads, 0.0);
    }
    assert!(losses.iter().all(|l| l.to_bits() == losses[0].to_bits()), "{losses:?}");
}

#[test]
fn non_finite_parameter_aborts_at_step_zero() {
    let cfg = quick_config();
    let mut model = Etctrack::new(cfg.model.clone(), 1).unwrap();
    let id = model.store.id("head.cls.out.w").unwrap();
    model.store.get_mut(id).data_mut()[0] = f32::NAN;
    match train_toy(&mut model, &cfg, |_, _| {}) {
        Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 0),
        other => panic!("expected a non-finite loss abort, got {other:?}"),
    }
}

#[test]
fn oracle_tracker_is_exact_on_static_target() {
    let sc = generate_scenario(&static_spec()).unwrap();
    let oracle = OracleTracker { boxes: sc.boxes.clone(), grid: (8, 8), template_size: 32, search_size: 64, templates: 5 };
    let res = track_sequence(&oracle, &sc, 0.7).unwrap();
    assert_eq!(res.steps[0].bbox, sc.boxes[0]);
    for s in &res.steps {
        assert!((s.iou - 1.0).abs() < 1e-5, "frame {} iou {}", s.frame, s.iou);
    }
}

/// Runs scoring and partitioning at its keep rate, then discards the merge.
struct NoMergeTracker<'a> {
    model: &'a Etctrack,
    keep_rate: f64,
}

impl TrackingModel for NoMergeTracker<'_> {
    fn template_size(&self) -> usize {
        self.model.cfg.template_size
    }

    fn search_size(&self) -> usize {
        self.model.cfg.search_size
    }

    fn templates(&self) -> usize {
        self.model.cfg.templates
    }

    fn predict(&self, templates: &[Tensor], search: &Tensor, _ctx: &FrameContext) -> etctrack::Result<Prediction> {
        let mut g = Graph::new();
        let mut comp = self.model.compress_templates(&mut g, templates, self.keep_rate)?;
        comp.compressed = comp.context;
        comp.plan = MergePlan::identity(comp.frames * comp.per_frame);
        let head = self.model.search_forward(&mut g, &comp, search, &mut NormMode::Eval)?;
        Ok(Prediction { maps: head.maps(&g), record: None })
    }
}

#[test]
fn keep_rate_only_acts_through_the_merge() {
    let cfg = quick_config();
    let model = Etctrack::new(cfg.model.clone(), 2).unwrap();
    let mut spec = static_spec();
    spec.end = [0.55, 0.5];
    spec.distractors = 1;
    spec.noise = 0.05;
    let sc = generate_scenario(&spec).unwrap();
    let stub = |r| track_sequence(&NoMergeTracker { model: &model, keep_rate: r }, &sc, 0.0).unwrap().to_csv();
    assert_eq!(stub(0.9), stub(1.0));
    let real = |r| track_sequence(&ModelTracker { model: &model, keep_rate: r }, &sc, 0.0).unwrap();
    let (a, b) = (real(0.9), real(1.0));
    assert!(a.steps.iter().zip(&b.steps).skip(1).any(|(x, y)| x.score != y.score));
}

#[test]
fn compression_is_deterministic() {
    let cfg = quick_config();
    let model = Etctrack::new(cfg.model.clone(), 4).unwrap();
    let batch = sample(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let run = || {
        let mut g = Graph::new();
        let c = model.compress_templates(&mut g, &batch.templates, 0.6).unwrap();
        (g.value(c.compressed).clone(), c.plan, c.scores)
    };
    assert_eq!(run(), run());
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_etctrack")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.json");
    let cfg = quick_config();
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn cli_train_track_and_dump_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = cli(&["train", "--config", &config, "--steps", "3", "--out", out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,loss"));
    assert_eq!(loss.lines().count(), 4);
    let traj = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next(), Some("frame,cx,cy,w,h,score,iou"));
    assert_eq!(traj.lines().count(), 9);
    for f in ["compression.json", "checkpoint/manifest.json", "summary.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let ckpt = out.join("checkpoint");
    let track_out = dir.path().join("track");
    let o = cli(&[
        "track",
        "--config",
        &config,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        track_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(track_out.join("trajectory.csv").is_file());

    let dump_out = dir.path().join("dump");
    let o = cli(&["dump-compression", "--config", &config, "--keep-ratio", "0.4", "--out", dump_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dump_out.join("compression.json")).unwrap()).unwrap();
    let total = rec["T"].as_u64().unwrap() * rec["L"].as_u64().unwrap();
    assert_eq!(rec["kept_idx"].as_array().unwrap().len() as u64, (0.4 * total as f64).floor() as u64);
}

#[test]
fn cli_cost_report_and_selftest() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["cost-report", "--preset", "b224", "--keep-ratio", "0.4", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("component,macs,tokens,r"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cost.json")).unwrap()).unwrap();
    assert!(json.is_object());
    assert!(cli(&["selftest"]).status.success());
}

#[test]
fn cli_exit_codes_by_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let code = |args: &[&str]| cli(args).status.code();
    assert_eq!(code(&["cost-report", "--keep-ratio", "1.5", "--out", out]), Some(2));
    assert_eq!(code(&["cost-report", "--tau", "-0.1", "--out", out]), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&["cost-report", "--config", bad.to_str().unwrap(), "--out", out]), Some(4));
    std::fs::write(&bad, r#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(code(&["cost-report", "--config", bad.to_str().unwrap(), "--out", out]), Some(4));
    let missing = dir.path().join("absent.json");
    assert_eq!(code(&["cost-report", "--config", missing.to_str().unwrap(), "--out", out]), Some(5));
    assert_eq!(code(&["no-such-command"]), Some(2));
}
