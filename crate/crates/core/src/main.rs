use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use etctrack::harness::config::RunConfig;
use etctrack::harness::runner;
use etctrack::{ModelConfig, Result};

#[derive(Parser)]
#[command(name = "etctrack", version, about = "Compress-then-interact multi-frame tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    B224,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model architecture preset used when no config file is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of template tokens kept; 1 disables compression.
    #[arg(long)]
    keep_ratio: Option<f64>,
    /// Number of template frames.
    #[arg(long)]
    templates: Option<usize>,
    /// Confidence threshold for template bank updates.
    #[arg(long)]
    tau: Option<f32>,
    /// Disable the cross-attention stages of the interaction blocks.
    #[arg(long)]
    no_cross_attention: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        match self.preset {
            Some(Preset::Toy) => cfg.model = ModelConfig::toy(),
            Some(Preset::B224) => cfg.model = ModelConfig::b224(),
            None => {}
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.keep_ratio {
            cfg.keep_rate = r;
        }
        if let Some(t) = self.templates {
            cfg.model.templates = t;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if self.no_cross_attention {
            cfg.model.cross_attention = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic task, then evaluate on held-out scenarios.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the number of optimisation steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Track one held-out scenario.
    Track {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; a freshly initialised model is used otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scenario: usize,
    },
    /// Write the analytic MAC report at the configured keep ratio.
    CostReport {
        #[command(flatten)]
        common: Common,
    },
    /// Dump token selection and merge assignments for one template set.
    DumpCompression {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scenario: usize,
    },
    /// Run quick internal consistency checks.
    Selftest,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, steps } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let every = (cfg.train.steps / 20).max(1);
            let summary = runner::run_train(&cfg, &common.out, |step, loss| {
                if step % every == 0 {
                    eprintln!("step {step:>6}  loss {loss:.4}");
                }
            })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Track { common, checkpoint, scenario } => {
            let cfg = common.resolve()?;
            let iou = runner::run_track(&cfg, checkpoint.as_deref(), scenario, &common.out)?;
            println!("mean IoU {iou:.4}");
        }
        Command::CostReport { common } => {
            let cfg = common.resolve()?;
            let s = runner::run_cost_report(&cfg, &common.out)?;
            print!("{}", s.report.to_csv());
            println!("total reduction vs r=1: {:.2}%", 100.0 * s.total_reduction);
        }
        Command::DumpCompression { common, checkpoint, scenario } => {
            let cfg = common.resolve()?;
            let rec = runner::run_dump_compression(&cfg, checkpoint.as_deref(), scenario, &common.out)?;
            println!("kept {} of {} tokens", rec.kept_idx.len(), rec.t * rec.l);
            println!("wrote {}", Path::new(&common.out).join("compression.json").display());
        }
        Command::Selftest => {
            let mut ok = true;
            for (name, pass) in runner::run_selftest() {
                println!("{} {name}", if pass { "PASS" } else { "FAIL" });
                ok &= pass;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
