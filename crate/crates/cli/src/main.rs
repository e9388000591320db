use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use strata::data::RunConfig;
use strata::decode::Schedule;
use strata::harness::pipeline::{self, Rect, RunDir};
use strata::harness::ExperimentReport;
use strata::nar::Level;

#[derive(Parser, Debug)]
#[command(name = "strata", version, about = "Stratified two-level NAR image generation at desk scale")]
struct Cli {
    /// Config file; defaults to <out>/config.txt when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Write per-step decoding audit logs.
    #[arg(long, global = true)]
    trace: bool,
    #[arg(long, global = true)]
    steps_top: Option<usize>,
    #[arg(long, global = true)]
    steps_bottom: Option<usize>,
    #[arg(long, global = true)]
    schedule: Option<Schedule>,
    #[arg(long, global = true)]
    guidance_scale: Option<f32>,
    #[arg(long, global = true)]
    temperature: Option<f32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset into the run directory.
    GenData,
    TrainTokenizer,
    TrainTop,
    TrainBottom,
    /// Write an n×n contact sheet per class.
    Sample {
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    Inpaint {
        #[arg(long)]
        input: PathBuf,
        /// Pixel rectangle to regenerate, as x0,y0,x1,y1.
        #[arg(long)]
        region: Rect,
        #[arg(long)]
        class: usize,
    },
    Transfer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target_class: usize,
        /// Keep only the top tokens inside this rectangle; all are kept by default.
        #[arg(long)]
        keep: Option<Rect>,
    },
    Eval {
        #[arg(long, default_value_t = 16)]
        per_class: usize,
    },
    AblateFusion {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    AblateSteps {
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    AblateSchedule {
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let stored = self.out.join("config.txt");
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None if stored.exists() => RunConfig::load(&stored).with_context(|| format!("loading {}", stored.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps_top {
            cfg.steps_top = v;
        }
        if let Some(v) = self.steps_bottom {
            cfg.steps_bottom = v;
        }
        if let Some(v) = self.schedule {
            cfg.schedule = v;
        }
        if let Some(v) = self.guidance_scale {
            cfg.guidance_scale = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Outcome {
    Done,
    Checked(ExperimentReport),
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = cli.run_config()?;
    let dir = RunDir::new(&cli.out);
    match &cli.command {
        Command::GenData => {
            let n = pipeline::gen_data(&cfg, &dir)?;
            log::info!("wrote {n} images to {}", dir.root().display());
        }
        Command::TrainTokenizer => {
            let every = (cfg.tokenizer_steps / 20).max(1);
            let (_, row) = pipeline::train_tokenizer_stage(&cfg, &dir, |r| {
                if r.step % every == 0 {
                    log::info!("tokenizer step {} loss {:.4}", r.step, r.loss);
                }
            })?;
            println!(
                "tokenizer: ppl top {:.2} bottom {:.2} psnr {:.2}",
                row.ppl_top.unwrap_or(f64::NAN),
                row.ppl_bottom.unwrap_or(f64::NAN),
                row.psnr.unwrap_or(f64::NAN)
            );
        }
        Command::TrainTop | Command::TrainBottom => {
            let level = if matches!(cli.command, Command::TrainTop) { Level::Top } else { Level::Bottom };
            let every = (cfg.transformer_steps / 20).max(1);
            let (_, val_loss) = pipeline::train_level_stage(&cfg, &dir, level, |r| {
                if r.step % every == 0 {
                    log::info!("{level:?} step {} loss {:.4}", r.step, r.loss);
                }
            })?;
            println!("{}: validation loss {val_loss:.4}", level.kind().tag());
        }
        Command::Sample { n } => {
            let out = dir.sub("samples");
            let written = pipeline::sample_stage(&cfg, &dir, &out, *n, cli.trace)?;
            println!("wrote {} sheets to {}", written.len(), out.display());
        }
        Command::Inpaint { input, region, class } => {
            let s = pipeline::inpaint_stage(&cfg, &dir, input, *region, *class, &dir.sub("edit"))?;
            println!("{} (kept {} top, {} bottom tokens)", s.result.display(), s.frozen_top, s.frozen_bottom);
        }
        Command::Transfer { input, target_class, keep } => {
            let s = pipeline::transfer_stage(&cfg, &dir, input, *target_class, *keep, &dir.sub("edit"))?;
            println!("{} (kept {} top, {} bottom tokens)", s.result.display(), s.frozen_top, s.frozen_bottom);
        }
        Command::Eval { per_class } => {
            let report = pipeline::eval_stage(&cfg, &dir, *per_class)?;
            print!("{}", report.to_csv());
        }
        Command::AblateFusion { seeds } => return Ok(Outcome::Checked(pipeline::ablate_fusion(&cfg, &dir, seeds)?)),
        Command::AblateSteps { samples } => return Ok(Outcome::Checked(pipeline::ablate_steps(&cfg, &dir, *samples)?)),
        Command::AblateSchedule { samples } => {
            return Ok(Outcome::Checked(pipeline::ablate_schedule(&cfg, &dir, *samples)?))
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Checked(report)) => {
            print!("{}{}", report.to_csv(), report.summary());
            match report.assertion {
                Some((false, _)) => ExitCode::from(2),
                _ => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
