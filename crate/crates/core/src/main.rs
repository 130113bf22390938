use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pfd::checkpoint::Checkpoint;
use pfd::harness::{emit_report, render_summary, run_probe_suite, run_training, stream, ExperimentConfig, Preset, ProbeName};
use pfd::pfd::PfdModel;
use pfd::sampler::measure_latency;
use pfd::world::make_dataset;

#[derive(Parser)]
#[command(name = "pfd", about = "Privileged foresight distillation on a synthetic hidden-goal world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Suite seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fine-tuning steps per run.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Base settings when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Fast,
    PaperRatio,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Fast => Preset::Fast,
            PresetArg::PaperRatio => Preset::PaperRatio,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset for the first seed.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured probe on every seed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the probe suite and write the report.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of probes.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Time inference with and without the adapter.
    BenchLatency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        num_steps: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Print the effective configuration.
    ShowConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load(cli: &Cli, path: Option<&PathBuf>) -> pfd::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(cli.preset.into()),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.steps {
        cfg.train.steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> pfd::Result<()> {
    match &cli.command {
        Command::GenData { config, out } => {
            let cfg = load(cli, config.as_ref())?;
            let data = make_dataset(&cfg.world, cfg.train.dataset_size, &mut stream(cfg.seed, "data", cfg.seeds[0]))?;
            data.save(out)?;
            println!("wrote {} train / {} eval trajectories to {}", data.train.len(), data.eval.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg = load(cli, config.as_ref())?;
            let result = run_training(&cfg, Some(out))?;
            emit_report(std::slice::from_ref(&result), out)?;
            print!("{}", render_summary(&[result]));
        }
        Command::Probe { config, out, only } => {
            let mut cfg = load(cli, config.as_ref())?;
            if !only.is_empty() {
                cfg.probes = only.iter().map(|s| ProbeName::parse(s)).collect::<pfd::Result<_>>()?;
            }
            let results = run_probe_suite(&cfg, Some(out), |r| {
                eprintln!(
                    "{} seed {}: eval_mse {:.6} success {:.3}",
                    r.config, r.seed, r.eval_mse, r.success_rate
                );
            })?;
            print!("{}", render_summary(&results));
        }
        Command::BenchLatency {
            checkpoint,
            num_steps,
            warmup,
            trials,
        } => {
            let model = PfdModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let frame_dim = model.backbone.dims().frame_dim;
            let frame = pfd::flow::gaussian_like(&[1, frame_dim], &mut stream(0, "latency", 0));
            let report = measure_latency(&model, &frame, *num_steps, *warmup, *trials, false)?;
            print!("{}", report.render());
        }
        Command::ShowConfig { config } => {
            print!("{}", load(cli, config.as_ref())?.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
