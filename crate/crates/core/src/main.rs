use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use snn_core::cli::{self, GradcheckOptions};
use snn_core::config::{RunConfig, SEED_ENV};
use snn_core::surrogate::SgFamily;
use snn_core::verify::SweepConfig;
use snn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "snn", version, about = "Spiking network training with adaptive surrogate gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write config echo, metrics, summary and checkpoints.
    Train(TrainArgs),
    /// Sweep random normalization and neuron parameters against the predicted distributions.
    Verify(VerifyArgs),
    /// Check STBP gradients against the finite-difference and brute-force oracles.
    Gradcheck(GradcheckArgs),
    /// Report AC/MAC energy for a run, or reproduce the published energy table.
    Energy(EnergyArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    timesteps: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    sg_family: Option<String>,
    #[arg(long, value_name = "BOOL")]
    adaptive_sg: Option<String>,
    #[arg(long, value_name = "BOOL")]
    trainable_decay: Option<String>,
    #[arg(long)]
    kappa: Option<String>,
    #[arg(long, value_name = "BOOL")]
    detach_reset: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    draws: usize,
    /// Elements per timestep in each draw.
    #[arg(long, default_value_t = snn_core::verify::MIN_POWERED_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.5])]
    taus: Vec<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameters per finite-difference case.
    #[arg(long, default_value_t = 40)]
    picks: usize,
    /// Brute-force instances.
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value = "rectangular")]
    sg_family: String,
    /// Check the mode without the reset-path gradient.
    #[arg(long)]
    detach_reset: bool,
}

#[derive(Args)]
struct EnergyArgs {
    /// Recompute the published energy column from its operation counts.
    #[arg(long)]
    table3_mode: bool,
    /// Run directory: architecture from its config echo, rates from its metrics.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Config file naming the architecture (instead of --run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-layer firing rates, comma-separated (overrides the run's metrics).
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = [
        ("epochs", &a.epochs),
        ("timesteps", &a.timesteps),
        ("arch", &a.arch),
        ("sg_family", &a.sg_family),
        ("adaptive_sg", &a.adaptive_sg),
        ("trainable_decay", &a.trainable_decay),
        ("kappa", &a.kappa),
        ("detach_reset", &a.detach_reset),
        ("out", &a.out),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v).map_err(|e| Error::InvalidArgument(format!("--{}: {e}", key.replace('_', "-"))))?;
        }
    }
    cfg.validate()?;
    let env = std::env::var(SEED_ENV).ok();
    cfg.seed = Some(cfg.resolve_seed(a.seed, env.as_deref())?);
    cli::cmd_train(&cfg, out)?;
    Ok(true)
}

fn energy(a: EnergyArgs, out: &mut dyn Write) -> Result<bool> {
    if a.table3_mode {
        write!(out, "{}", cli::render_table3(&cli::table3_lines()))?;
        return Ok(true);
    }
    let cfg = match (&a.run, &a.config) {
        (Some(dir), _) => RunConfig::load(&dir.join(cli::CONFIG_FILE))?,
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => return Err(Error::InvalidArgument("energy needs --table3-mode, --run DIR or --config PATH".into())),
    };
    let rates = match (a.rates, &a.run) {
        (Some(r), _) => r,
        (None, Some(dir)) => cli::rates_from_metrics(&std::fs::read_to_string(dir.join(cli::METRICS_FILE)).map_err(|e| {
            Error::InvalidArgument(format!("missing firing rates: {}: {e}", dir.join(cli::METRICS_FILE).display()))
        })?)?,
        (None, None) => return Err(Error::InvalidArgument("missing firing rates: pass --rates or --run".into())),
    };
    let (report, ann) = cli::energy_for(&cfg, &rates)?;
    writeln!(out, "energy: arch={} timesteps={} rates={rates:?}", cfg.arch, cfg.train.timesteps)?;
    write!(out, "{}", cli::render_energy(&report, &ann))?;
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train(a) => train(a, &mut out),
        Command::Verify(a) => {
            let cfg = SweepConfig { seed: a.seed, draws: a.draws, samples: a.samples, steps: a.steps, taus: a.taus, ..SweepConfig::default() };
            cli::cmd_verify(&cfg, &mut out)
        }
        Command::Gradcheck(a) => {
            let family: SgFamily = a.sg_family.parse()?;
            let opts = GradcheckOptions { seed: a.seed, picks: a.picks, instances: a.instances, family, detach_reset: a.detach_reset };
            cli::cmd_gradcheck(&opts, &mut out)
        }
        Command::Energy(a) => energy(a, &mut out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
