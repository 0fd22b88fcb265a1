use clap::{Parser, Subcommand, ValueEnum};
use mcsh::allocator::CostKind;
use mcsh::pipeline::{stages, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mcsh",
    about = "Mixed-precision expert quantization and online expert pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(clap::Args)]
struct Opts {
    /// Run configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory shared by all stages.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed; every named seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    b_avg: Option<f64>,
    #[arg(long, global = true)]
    cost_kind: Option<CostKind>,
    /// Sparsity weight for router training.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Evaluate with trained routers.
    #[arg(long, global = true)]
    otp: Option<Toggle>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum Command {
    /// Train the synthetic teacher model.
    Gen,
    /// Expert statistics and quantization error table.
    Calibrate,
    /// Per-expert bit widths.
    Allocate,
    /// Pack the model at the allocated widths.
    Quantize,
    /// Train the online pruning routers.
    TrainRouter,
    /// Held-out loss and size accounting.
    Eval,
    /// CSV and JSON summary of the last evaluation.
    Report,
    /// Every cost kind across the sweep budgets.
    Sweep,
}

fn build_config(o: &Opts) -> mcsh::Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(p) = &o.out {
        cfg.out_dir = p.clone();
    }
    if let Some(b) = o.b_avg {
        cfg.b_avg = b;
    }
    if let Some(k) = o.cost_kind {
        cfg.cost_kind = k;
    }
    if let Some(l) = o.lambda {
        cfg.otp.lambda = l;
    }
    if let Some(t) = o.otp {
        cfg.otp_enabled = matches!(t, Toggle::On);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> mcsh::Result<()> {
    let cfg = build_config(&cli.opts)?;
    log::info!("stage {:?}, output {}", cli.command, cfg.out_dir.display());
    match cli.command {
        Command::Gen => stages::cmd_gen(&cfg),
        Command::Calibrate => stages::cmd_calibrate(&cfg),
        Command::Allocate => stages::cmd_allocate(&cfg),
        Command::Quantize => stages::cmd_quantize(&cfg),
        Command::TrainRouter => stages::cmd_train_router(&cfg),
        Command::Eval => stages::cmd_eval(&cfg),
        Command::Report => stages::cmd_report(&cfg),
        Command::Sweep => stages::cmd_sweep(&cfg),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
