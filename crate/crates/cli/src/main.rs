use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dml_cli::config::{load_config, parse_override, RunConfig};
use dml_cli::pipeline;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "dml",
    version,
    about = "Doubly robust program evaluation for multi-valued treatments"
)]
struct Cli {
    /// Size of the worker thread pool; defaults to all cores
    /// (RAYON_NUM_THREADS is honored when the flag is absent).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured stage end to end.
    Run(ConfigArgs),
    /// Materialize the data, assign folds, and cross-fit the nuisances.
    FitNuisance(ConfigArgs),
    /// Build scores and the average-effect tables from fitted nuisances.
    Effects(ConfigArgs),
    /// Group average effects along moderators.
    Gate(ConfigArgs),
    /// Per-observation effect learners and their classification analysis.
    Iate(ConfigArgs),
    /// Depth-limited policy trees with cross-validated evaluation.
    Policy(PolicyArgs),
    /// Generate a synthetic benchmark dataset as CSV.
    Synth(SynthArgs),
    /// Audit the estimating equations by Monte Carlo and report pass/fail.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Override any config key; repeatable, later flags win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shortcut for --set seed=...
    #[arg(long)]
    seed: Option<u64>,
    /// Shortcut for --set out=...
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn to_config(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        for raw in &self.set {
            overrides.push(parse_override(raw)?);
        }
        if let Some(seed) = self.seed {
            overrides.push(("seed".to_string(), seed.to_string()));
        }
        if let Some(out) = &self.out {
            overrides.push(("out".to_string(), out.display().to_string()));
        }
        load_config(&self.config, &overrides)
    }
}

#[derive(Args)]
struct PolicyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Restrict this run to a single tree depth.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// three_arm, thin_overlap, constant_effect or policy_region.
    #[arg(long, default_value = "three_arm")]
    design: String,
    #[arg(long, default_value_t = 2_000)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Treatment effect for the constant_effect design.
    #[arg(long, default_value_t = 0.0)]
    effect: f64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the generating truth as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Synthetic design the audit perturbs around.
    #[arg(long, default_value = "three_arm")]
    design: String,
    /// Monte Carlo draws per check.
    #[arg(long = "n-mc", default_value_t = 200_000)]
    n_mc: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }
    match cli.command {
        Command::Run(args) => {
            pipeline::run_pipeline(&args.to_config()?)?;
        }
        Command::FitNuisance(args) => {
            pipeline::run_fit_nuisance(&args.to_config()?)?;
        }
        Command::Effects(args) => {
            pipeline::run_effects(&args.to_config()?)?;
        }
        Command::Gate(args) => {
            pipeline::run_gate(&args.to_config()?)?;
        }
        Command::Iate(args) => {
            pipeline::run_iate(&args.to_config()?)?;
        }
        Command::Policy(args) => {
            let mut config_args = args.config;
            if let Some(depth) = args.depth {
                config_args.set.push(format!("policy_depths={depth}"));
            }
            pipeline::run_policy(&config_args.to_config()?)?;
        }
        Command::Synth(args) => {
            pipeline::run_synth(
                &args.design,
                args.n,
                args.effect,
                args.seed,
                &args.out,
                args.truth.as_deref(),
            )?;
        }
        Command::Verify(args) => {
            let battery =
                pipeline::run_verify(&args.design, args.n_mc, args.seed, args.out.as_deref())?;
            if !battery.all_pass {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
