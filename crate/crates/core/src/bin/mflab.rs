use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mflab::cli::{self, CliError, Overrides};

#[derive(Parser)]
#[command(name = "mflab", version, about = "Wasserstein gradient flow experiments for mean-field neural ODEs")]
struct Args {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, out: self.out.clone() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the flow and write trace, snapshots and report.
    Run(Common),
    /// Compare the adjoint gradient with central differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Add this constant to every adjoint entry before comparing.
        #[arg(long)]
        perturb_gradient: Option<f64>,
    },
    /// Check the exact W2 solver against brute force on random instances.
    W2Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
    /// Fit J*, the Łojasiewicz pair and the rate branch on a trace.csv.
    RateFit {
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = mflab::analysis::DEFAULT_GAP_FLOOR)]
        gap_floor: f64,
        #[arg(long, default_value_t = mflab::analysis::DEFAULT_TAIL_FRACTION)]
        tail_fraction: f64,
    },
    /// Measure the Lipschitz ratio of dJ/dτ along random generalized geodesics.
    ConvexityProbe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        geodesics: usize,
        /// Seed for the geodesic anchors (default: the config seed).
        #[arg(long)]
        probe_seed: Option<u64>,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(c) => {
            let s = cli::cmd_run(&c.config, &c.overrides())?;
            println!("{} steps, stop: {:?}, output in {}", s.trace.steps, s.trace.stop, s.out_dir.display());
        }
        Command::GradCheck { common, perturb_gradient } => {
            let s = cli::cmd_grad_check(&common.config, &common.overrides(), perturb_gradient)?;
            println!("{} coordinates, max relative error {:.3e}", s.coordinates, s.max_rel_error);
        }
        Command::W2Selftest { seed, instances } => {
            let s = cli::cmd_w2_selftest(seed, instances)?;
            println!("{} instances, max |exact - brute force| {:.3e}", s.instances, s.max_abs_diff);
        }
        Command::RateFit { trace, out, gap_floor, tail_fraction } => {
            let dir = out.unwrap_or_else(|| trace.parent().map(PathBuf::from).unwrap_or_default());
            let report = cli::cmd_rate_fit(&trace, &dir, gap_floor, tail_fraction)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
        }
        Command::ConvexityProbe { common, geodesics, probe_seed } => {
            let s = cli::cmd_convexity_probe(&common.config, &common.overrides(), geodesics, probe_seed)?;
            println!("{} geodesics, max Lipschitz ratio {:.4}, min curvature estimate {:.4}", s.geodesics, s.max_ratio, s.min_lambda_est);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("mflab: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mflab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
