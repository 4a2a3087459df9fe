//! Thin command-line wrapper over the library: parses flags, resolves the
//! run configuration and dispatches.
//!
//! Environment overrides (lower precedence than flags, higher than
//! defaults): FRICTIONLAB_OUT, FRICTIONLAB_TOL, FRICTIONLAB_SEED,
//! FRICTIONLAB_PARALLEL.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use frictionlab::cli::{self, Command, RunConfig, ScheduleConfig, ThetaSpec, TreeKind};
use frictionlab::counterexample::CxConfig;

#[derive(Parser)]
#[command(
    name = "frictionlab",
    about = "Scenario-tree laboratory for utility maximization under proportional transaction costs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Output directory for report.json and CSV tables (stdout if omitted).
    #[arg(long, global = true, env = "FRICTIONLAB_OUT")]
    out: Option<PathBuf>,
    /// Solver KKT tolerance override.
    #[arg(long, global = true, env = "FRICTIONLAB_TOL")]
    tol: Option<f64>,
    /// Seed recorded in every report and used by seeded generators.
    #[arg(long, global = true, default_value_t = 0, env = "FRICTIONLAB_SEED")]
    seed: u64,
    /// Worker threads; results are identical for any value.
    #[arg(long, global = true, env = "FRICTIONLAB_PARALLEL")]
    parallel: Option<usize>,
}

#[derive(Args)]
struct MarketArgs {
    /// Market JSON file.
    #[arg(long)]
    market: PathBuf,
    /// Utility: log | crra:<gamma>.
    #[arg(long, default_value = "log")]
    utility: String,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Schedule file (JSON or TOML) with keys a, b, kappa, theta, N.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Endowment perturbation coefficient (overrides the file).
    #[arg(long)]
    a: Option<f64>,
    /// Dual-argument perturbation coefficient.
    #[arg(long)]
    b: Option<f64>,
    /// Utility perturbation coefficient.
    #[arg(long)]
    kappa: Option<f64>,
    /// Uniform measure-tilt magnitude per non-leaf node.
    #[arg(long)]
    theta: Option<f64>,
    /// Schedule length.
    #[arg(long, short = 'n')]
    steps: Option<u32>,
}

impl ScheduleArgs {
    fn resolve(&self) -> Result<ScheduleConfig, frictionlab::Error> {
        let mut config = match &self.schedule {
            Some(path) => ScheduleConfig::load(path)?,
            None => ScheduleConfig {
                a: 0.2,
                b: 0.2,
                kappa: 0.5,
                theta: ThetaSpec::Scalar(0.3),
                steps: 10,
            },
        };
        if let Some(a) = self.a {
            config.a = a;
        }
        if let Some(b) = self.b {
            config.b = b;
        }
        if let Some(kappa) = self.kappa {
            config.kappa = kappa;
        }
        if let Some(theta) = self.theta {
            config.theta = ThetaSpec::Scalar(theta);
        }
        if let Some(steps) = self.steps {
            config.steps = steps;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a market file.
    GenTree {
        /// binomial | trinomial | random.
        #[arg(long, default_value = "random")]
        kind: String,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        /// Maximum branching (random trees).
        #[arg(long, default_value_t = 3)]
        branching: usize,
        /// One-step log-price volatility.
        #[arg(long, default_value_t = 0.25)]
        vol: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        /// Output market file.
        #[arg(long)]
        out_file: PathBuf,
    },
    /// Maximize expected utility of terminal wealth.
    SolvePrimal {
        #[command(flatten)]
        market: MarketArgs,
        #[arg(long, default_value_t = 1.0)]
        x: f64,
    },
    /// Minimize the conjugate objective over consistent price systems.
    SolveDual {
        #[command(flatten)]
        market: MarketArgs,
        #[arg(long, default_value_t = 1.0)]
        y: f64,
    },
    /// Verify every identity of the duality theorem.
    VerifyDuality {
        #[command(flatten)]
        market: MarketArgs,
        #[arg(long, default_value_t = 1.0)]
        x: f64,
    },
    /// Extract the shadow price and re-solve frictionlessly.
    Shadow {
        #[command(flatten)]
        market: MarketArgs,
        #[arg(long, default_value_t = 1.0)]
        x: f64,
    },
    /// Static or dynamic stability experiment.
    Stability {
        /// static | dynamic.
        mode: String,
        #[command(flatten)]
        market: MarketArgs,
        #[arg(long, default_value_t = 1.0)]
        x: f64,
        #[arg(long, default_value_t = 1.0)]
        y: f64,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Monte-Carlo reconstruction of the dual non-uniqueness example.
    Counterexample {
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Lattice steps dividing the log upper barrier.
        #[arg(long, default_value_t = 40)]
        m: u32,
        /// Step cap per path.
        #[arg(long, default_value_t = 200_000)]
        depth: u64,
        #[arg(long, default_value_t = 1e-3)]
        eps_low: f64,
        #[arg(long, default_value_t = 100_000)]
        paths: u64,
        #[arg(long, default_value_t = 1.0)]
        x: f64,
        /// Dump the first N paths to paths.csv (requires --out).
        #[arg(long, default_value_t = 0)]
        dump_paths: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match build_command(&cli) {
        Ok(command) => command,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    };
    let config = RunConfig {
        command,
        out_dir: cli.out,
        tol: cli.tol,
        seed: cli.seed,
        parallel: cli.parallel,
    };
    ExitCode::from(cli::run(&config) as u8)
}

fn build_command(cli: &Cli) -> Result<Command, frictionlab::Error> {
    Ok(match &cli.command {
        Cmd::GenTree {
            kind,
            depth,
            branching,
            vol,
            lambda,
            out_file,
        } => Command::GenTree {
            kind: kind.parse::<TreeKind>()?,
            depth: *depth,
            branching: *branching,
            vol: *vol,
            lambda: *lambda,
            out: out_file.clone(),
        },
        Cmd::SolvePrimal { market, x } => Command::SolvePrimal {
            market: market.market.clone(),
            utility: market.utility.clone(),
            x: *x,
        },
        Cmd::SolveDual { market, y } => Command::SolveDual {
            market: market.market.clone(),
            utility: market.utility.clone(),
            y: *y,
        },
        Cmd::VerifyDuality { market, x } => Command::VerifyDuality {
            market: market.market.clone(),
            utility: market.utility.clone(),
            x: *x,
        },
        Cmd::Shadow { market, x } => Command::Shadow {
            market: market.market.clone(),
            utility: market.utility.clone(),
            x: *x,
        },
        Cmd::Stability {
            mode,
            market,
            x,
            y,
            schedule,
        } => {
            let schedule = schedule.resolve()?;
            match mode.as_str() {
                "static" => Command::StabilityStatic {
                    market: market.market.clone(),
                    utility: market.utility.clone(),
                    x: *x,
                    y: *y,
                    schedule,
                },
                "dynamic" => Command::StabilityDynamic {
                    market: market.market.clone(),
                    utility: market.utility.clone(),
                    x: *x,
                    y: *y,
                    schedule,
                },
                other => {
                    return Err(frictionlab::Error::Config(format!(
                        "unknown stability mode '{other}'; expected static | dynamic"
                    )))
                }
            }
        }
        Cmd::Counterexample {
            lambda,
            delta,
            m,
            depth,
            eps_low,
            paths,
            x,
            dump_paths,
        } => Command::Counterexample {
            config: CxConfig {
                lambda: *lambda,
                delta: *delta,
                grid_steps: *m,
                depth_cap: *depth,
                eps_low: *eps_low,
                paths: *paths,
                seed: cli.seed,
            },
            x: *x,
            dump_paths: *dump_paths,
        },
    })
}
