//! Command surface shared by the `frictionlab` binary: market generation,
//! solves, verification suites, stability experiments and the
//! counterexample run, with JSON reports and CSV tables.
//!
//! Exit codes: 0 all checks passed, 1 a check failed (including dual
//! infeasibility, which carries its certificate in the report), 2 input
//! error, 3 solver non-convergence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::barrier::SolveOptions;
use crate::counterexample::{dump_paths, run_counterexample, CxConfig};
use crate::dual::solve_dual;
use crate::duality::{
    extract_shadow, verify_duality, verify_shadow, DualityTolerances,
};
use crate::error::{Error, Result};
use crate::generate;
use crate::io::{load_market, save_market};
use crate::market::Market;
use crate::preferences::UtilitySpec;
use crate::primal::solve_primal;
use crate::report::Check;
use crate::stability::{run_dynamic, run_static, shadow_stability, PerturbationSchedule};

/// Tree generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeKind {
    Binomial,
    Trinomial,
    Random,
}

impl std::str::FromStr for TreeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binomial" => Ok(Self::Binomial),
            "trinomial" => Ok(Self::Trinomial),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!(
                "unknown tree kind '{other}'; expected binomial | trinomial | random"
            ))),
        }
    }
}

/// Schedule configuration file keys (JSON or TOML by extension).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub a: f64,
    pub b: f64,
    pub kappa: f64,
    /// Scalar applied uniformly per non-leaf node, or one value per node.
    pub theta: ThetaSpec,
    #[serde(rename = "N")]
    pub steps: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScheduleConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().map(|e| e == "toml").unwrap_or(false) {
            Ok(toml::from_str(&data)?)
        } else {
            Ok(serde_json::from_str(&data)?)
        }
    }

    pub fn theta_vector(&self, market: &Market) -> Vec<f64> {
        let k = market.tree().non_leaves().len();
        match &self.theta {
            ThetaSpec::Scalar(t) => vec![*t; k],
            ThetaSpec::Vector(v) => {
                let mut out = v.clone();
                out.resize(k, 0.0);
                out
            }
        }
    }
}

/// A fully resolved invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    /// Output directory for report.json and CSV tables; reports go to
    /// stdout when absent.
    pub out_dir: Option<PathBuf>,
    /// Override of the solver KKT tolerance.
    pub tol: Option<f64>,
    pub seed: u64,
    /// Rayon thread count; results do not depend on it.
    pub parallel: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Command {
    GenTree {
        kind: TreeKind,
        depth: usize,
        branching: usize,
        vol: f64,
        lambda: f64,
        out: PathBuf,
    },
    SolvePrimal {
        market: PathBuf,
        utility: String,
        x: f64,
    },
    SolveDual {
        market: PathBuf,
        utility: String,
        y: f64,
    },
    VerifyDuality {
        market: PathBuf,
        utility: String,
        x: f64,
    },
    Shadow {
        market: PathBuf,
        utility: String,
        x: f64,
    },
    StabilityStatic {
        market: PathBuf,
        utility: String,
        x: f64,
        y: f64,
        schedule: ScheduleConfig,
    },
    StabilityDynamic {
        market: PathBuf,
        utility: String,
        x: f64,
        y: f64,
        schedule: ScheduleConfig,
    },
    Counterexample {
        config: CxConfig,
        x: f64,
        /// Rows of the optional per-path dump (0 disables).
        dump_paths: u64,
    },
}

/// Report envelope written by every subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub payload: serde_json::Value,
}

fn write_report(report: &RunReport, out_dir: Option<&Path>) -> Result<()> {
    let pretty = serde_json::to_string_pretty(report)?;
    match out_dir {
        None => println!("{pretty}"),
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("report.json"), pretty + "\n")?;
        }
    }
    Ok(())
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Config(format!("csv serialization failed: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Config(format!("csv flush failed: {e}")))?;
    Ok(())
}

fn solve_options(config: &RunConfig) -> SolveOptions {
    let mut opts = SolveOptions::default();
    if let Some(tol) = config.tol {
        opts.tol = tol;
    }
    opts
}

fn utility(spec: &str) -> Result<UtilitySpec> {
    spec.parse()
}

/// Dispatches a resolved configuration. Returns the process exit code.
pub fn run(config: &RunConfig) -> i32 {
    if let Some(threads) = config.parallel {
        // ignore failure: the global pool may already exist in-process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match execute(config) {
        Ok(pass) => {
            if pass {
                0
            } else {
                1
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn execute(config: &RunConfig) -> Result<bool> {
    let opts = solve_options(config);
    let config_value = serde_json::to_value(config)?;
    match &config.command {
        Command::GenTree {
            kind,
            depth,
            branching,
            vol,
            lambda,
            out,
        } => {
            let market = match kind {
                TreeKind::Binomial => generate::binomial_market(*depth, *vol, 0.5, *lambda)?,
                TreeKind::Trinomial => generate::trinomial_market(*depth, *vol, *lambda)?,
                TreeKind::Random => {
                    generate::random_market(*depth, *branching, *vol, *lambda, config.seed)?
                }
            };
            save_market(&market, out)?;
            // flag infeasible instances instead of failing generation
            let feasible = if market.lambda() > 0.0 {
                solve_dual(&market, &UtilitySpec::log(), 1.0, &opts).is_ok()
            } else {
                true
            };
            if !feasible {
                eprintln!(
                    "warning: generated market admits no consistent price system"
                );
            }
            let report = RunReport {
                command: "gen-tree".into(),
                seed: config.seed,
                config: config_value,
                pass: true,
                checks: vec![],
                payload: json!({
                    "out": out,
                    "nodes": market.tree().len(),
                    "leaves": market.tree().leaves().len(),
                    "cps_feasible": feasible,
                }),
            };
            write_report(&report, config.out_dir.as_deref())?;
            Ok(true)
        }
        Command::SolvePrimal { market, utility: u, x } => {
            let market = load_market(market)?;
            let spec = utility(u)?;
            let sol = solve_primal(&market, &spec, *x, &opts)?;
            let report = RunReport {
                command: "solve-primal".into(),
                seed: config.seed,
                config: config_value,
                pass: true,
                checks: vec![],
                payload: serde_json::to_value(&sol)?,
            };
            write_report(&report, config.out_dir.as_deref())?;
            Ok(true)
        }
        Command::SolveDual { market, utility: u, y } => {
            let market = load_market(market)?;
            let spec = utility(u)?;
            match solve_dual(&market, &spec, *y, &opts) {
                Ok(sol) => {
                    let report = RunReport {
                        command: "solve-dual".into(),
                        seed: config.seed,
                        config: config_value,
                        pass: true,
                        checks: vec![],
                        payload: serde_json::to_value(&sol)?,
                    };
                    write_report(&report, config.out_dir.as_deref())?;
                    Ok(true)
                }
                Err(err @ Error::Infeasible { .. }) => {
                    let report = RunReport {
                        command: "solve-dual".into(),
                        seed: config.seed,
                        config: config_value,
                        pass: false,
                        checks: vec![Check::new("cps_feasible", 1.0, 0.0)],
                        payload: json!({ "infeasibility_certificate": err.to_string() }),
                    };
                    write_report(&report, config.out_dir.as_deref())?;
                    Ok(false)
                }
                Err(other) => Err(other),
            }
        }
        Command::VerifyDuality { market, utility: u, x } => {
            let market = load_market(market)?;
            let spec = utility(u)?;
            match verify_duality(&market, &spec, *x, &DualityTolerances::default(), &opts) {
                Ok(result) => {
                    let pass = result.pass;
                    let report = RunReport {
                        command: "verify-duality".into(),
                        seed: config.seed,
                        config: config_value,
                        pass,
                        checks: result.checks.clone(),
                        payload: serde_json::to_value(&result)?,
                    };
                    write_report(&report, config.out_dir.as_deref())?;
                    Ok(pass)
                }
                Err(err @ Error::Infeasible { .. }) => {
                    let report = RunReport {
                        command: "verify-duality".into(),
                        seed: config.seed,
                        config: config_value,
                        pass: false,
                        checks: vec![Check::new("cps_feasible", 1.0, 0.0)],
                        payload: json!({ "infeasibility_certificate": err.to_string() }),
                    };
                    write_report(&report, config.out_dir.as_deref())?;
                    Ok(false)
                }
                Err(other) => Err(other),
            }
        }
        Command::Shadow { market, utility: u, x } => {
            let market = load_market(market)?;
            let spec = utility(u)?;
            let primal = solve_primal(&market, &spec, *x, &opts)?;
            let dual = solve_dual(&market, &spec, primal.marginal_value, &opts)?;
            let shadow = extract_shadow(&market, &dual)?;
            let result = verify_shadow(&market, &spec, *x, &shadow, 1e-5, 1e-4, &opts)?;
            let pass = result.pass;
            let report = RunReport {
                command: "shadow".into(),
                seed: config.seed,
                config: config_value,
                pass,
                checks: result.checks.clone(),
                payload: json!({
                    "selector": shadow.values,
                    "source_y": shadow.source_y,
                    "verification": serde_json::to_value(&result)?,
                }),
            };
            write_report(&report, config.out_dir.as_deref())?;
            Ok(pass)
        }
        Command::StabilityStatic {
            market,
            utility: u,
            x,
            y,
            schedule,
        } => {
            let market = load_market(market)?;
            let spec = utility(u)?;
            let plan = PerturbationSchedule {
                x: *x,
                y: *y,
                spec,
                a: schedule.a,
                b: schedule.b,
                kappa: schedule.kappa,
                theta: schedule.theta_vector(&market),
                steps: schedule.steps,
            };
            let result = run_static(&market, &plan, &opts)?;
            if let Some(dir) = config.out_dir.as_deref() {
                std::fs::create_dir_all(dir)?;
                write_csv(&result.rows, &dir.join("static_rows.csv"))?;
            }
            let pass = result.pass;
            let report = RunReport {
                command: "stability-static".into(),
                seed: config.seed,
                config: config_value,
                pass,
                checks: result.checks.clone(),
                payload: serde_json::to_value(&result)?,
            };
            write_report(&report, config.out_dir.as_deref())?;
            Ok(pass)
        }
        Command::StabilityDynamic {
            market,
            utility: u,
            x,
            y,
            schedule,
        } => {
            let market = load_market(market)?;
            let spec = utility(u)?;
            let plan = PerturbationSchedule {
                x: *x,
                y: *y,
                spec,
                a: schedule.a,
                b: schedule.b,
                kappa: schedule.kappa,
                theta: schedule.theta_vector(&market),
                steps: schedule.steps,
            };
            let dynamic = run_dynamic(&market, &plan, &opts)?;
            let shadows = shadow_stability(&market, &plan, &opts)?;
            if let Some(dir) = config.out_dir.as_deref() {
                std::fs::create_dir_all(dir)?;
                write_csv(&dynamic.rows, &dir.join("dynamic_rows.csv"))?;
            }
            let mut checks = dynamic.checks.clone();
            checks.extend(shadows.checks.iter().cloned());
            let pass = dynamic.pass && shadows.pass;
            let report = RunReport {
                command: "stability-dynamic".into(),
                seed: config.seed,
                config: config_value,
                pass,
                checks,
                payload: json!({
                    "dynamic": {
                        "rows": dynamic.rows,
                        "cesaro_cauchy_last": dynamic.cesaro_cauchy_last,
                        "cesaro_cauchy_half": dynamic.cesaro_cauchy_half,
                        "limit_objective_gap": dynamic.limit_objective_gap,
                        "limit_is_deflator": dynamic.limit_is_deflator,
                    },
                    "shadow": serde_json::to_value(&shadows)?,
                }),
            };
            write_report(&report, config.out_dir.as_deref())?;
            Ok(pass)
        }
        Command::Counterexample {
            config: cx,
            x,
            dump_paths: dump,
        } => {
            let (ensemble, result) = run_counterexample(cx, *x)?;
            if let Some(dir) = config.out_dir.as_deref() {
                std::fs::create_dir_all(dir)?;
                let stats: Vec<Check> = result.checks.clone();
                write_csv(&stats, &dir.join("counterexample_stats.csv"))?;
                if *dump > 0 {
                    let rows = dump_paths(&ensemble, *dump);
                    write_csv(&rows, &dir.join("paths.csv"))?;
                }
            }
            let pass = result.pass;
            let report = RunReport {
                command: "counterexample".into(),
                seed: cx.seed,
                config: config_value,
                pass,
                checks: result.checks.clone(),
                payload: serde_json::to_value(&result)?,
            };
            write_report(&report, config.out_dir.as_deref())?;
            Ok(pass)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_tree_then_verify_duality_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let market_path = dir.path().join("market.json");
        let gen = RunConfig {
            command: Command::GenTree {
                kind: TreeKind::Random,
                depth: 3,
                branching: 2,
                vol: 0.3,
                lambda: 0.1,
                out: market_path.clone(),
            },
            out_dir: Some(dir.path().join("gen")),
            tol: None,
            seed: 42,
            parallel: None,
        };
        assert_eq!(run(&gen), 0);
        let verify = RunConfig {
            command: Command::VerifyDuality {
                market: market_path,
                utility: "log".into(),
                x: 1.0,
            },
            out_dir: Some(dir.path().join("verify")),
            tol: None,
            seed: 42,
            parallel: None,
        };
        assert_eq!(run(&verify), 0);
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("verify/report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report["pass"], true);
        assert!(report["payload"]["gap"].as_f64().unwrap() <= 1e-5);
        assert_eq!(report["seed"], 42);
        assert!(report["config"].is_object());
    }

    #[test]
    fn missing_market_file_is_an_input_error() {
        let config = RunConfig {
            command: Command::SolvePrimal {
                market: PathBuf::from("/nonexistent/market.json"),
                utility: "log".into(),
                x: 1.0,
            },
            out_dir: None,
            tol: None,
            seed: 0,
            parallel: None,
        };
        assert_eq!(run(&config), 2);
    }

    #[test]
    fn infeasible_market_exits_one_with_certificate() {
        let dir = tempfile::tempdir().unwrap();
        let market_path = dir.path().join("arb.json");
        // both children above the root ask: one-sided arbitrage
        std::fs::write(
            &market_path,
            r#"{"horizon":1,"nodes":[{"id":0,"parent":null,"t":0,"p":1.0},
                {"id":1,"parent":0,"t":1,"p":0.5},{"id":2,"parent":0,"t":1,"p":0.5}],
                "lambda":0.01,"S":[1.0,1.2,1.1]}"#,
        )
        .unwrap();
        let config = RunConfig {
            command: Command::SolveDual {
                market: market_path,
                utility: "log".into(),
                y: 1.0,
            },
            out_dir: Some(dir.path().join("out")),
            tol: None,
            seed: 0,
            parallel: None,
        };
        assert_eq!(run(&config), 1);
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("out/report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report["pass"], false);
        assert!(report["payload"]["infeasibility_certificate"]
            .as_str()
            .unwrap()
            .contains("node 0"));
    }

    #[test]
    fn reports_are_deterministic_across_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let market_path = dir.path().join("m.json");
        let market = generate::random_market(3, 2, 0.3, 0.1, 9).unwrap();
        save_market(&market, &market_path).unwrap();
        let mk = |out: &str| RunConfig {
            command: Command::SolvePrimal {
                market: market_path.clone(),
                utility: "crra:2".into(),
                x: 1.5,
            },
            out_dir: Some(dir.path().join(out)),
            tol: None,
            seed: 3,
            parallel: None,
        };
        assert_eq!(run(&mk("a")), 0);
        assert_eq!(run(&mk("b")), 0);
        let a = std::fs::read_to_string(dir.path().join("a/report.json")).unwrap();
        let mut b = std::fs::read_to_string(dir.path().join("b/report.json")).unwrap();
        // the embedded config carries the out directory; normalize it
        b = b.replace("/b\"", "/a\"").replace("/b/", "/a/");
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_config_parses_json_and_toml() {
        let dir = tempfile::tempdir().unwrap();
        let jpath = dir.path().join("s.json");
        std::fs::write(&jpath, r#"{"a":0.2,"b":0.2,"kappa":0.5,"theta":0.3,"N":10}"#).unwrap();
        let s = ScheduleConfig::load(&jpath).unwrap();
        assert_eq!(s.steps, 10);
        let tpath = dir.path().join("s.toml");
        std::fs::write(&tpath, "a = 0.2\nb = 0.2\nkappa = 0.5\ntheta = [0.1, 0.2]\nN = 8\n")
            .unwrap();
        let s = ScheduleConfig::load(&tpath).unwrap();
        assert!(matches!(s.theta, ThetaSpec::Vector(ref v) if v.len() == 2));
    }
}
