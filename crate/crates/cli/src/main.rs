use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use torus_ensemble::cohomology::solve_v;
use torus_ensemble::conjugacy::{conjugacy_audit, ConjugacyProvider};
use torus_ensemble::dynamics::trajectory;
use torus_ensemble::ensemble::Ensemble;
use torus_ensemble::experiment::{parse_config, run_experiment, RunConfig};
use torus_ensemble::fourier::TorusSeries;
use torus_ensemble::model::{build_model, ModelSpec, SystemModel};
use torus_ensemble::stats::log_space;
use torus_ensemble::{Error, Result};

#[derive(Parser)]
#[command(name = "tens", version, about = "Weighted torus flows: audits, conjugacy and ensemble convergence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Reference system (sys-a, sys-b, sys-c, unweighted).
    #[arg(long, conflicts_with = "config")]
    system: Option<String>,
    /// Run config; its [model] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fourier band K (reference systems only).
    #[arg(long, default_value_t = 16)]
    band: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Field {
    M,
    A,
    Rho,
    B,
    V,
}

#[derive(Subcommand)]
enum Command {
    /// Resonance and nondegeneracy audit of the action box.
    Audit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 8)]
        grid_n: usize,
        /// Defaults to N.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Writes Fourier coefficients as CSV (n_1..n_N, re, im).
    DumpSeries {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        field: Field,
        /// Action for `v`, comma separated.
        #[arg(long)]
        action: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solves the cohomological equation at one action.
    SolveV {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        action: String,
    },
    /// Determinant, degree, identity and round-trip checks over an action grid.
    ConjugacyAudit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 4)]
        grid_n: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Direct and conjugated angles along one orbit.
    Trajectory {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        action: String,
        #[arg(long)]
        theta: String,
        /// "0,1,10" or "log:1:1000:32".
        #[arg(long, default_value = "0,1,10,100")]
        times: String,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Ensemble expectation at the given times (Monte Carlo and mode sum).
    Evolve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0,1,10")]
        times: String,
        /// Monte Carlo samples; defaults to the config's sample count.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Full pipeline; writes results.csv and report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config { path: s.to_string(), message: e.to_string() })
        })
        .collect()
}

fn parse_times(s: &str) -> Result<Vec<f64>> {
    if let Some(rest) = s.strip_prefix("log:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || Error::Config { path: s.to_string(), message: "expected log:start:stop:count".into() };
        if parts.len() != 3 {
            return Err(bad());
        }
        let start: f64 = parts[0].parse().map_err(|_| bad())?;
        let stop: f64 = parts[1].parse().map_err(|_| bad())?;
        let count: usize = parts[2].parse().map_err(|_| bad())?;
        if !(start > 0.0 && stop > start && count >= 2) {
            return Err(bad());
        }
        return Ok(log_space(start, stop, count));
    }
    parse_list(s)
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    parse_config(path)
}

fn load_model(args: &ModelArgs) -> Result<SystemModel> {
    let spec = match (&args.system, &args.config) {
        (_, Some(path)) => load_config(path)?.model,
        (Some(name), None) => ModelSpec::reference(name, args.band)
            .ok_or_else(|| Error::Config { path: "--system".into(), message: format!("unknown system `{name}`") })?,
        (None, None) => {
            return Err(Error::Config { path: "--system".into(), message: "give --system or --config".into() })
        }
    };
    build_model(&spec)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_series(series: &TorusSeries, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => series.write_csv(BufWriter::new(File::create(path)?)),
        None => series.write_csv(io::stdout().lock()),
    }
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Audit { model, grid_n, tau } => {
            let m = load_model(&model)?;
            let audit = m.resonance_scan(m.band, grid_n, tau.unwrap_or(m.dim as f64))?;
            let passed = audit.passed();
            print_json(&audit)?;
            Ok(if passed { 0 } else { 2 })
        }
        Command::DumpSeries { model, field, action, out } => {
            let m = load_model(&model)?;
            let series = match field {
                Field::M => m.weight_m.clone(),
                Field::A => m.a.clone(),
                Field::Rho => m.rho.clone(),
                Field::B => m.b.clone(),
                Field::V => {
                    let action = action.ok_or_else(|| Error::Config {
                        path: "--action".into(),
                        message: "required for field v".into(),
                    })?;
                    solve_v(&m, &parse_list(&action)?)?.v
                }
            };
            write_series(&series, out.as_ref())?;
            Ok(0)
        }
        Command::SolveV { model, action } => {
            let m = load_model(&model)?;
            let sol = solve_v(&m, &parse_list(&action)?)?;
            let mut out = io::stdout().lock();
            writeln!(out, "# omega = {:?}", sol.omega)?;
            writeln!(out, "# min_divisor = {:e}", sol.min_divisor)?;
            writeln!(out, "# residual_sup = {:e}", sol.residual_sup)?;
            sol.v.write_csv(out)?;
            Ok(0)
        }
        Command::ConjugacyAudit { model, grid_n, samples, seed } => {
            let m = load_model(&model)?;
            print_json(&conjugacy_audit(&m, grid_n, samples, seed)?)?;
            Ok(0)
        }
        Command::Trajectory { model, action, theta, times, tol } => {
            let m = load_model(&model)?;
            let provider = ConjugacyProvider::new(&m)?;
            let conj = provider.at(&parse_list(&action)?)?;
            print_json(&trajectory(&m, &conj, &parse_list(&theta)?, &parse_times(&times)?, tol)?)?;
            Ok(0)
        }
        Command::Evolve { config, times, samples } => {
            let cfg = load_config(&config)?;
            let m = build_model(&cfg.model)?;
            let ens = Ensemble::new(&m, cfg.ensemble.clone())?;
            let table = ens.mode_table()?;
            let n = samples.unwrap_or(cfg.ensemble.samples);
            let mut out = io::stdout().lock();
            writeln!(out, "t,mc,mc_stderr,quad,quad_error")?;
            for t in parse_times(&times)? {
                let e = ens.expect_t(&table, t, n)?;
                let (mc, se) = e.mc.map_or((f64::NAN, f64::NAN), |m| (m.mean, m.stderr));
                writeln!(out, "{t:e},{mc:e},{se:e},{:e},{:e}", e.quad, e.quad_error)?;
            }
            Ok(0)
        }
        Command::Run { config, out } => {
            let report = run_experiment(&config, &out)?;
            eprintln!("{}", report.status);
            Ok(report.exit_code as u8)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Resonance { .. } | Error::Degeneracy { .. } | Error::DiffeomorphismViolation { .. } => 2,
                Error::EstimatorDivergence { .. } => 4,
                _ => 1,
            })
        }
    }
}
