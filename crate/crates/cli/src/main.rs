//! Command-line front end for the `sumspace` library.
//!
//! Every command reads a data file (CSV `x_1..x_n, weight, value` or a JSON
//! list of atoms), normalizes it into the unit cube and writes a JSON or CSV
//! report to `--out` (standard output by default). All run constants are
//! echoed into JSON reports.

mod report;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use sumspace::measures::{parse_csv, parse_json, Atom};
use sumspace::{OraclePath, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "sumspace",
    version,
    about = "Linear near-optimal extension for L^{m,p} + L^p(dμ)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: GlobalOpts,
}

#[derive(Args, Debug, Clone)]
struct GlobalOpts {
    /// Smoothness order m (1..=4).
    #[arg(long, global = true, default_value_t = 1)]
    m: usize,
    /// Spatial dimension n (1 or 2).
    #[arg(long, global = true, default_value_t = 1)]
    n: usize,
    /// Integrability exponent p > n.
    #[arg(long, global = true, default_value_t = 2.0)]
    p: f64,
    /// Basis tolerance used by every OK test.
    #[arg(long, global = true)]
    eps: Option<f64>,
    /// Maximal dyadic depth of a decomposition.
    #[arg(long = "max-depth", global = true)]
    max_depth: Option<usize>,
    /// Cells per axis of the discretized back end.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Variational back end (defaults to `exact` when n = 1 and p = 2).
    #[arg(long, global = true, value_enum)]
    oracle: Option<OracleArg>,
    /// Seed for randomized audits.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (standard output when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OracleArg {
    Exact,
    Irls,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Maps the data into the unit cube and prints the frame.
    Normalize {
        /// Data file.
        input: PathBuf,
    },
    /// Builds T and M and writes the full report.
    Extend {
        /// Data file.
        input: PathBuf,
        /// Sample points per axis for the tabulated Tf.
        #[arg(long, default_value_t = 33)]
        samples: usize,
    },
    /// Trace mode: every weight must be infinite.
    Trace {
        /// Data file.
        input: PathBuf,
        /// Sample points per axis for the tabulated Tf.
        #[arg(long, default_value_t = 33)]
        samples: usize,
    },
    /// Computes the sum-space norm with the variational oracle.
    Norm {
        /// Data file.
        input: PathBuf,
    },
    /// Tabulates the K-functional on a logarithmic grid (CSV).
    Kcurve {
        /// Data file.
        input: PathBuf,
        /// Smallest t.
        #[arg(long, default_value_t = 1e-3)]
        t_min: f64,
        /// Largest t.
        #[arg(long, default_value_t = 1e3)]
        t_max: f64,
        /// Number of grid points.
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Re-parses an `extend` or `trace` report, rebuilds it and reruns every audit.
    Audit {
        /// Report written by `extend` or `trace`.
        report: PathBuf,
    },
}

impl GlobalOpts {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::new(self.m, self.n, self.p);
        if let Some(e) = self.eps {
            cfg.eps_basis = e;
        }
        if let Some(d) = self.max_depth {
            cfg.max_depth = d;
        }
        if let Some(g) = self.grid {
            cfg.grid = g;
        }
        if let Some(o) = self.oracle {
            cfg.oracle = match o {
                OracleArg::Exact => OraclePath::Exact,
                OracleArg::Irls => OraclePath::Irls,
            };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_atoms(path: &Path, n: usize) -> Result<Vec<Atom>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let atoms = if is_json {
        parse_json(&text, n)
    } else {
        parse_csv(text.as_bytes(), n)
    }
    .with_context(|| format!("invalid data in {}", path.display()))?;
    if atoms.is_empty() {
        bail!("{} contains no atoms", path.display());
    }
    Ok(atoms)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .context("cannot write to standard output")
        }
    }
}

fn to_json_text(v: &serde_json::Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn run(cli: Cli) -> Result<bool> {
    let out = cli.opts.out.clone();
    let mut passed = true;
    let text = match &cli.command {
        Command::Normalize { input } => {
            let cfg = cli.opts.config()?;
            let atoms = read_atoms(input, cfg.n)?;
            to_json_text(&report::normalize(&atoms, &cfg)?)?
        }
        Command::Extend { input, samples } => {
            let cfg = cli.opts.config()?;
            let atoms = read_atoms(input, cfg.n)?;
            to_json_text(&report::extend(&atoms, &cfg, *samples)?)?
        }
        Command::Trace { input, samples } => {
            let cfg = cli.opts.config()?;
            let atoms = read_atoms(input, cfg.n)?;
            to_json_text(&report::trace(&atoms, &cfg, *samples)?)?
        }
        Command::Norm { input } => {
            let cfg = cli.opts.config()?;
            let atoms = read_atoms(input, cfg.n)?;
            to_json_text(&report::norm(&atoms, &cfg)?)?
        }
        Command::Kcurve {
            input,
            t_min,
            t_max,
            points,
        } => {
            let cfg = cli.opts.config()?;
            let atoms = read_atoms(input, cfg.n)?;
            report::kcurve(&atoms, &cfg, *t_min, *t_max, *points)?
        }
        Command::Audit { report: path } => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            let audit =
                report::audit(&text).with_context(|| format!("cannot audit {}", path.display()))?;
            passed = audit["passed"].as_bool().unwrap_or(false);
            to_json_text(&audit)?
        }
    };
    write_output(out.as_deref(), &text)?;
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("audit failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
