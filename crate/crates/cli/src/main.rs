mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use robust_alpha::alpha::{run_methods, DeltaQ, Method, TestResult};
use robust_alpha::data::{
    load_dataset, rolling_pvalues, write_rejection_table, write_rolling, RollingReport, RollingRow,
};
use robust_alpha::sim::{run_study, RejectionRow, RejectionTable};
use robust_alpha::{Error, ErrorKind};

use config::{default_out, Config};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Robust alpha tests for linear factor pricing models.
#[derive(Parser, Debug)]
#[command(name = "robust-alpha", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo size study under zero alphas.
    SimulateSize(Common),
    /// Monte Carlo power study over a grid of sparsity and signal energy.
    SimulatePower {
        #[command(flatten)]
        common: Common,
        /// Numbers of nonzero alphas, comma separated.
        #[arg(long, value_delimiter = ',')]
        s: Option<Vec<usize>>,
        /// Signal energies |alpha|^2, comma separated.
        #[arg(long, value_delimiter = ',')]
        delta: Option<Vec<f64>>,
    },
    /// Run the tests once on a returns and factors file.
    Test {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: Files,
    },
    /// Rolling-window p-values on a returns and factors file.
    Rolling {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: Files,
        /// Window length in periods.
        #[arg(long)]
        window: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct Files {
    /// Returns CSV: `date` then one column per asset.
    #[arg(long)]
    returns: PathBuf,
    /// Factors CSV with header `date,mkt_rf,smb,hml,rf`.
    #[arg(long)]
    factors: PathBuf,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Error scenarios (I, II, III, IV), comma separated.
    #[arg(long, value_delimiter = ',')]
    scenario: Option<Vec<String>>,
    /// Number of periods.
    #[arg(long = "t", alias = "periods")]
    t: Option<usize>,
    /// Number of assets.
    #[arg(long = "n", alias = "assets")]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Methods (GRS, PY, MAX, COM, SS, SM, CC or all), comma separated.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Nominal level.
    #[arg(long)]
    gamma: Option<f64>,
    /// Threshold constant for PY's correlation screening.
    #[arg(long)]
    py_c: Option<f64>,
    /// Fixed-point tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Centering of SS: zero, fixed or calibrate.
    #[arg(long)]
    delta_q_mode: Option<String>,
    /// Centering value used with `--delta-q-mode fixed`.
    #[arg(long, allow_hyphen_values = true)]
    delta_q: Option<f64>,
    #[arg(long)]
    calibration_reps: Option<usize>,
    #[arg(long)]
    calibration_seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<Config, CliError> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    c.$f = v.clone();
                }
            )*};
        }
        take!(
            t,
            n,
            reps,
            seed,
            methods,
            gamma,
            py_c,
            tol,
            max_iter,
            delta_q_mode,
            delta_q
        );
        take!(calibration_reps, calibration_seed);
        if let Some(v) = &self.scenario {
            c.scenarios = v.clone();
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        if !(0.0..=1.0).contains(&c.gamma) {
            return Err(CliError::Usage(format!(
                "gamma must lie in [0, 1], got {}",
                c.gamma
            )));
        }
        if !(c.tol > 0.0) || c.max_iter == 0 {
            return Err(CliError::Usage("tol and max_iter must be positive".into()));
        }
        if let Some(k) = c.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build_global()
                .map_err(|e| CliError::Usage(format!("cannot set thread count: {e}")))?;
        }
        Ok(c)
    }
}

fn row_json(r: &RejectionRow) -> Value {
    json!({
        "method": r.method.name(),
        "scenario": r.scenario.label(),
        "T": r.t,
        "N": r.n,
        "s": r.s,
        "delta": r.delta,
        "gamma": r.gamma,
        "reps": r.reps,
        "reject_rate": r.reject_rate,
        "mc_stderr": r.mc_stderr,
    })
}

fn delta_q_json(d: DeltaQ) -> Value {
    json!(d.value())
}

fn study(
    c: &Config,
    grid: &[(usize, f64)],
    command: &str,
    out: PathBuf,
) -> Result<Value, CliError> {
    let methods = c.methods()?;
    let mut table = RejectionTable::default();
    let mut centering = Vec::new();
    for model in c.scenarios()? {
        let null = c.spec(model, 0, 0.0);
        null.validate()?;
        let mut cfg = c.test_config();
        if methods.iter().any(|m| matches!(m, Method::Ss | Method::Cc)) {
            cfg.delta_q = c.resolve_delta_q(&null)?;
        }
        centering.push(json!({"scenario": model.label(), "delta_q": delta_q_json(cfg.delta_q)}));
        for &(s, delta) in grid {
            let spec = c.spec(model, s, delta);
            spec.validate()?;
            table.extend(run_study(&spec, &methods, &cfg)?);
        }
    }
    table.sort();
    write_rejection_table(&table, &out)?;
    Ok(json!({
        "command": command,
        "out": out,
        "failures": table.failures,
        "delta_q": centering,
        "rows": table.rows.iter().map(row_json).collect::<Vec<_>>(),
    }))
}

fn result_json(m: Method, r: &Result<TestResult, Error>, gamma: f64) -> Value {
    match r {
        Ok(t) => json!({
            "method": m.name(),
            "statistic": t.statistic,
            "p_value": t.p_value,
            "reject": t.rejects(gamma),
            "diagnostics": t.diagnostics,
        }),
        Err(e) => json!({"method": m.name(), "error": e.to_string()}),
    }
}

/// Centering for SS on real data: calibrated on the first configured
/// scenario at the data's dimensions.
fn data_delta_q(c: &Config, methods: &[Method], t: usize, n: usize) -> Result<DeltaQ, CliError> {
    if !methods.iter().any(|m| matches!(m, Method::Ss | Method::Cc)) {
        return Ok(DeltaQ::Zero);
    }
    let model = c.scenarios()?[0];
    let spec = robust_alpha::sim::ScenarioSpec {
        t,
        n,
        ..c.spec(model, 0, 0.0)
    };
    c.resolve_delta_q(&spec)
}

fn run(cli: Cli) -> Result<(Value, bool), CliError> {
    match cli.command {
        Command::SimulateSize(common) => {
            let c = common.resolve()?;
            let out = common.out.clone().unwrap_or_else(|| default_out("size"));
            Ok((study(&c, &[(0, 0.0)], "simulate-size", out)?, true))
        }
        Command::SimulatePower { common, s, delta } => {
            let mut c = common.resolve()?;
            if let Some(v) = s {
                c.s = v;
            }
            if let Some(v) = delta {
                c.delta = v;
            }
            if c.s.is_empty() || c.delta.is_empty() {
                return Err(CliError::Usage(
                    "power grid needs at least one s and one delta".into(),
                ));
            }
            let grid: Vec<(usize, f64)> =
                c.s.iter()
                    .flat_map(|&s| c.delta.iter().map(move |&d| (s, d)))
                    .collect();
            let out = common.out.clone().unwrap_or_else(|| default_out("power"));
            Ok((study(&c, &grid, "simulate-power", out)?, true))
        }
        Command::Test { common, files } => {
            let c = common.resolve()?;
            let methods = c.methods()?;
            let ds = load_dataset(&files.returns, &files.factors)?;
            let (t, n) = (ds.panel.t(), ds.panel.n());
            let mut cfg = c.test_config();
            cfg.delta_q = data_delta_q(&c, &methods, t, n)?;
            let results = run_methods(&ds.panel, &methods, &cfg)?;
            let report = RollingReport {
                window: t,
                methods: methods.clone(),
                rows: results
                    .iter()
                    .map(|(m, r)| RollingRow {
                        window_start: ds.dates[0].clone(),
                        method: *m,
                        p_value: r.as_ref().ok().map(|x| x.p_value),
                    })
                    .collect(),
            };
            let out = common.out.clone().unwrap_or_else(|| default_out("test"));
            write_rolling(&report, &out)?;
            let ok = results.iter().all(|(_, r)| r.is_ok());
            let summary = json!({
                "command": "test",
                "out": out,
                "T": t,
                "N": n,
                "first": ds.dates[0],
                "last": ds.dates[t - 1],
                "gamma": c.gamma,
                "delta_q": delta_q_json(cfg.delta_q),
                "results": results.iter().map(|(m, r)| result_json(*m, r, c.gamma)).collect::<Vec<_>>(),
            });
            Ok((summary, ok))
        }
        Command::Rolling {
            common,
            files,
            window,
        } => {
            let mut c = common.resolve()?;
            if let Some(w) = window {
                c.window = w;
            }
            let methods = c.methods()?;
            let ds = load_dataset(&files.returns, &files.factors)?;
            let mut cfg = c.test_config();
            cfg.delta_q = data_delta_q(&c, &methods, c.window.min(ds.panel.t()), ds.panel.n())?;
            let report = rolling_pvalues(&ds.panel, Some(&ds.dates), c.window, &methods, &cfg)?;
            let out = common.out.clone().unwrap_or_else(|| default_out("rolling"));
            write_rolling(&report, &out)?;
            let ratios: serde_json::Map<String, Value> = methods
                .iter()
                .map(|m| {
                    (
                        m.name().to_string(),
                        json!(report.rejection_ratio(*m, c.gamma)),
                    )
                })
                .collect();
            let failed = report.rows.iter().filter(|r| r.p_value.is_none()).count();
            let summary = json!({
                "command": "rolling",
                "out": out,
                "window": c.window,
                "windows": report.windows(),
                "gamma": c.gamma,
                "delta_q": delta_q_json(cfg.delta_q),
                "failed_cells": failed,
                "rejection_ratio": ratios,
            });
            Ok((summary, true))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok((summary, ok)) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
