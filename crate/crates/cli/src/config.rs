use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use robust_alpha::alpha::{DeltaQ, Method, TestConfig};
use robust_alpha::sim::{calibrate_delta_q, ErrorModel, ScenarioSpec};
use robust_alpha::spatial::FixpointOptions;

use crate::CliError;

/// Every tunable with its default. A TOML file may set any subset of keys;
/// command-line flags take precedence over the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scenarios: Vec<String>,
    pub t: usize,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<String>,
    pub gamma: f64,
    pub s: Vec<usize>,
    pub delta: Vec<f64>,
    pub py_c: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// One of `zero`, `fixed`, `calibrate`.
    pub delta_q_mode: String,
    /// Used when `delta_q_mode = "fixed"`.
    pub delta_q: f64,
    pub calibration_reps: usize,
    pub calibration_seed: u64,
    pub kappa: f64,
    pub rho: f64,
    pub window: usize,
    pub threads: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        let fix = FixpointOptions::default();
        Config {
            scenarios: vec!["I".into()],
            t: 60,
            n: 100,
            reps: 1000,
            seed: 20240601,
            methods: vec!["all".into()],
            gamma: 0.05,
            s: vec![2, 10, 25],
            delta: vec![0.25, 0.5, 1.0],
            py_c: 1.0,
            tol: fix.tol,
            max_iter: fix.max_iter,
            delta_q_mode: "zero".into(),
            delta_q: 0.0,
            calibration_reps: 500,
            calibration_seed: 7_777_777,
            kappa: 0.8,
            rho: 0.5,
            window: 60,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaQMode {
    Zero,
    Fixed(f64),
    Calibrate,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn methods(&self) -> Result<Vec<Method>, CliError> {
        let mut out = Vec::new();
        for m in &self.methods {
            if m.eq_ignore_ascii_case("all") {
                out.extend(Method::ALL);
            } else {
                out.push(
                    m.parse()
                        .map_err(|_| CliError::Usage(format!("unknown method {m:?}")))?,
                );
            }
        }
        if out.is_empty() {
            return Err(CliError::Usage("no methods selected".into()));
        }
        let mut seen = Vec::new();
        out.retain(|m| {
            let fresh = !seen.contains(m);
            seen.push(*m);
            fresh
        });
        Ok(out)
    }

    pub fn scenarios(&self) -> Result<Vec<ErrorModel>, CliError> {
        if self.scenarios.is_empty() {
            return Err(CliError::Usage("no scenarios selected".into()));
        }
        self.scenarios
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Usage(format!("unknown scenario {s:?}")))
            })
            .collect()
    }

    pub fn delta_q_mode(&self) -> Result<DeltaQMode, CliError> {
        match self.delta_q_mode.to_ascii_lowercase().as_str() {
            "zero" => Ok(DeltaQMode::Zero),
            "fixed" => Ok(DeltaQMode::Fixed(self.delta_q)),
            "calibrate" => Ok(DeltaQMode::Calibrate),
            other => Err(CliError::Usage(format!(
                "delta_q_mode must be zero, fixed or calibrate, got {other:?}"
            ))),
        }
    }

    pub fn test_config(&self) -> TestConfig {
        TestConfig {
            fixpoint: FixpointOptions {
                tol: self.tol,
                max_iter: self.max_iter,
            },
            py_threshold: self.py_c,
            ..TestConfig::default()
        }
    }

    pub fn spec(&self, model: ErrorModel, s: usize, delta: f64) -> ScenarioSpec {
        ScenarioSpec {
            s,
            delta,
            gamma: self.gamma,
            reps: self.reps,
            master_seed: self.seed,
            kappa: self.kappa,
            rho: self.rho,
            ..ScenarioSpec::new(model, self.t, self.n)
        }
    }

    /// Resolves the SS centering for panels shaped like `spec`.
    pub fn resolve_delta_q(&self, spec: &ScenarioSpec) -> Result<DeltaQ, CliError> {
        Ok(match self.delta_q_mode()? {
            DeltaQMode::Zero => DeltaQ::Zero,
            DeltaQMode::Fixed(v) => DeltaQ::Fixed(v),
            DeltaQMode::Calibrate => {
                let base = self.test_config();
                let v =
                    calibrate_delta_q(spec, self.calibration_reps, self.calibration_seed, &base)?;
                DeltaQ::Fixed(v)
            }
        })
    }
}

pub fn default_out(command: &str) -> PathBuf {
    PathBuf::from(format!("{command}.csv"))
}
